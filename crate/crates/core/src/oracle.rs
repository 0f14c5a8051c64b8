//! Exact reference allocator for cross-checking the production solver.
//!
//! Classic progressive filling in exact rational arithmetic: every unfrozen
//! flow shares one water level `t`. The level rises until some flow reaches its
//! demand or some link's load `frozen_load + active_count * t` hits capacity;
//! everything touching that constraint freezes at once. No floating point is
//! involved until the final conversion, and the residual-share bookkeeping of
//! the production solver is not reused.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::ids::LinkId;
use crate::kernel::maxmin::{FlowRequest, LinkSpec, SolveError};

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite input")
}

/// Returns the allocation as exact rationals; `None` marks an unbounded flow.
pub fn max_min_exact<K: Ord + Clone>(
    flows: &[FlowRequest<K>],
    links: &[LinkSpec],
) -> Result<BTreeMap<K, Option<BigRational>>, SolveError> {
    let link_pos: BTreeMap<&LinkId, usize> =
        links.iter().enumerate().map(|(i, l)| (&l.id, i)).collect();
    for l in links {
        if !(l.capacity_bps.is_finite() && l.capacity_bps > 0.0) {
            return Err(SolveError::BadCapacity(l.id.clone()));
        }
    }
    let mut uses = vec![vec![false; links.len()]; flows.len()];
    for (i, f) in flows.iter().enumerate() {
        for l in &f.path {
            let p = *link_pos
                .get(l)
                .ok_or_else(|| SolveError::UnknownLink(l.clone()))?;
            uses[i][p] = true;
        }
    }
    let caps: Vec<BigRational> = links.iter().map(|l| exact(l.capacity_bps)).collect();
    let demand: Vec<Option<BigRational>> = flows
        .iter()
        .map(|f| f.demand_bps.map(|d| exact(d.max(0.0))))
        .collect();

    let mut result: Vec<Option<Option<BigRational>>> = vec![None; flows.len()];
    for i in 0..flows.len() {
        if !uses[i].iter().any(|&u| u) && demand[i].is_none() {
            result[i] = Some(None);
        }
    }

    loop {
        let active: Vec<usize> = (0..flows.len()).filter(|&i| result[i].is_none()).collect();
        if active.is_empty() {
            break;
        }
        // Level at which each constraint binds.
        let mut next: Option<BigRational> = None;
        let mut consider = |v: BigRational| {
            if next.as_ref().is_none_or(|n| v < *n) {
                next = Some(v);
            }
        };
        for &i in &active {
            if let Some(d) = &demand[i] {
                consider(d.clone());
            }
        }
        for (l, cap) in caps.iter().enumerate() {
            let n_active = active.iter().filter(|&&i| uses[i][l]).count();
            if n_active == 0 {
                continue;
            }
            let frozen_load = frozen_load(&result, &uses, l);
            consider((cap - frozen_load) / BigRational::from_integer(BigInt::from(n_active)));
        }
        let level = next.expect("active flow has a constraint");

        let saturated: Vec<usize> = caps
            .iter()
            .enumerate()
            .filter(|&(l, cap)| {
                let n_active = active.iter().filter(|&&i| uses[i][l]).count();
                n_active > 0
                    && frozen_load(&result, &uses, l)
                        + &level * BigRational::from_integer(BigInt::from(n_active))
                        >= *cap
            })
            .map(|(l, _)| l)
            .collect();
        for &i in &active {
            let at_demand = demand[i].as_ref().is_some_and(|d| *d <= level);
            let on_saturated = saturated.iter().any(|&l| uses[i][l]);
            if at_demand || on_saturated {
                result[i] = Some(Some(level.clone()));
            }
        }
    }

    Ok(flows
        .iter()
        .zip(result)
        .map(|(f, r)| (f.key.clone(), r.expect("all flows frozen")))
        .collect())
}

fn frozen_load(
    result: &[Option<Option<BigRational>>],
    uses: &[Vec<bool>],
    link: usize,
) -> BigRational {
    let mut sum = BigRational::zero();
    for (i, r) in result.iter().enumerate() {
        if let Some(Some(v)) = r {
            if uses[i][link] {
                sum += v;
            }
        }
    }
    sum
}

/// Same allocation converted to `f64`, with `f64::INFINITY` for unbounded flows.
pub fn max_min_oracle<K: Ord + Clone>(
    flows: &[FlowRequest<K>],
    links: &[LinkSpec],
) -> Result<BTreeMap<K, f64>, SolveError> {
    Ok(max_min_exact(flows, links)?
        .into_iter()
        .map(|(k, v)| {
            let r = v.map_or(f64::INFINITY, |q| q.to_f64().unwrap_or(f64::NAN));
            (k, r)
        })
        .collect())
}

/// Checks the defining property directly: the allocation is feasible, and
/// every flow is either at its demand or crosses a saturated link on which no
/// other flow gets more. Returns a description of the first violation.
pub fn check_max_min<K: Ord + Clone + std::fmt::Debug>(
    flows: &[FlowRequest<K>],
    links: &[LinkSpec],
    alloc: &BTreeMap<K, f64>,
    rel_tol: f64,
) -> Result<(), String> {
    let load = |l: &LinkId| -> f64 {
        flows
            .iter()
            .filter(|f| f.path.contains(l))
            .map(|f| alloc[&f.key])
            .sum()
    };
    for link in links {
        let used = load(&link.id);
        if used > link.capacity_bps * (1.0 + rel_tol) {
            return Err(format!(
                "link {} overloaded: {used} > {}",
                link.id, link.capacity_bps
            ));
        }
    }
    for f in flows {
        let r = alloc[&f.key];
        if let Some(d) = f.demand_bps {
            if r > d * (1.0 + rel_tol) + rel_tol {
                return Err(format!("{:?} exceeds demand", f.key));
            }
            if (r - d).abs() <= rel_tol * d.max(1.0) {
                continue;
            }
        }
        if f.path.is_empty() {
            if r.is_infinite() {
                continue;
            }
            return Err(format!("{:?} unconstrained but finite", f.key));
        }
        let has_bottleneck = links.iter().filter(|l| f.path.contains(&l.id)).any(|l| {
            let saturated = load(&l.id) >= l.capacity_bps * (1.0 - rel_tol);
            let largest = flows
                .iter()
                .filter(|g| g.path.contains(&l.id))
                .all(|g| alloc[&g.key] <= r * (1.0 + rel_tol) + rel_tol);
            saturated && largest
        });
        if !has_bottleneck {
            return Err(format!("{:?} at {r} has no bottleneck link", f.key));
        }
    }
    Ok(())
}
