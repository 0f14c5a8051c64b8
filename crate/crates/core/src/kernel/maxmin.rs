//! Max-min fair bandwidth allocation by progressive water-filling.
//!
//! Each round picks the tightest constraint among the remaining flows: either
//! the link with the smallest equal share of its residual capacity, or a flow
//! whose demand is below every such share. Demand-limited flows freeze at
//! their demand; otherwise every unfrozen flow on the bottleneck link freezes
//! at the equal share. The loop ends when every flow is frozen.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::LinkId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub id: LinkId,
    pub capacity_bps: f64,
}

impl LinkSpec {
    pub fn new(id: impl Into<LinkId>, capacity_bps: f64) -> Self {
        LinkSpec {
            id: id.into(),
            capacity_bps,
        }
    }
}

/// One flow as seen by the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRequest<K> {
    pub key: K,
    pub path: Vec<LinkId>,
    /// `None` means the flow takes whatever the network gives it.
    pub demand_bps: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("flow references unknown link {0}")]
    UnknownLink(LinkId),
    #[error("duplicate link id {0}")]
    DuplicateLink(LinkId),
    #[error("link {0} has non-positive or non-finite capacity")]
    BadCapacity(LinkId),
}

/// Solves by link id. Flows with an empty path and no demand come back as
/// `f64::INFINITY`.
pub fn solve_max_min<K: Ord + Clone>(
    flows: &[FlowRequest<K>],
    links: &[LinkSpec],
) -> Result<BTreeMap<K, f64>, SolveError> {
    let mut index = HashMap::with_capacity(links.len());
    for (i, l) in links.iter().enumerate() {
        if !(l.capacity_bps.is_finite() && l.capacity_bps > 0.0) {
            return Err(SolveError::BadCapacity(l.id.clone()));
        }
        if index.insert(&l.id, i).is_some() {
            return Err(SolveError::DuplicateLink(l.id.clone()));
        }
    }
    let mut paths = Vec::with_capacity(flows.len());
    for f in flows {
        let mut p = Vec::with_capacity(f.path.len());
        for l in &f.path {
            let i = *index
                .get(l)
                .ok_or_else(|| SolveError::UnknownLink(l.clone()))?;
            if !p.contains(&i) {
                p.push(i);
            }
        }
        paths.push(p);
    }
    let demands: Vec<Option<f64>> = flows.iter().map(|f| f.demand_bps).collect();
    let caps: Vec<f64> = links.iter().map(|l| l.capacity_bps).collect();
    let rates = water_fill(&paths, &demands, &caps);
    Ok(flows
        .iter()
        .zip(rates)
        .map(|(f, r)| (f.key.clone(), r))
        .collect())
}

/// Index-based core shared with the flow network. `paths[i]` lists link
/// indices without duplicates.
pub(crate) fn water_fill(paths: &[Vec<usize>], demands: &[Option<f64>], caps: &[f64]) -> Vec<f64> {
    let n = paths.len();
    let mut rate = vec![0.0; n];
    let mut frozen = vec![false; n];
    let mut residual = caps.to_vec();
    let mut active_on = vec![0usize; caps.len()];
    let mut on_link: Vec<Vec<usize>> = vec![Vec::new(); caps.len()];

    let mut remaining = 0;
    for (i, p) in paths.iter().enumerate() {
        match (p.is_empty(), demands[i]) {
            (true, None) => {
                rate[i] = f64::INFINITY;
                frozen[i] = true;
            }
            (_, Some(d)) if d <= 0.0 => {
                frozen[i] = true;
            }
            _ => {
                remaining += 1;
                for &l in p {
                    active_on[l] += 1;
                    on_link[l].push(i);
                }
            }
        }
    }

    let freeze = |i: usize,
                  r: f64,
                  rate: &mut [f64],
                  frozen: &mut [bool],
                  residual: &mut [f64],
                  active_on: &mut [usize]| {
        rate[i] = r;
        frozen[i] = true;
        for &l in &paths[i] {
            residual[l] = (residual[l] - r).max(0.0);
            active_on[l] -= 1;
        }
    };

    while remaining > 0 {
        let mut bottleneck: Option<(usize, f64)> = None;
        for (l, &cnt) in active_on.iter().enumerate() {
            if cnt == 0 {
                continue;
            }
            let share = residual[l] / cnt as f64;
            if bottleneck.is_none_or(|(_, s)| share < s) {
                bottleneck = Some((l, share));
            }
        }
        let mut smallest_demand: Option<(usize, f64)> = None;
        for i in 0..n {
            if frozen[i] {
                continue;
            }
            if let Some(d) = demands[i] {
                if smallest_demand.is_none_or(|(_, s)| d < s) {
                    smallest_demand = Some((i, d));
                }
            }
        }

        match (bottleneck, smallest_demand) {
            (_, Some((i, d))) if bottleneck.is_none_or(|(_, s)| d <= s) => {
                freeze(i, d, &mut rate, &mut frozen, &mut residual, &mut active_on);
                remaining -= 1;
            }
            (Some((l, share)), _) => {
                for &i in &on_link[l] {
                    if !frozen[i] {
                        freeze(
                            i,
                            share,
                            &mut rate,
                            &mut frozen,
                            &mut residual,
                            &mut active_on,
                        );
                        remaining -= 1;
                    }
                }
            }
            (None, _) => unreachable!("unfrozen flow with neither a link nor a demand"),
        }
    }
    rate
}

/// Parses `name=capacity_bps` items separated by commas.
pub fn parse_link_list(spec: &str) -> Result<Vec<LinkSpec>, String> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (id, cap) = item
                .split_once('=')
                .ok_or_else(|| format!("link {item:?}: expected name=capacity"))?;
            let cap: f64 = cap
                .trim()
                .parse()
                .map_err(|_| format!("link {id}: bad capacity {cap:?}"))?;
            Ok(LinkSpec::new(id.trim(), cap))
        })
        .collect()
}

/// Parses `name=link+link[:demand_bps]` items separated by commas.
pub fn parse_flow_list(spec: &str) -> Result<Vec<FlowRequest<String>>, String> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (id, rest) = item
                .split_once('=')
                .ok_or_else(|| format!("flow {item:?}: expected name=path[:demand]"))?;
            let (path, demand) = match rest.split_once(':') {
                Some((p, d)) => {
                    let d: f64 = d
                        .trim()
                        .parse()
                        .map_err(|_| format!("flow {id}: bad demand {d:?}"))?;
                    (p, Some(d))
                }
                None => (rest, None),
            };
            Ok(FlowRequest {
                key: id.trim().to_string(),
                path: path
                    .split('+')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(Into::into)
                    .collect(),
                demand_bps: demand,
            })
        })
        .collect()
}
