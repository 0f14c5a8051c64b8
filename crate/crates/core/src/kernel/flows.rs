//! Fluid flow network: links, open transfers, and exact byte accounting.
//!
//! Remaining work is tracked in integer units of one bit-microsecond per
//! second (`bytes * 8 * 10^6`). A flow allocated `r` bit/s for `dt`
//! microseconds moves exactly `r * dt` units, so bytes are conserved with no
//! rounding no matter how many times the allocation changes.

use std::collections::BTreeMap;

use thiserror::Error;

use super::maxmin::{water_fill, LinkSpec};
use super::time::{SimDuration, MICROS_PER_SEC};
use crate::ids::{FlowId, LinkId};

pub(crate) const UNITS_PER_BYTE: u128 = 8 * MICROS_PER_SEC as u128;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("unknown link {0}")]
    UnknownLink(LinkId),
    #[error("duplicate link id {0}")]
    DuplicateLink(LinkId),
    #[error("link {0} has non-positive or non-finite capacity")]
    BadCapacity(LinkId),
    #[error("link {link} carries {load_bps} bit/s over capacity {capacity_bps}")]
    CapacityExceeded {
        link: LinkId,
        load_bps: u64,
        capacity_bps: f64,
    },
}

/// Solver output for one flow after flooring to whole bits per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rate {
    Bps(u64),
    /// Nothing constrains the flow; it completes in zero time.
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct Flow<T> {
    id: FlowId,
    path: Vec<usize>,
    demand_bps: Option<f64>,
    initial_bytes: u64,
    remaining: u128,
    rate: Rate,
    pub tag: T,
}

impl<T> Flow<T> {
    pub fn id(&self) -> FlowId {
        self.id
    }

    pub fn demand_bps(&self) -> Option<f64> {
        self.demand_bps
    }

    pub fn rate(&self) -> Rate {
        self.rate
    }

    pub fn allocated_bps(&self) -> f64 {
        match self.rate {
            Rate::Bps(r) => r as f64,
            Rate::Unbounded => f64::INFINITY,
        }
    }

    pub fn initial_bytes(&self) -> u64 {
        self.initial_bytes
    }

    pub fn remaining_bytes(&self) -> f64 {
        self.remaining as f64 / UNITS_PER_BYTE as f64
    }

    /// Bytes delivered so far, rounded down.
    pub fn moved_bytes(&self) -> u64 {
        let total = self.initial_bytes as u128 * UNITS_PER_BYTE;
        ((total - self.remaining) / UNITS_PER_BYTE) as u64
    }

    pub fn is_done(&self) -> bool {
        self.remaining == 0
    }

    fn time_to_finish(&self) -> Option<u64> {
        if self.remaining == 0 {
            return Some(0);
        }
        match self.rate {
            Rate::Unbounded => Some(0),
            Rate::Bps(0) => None,
            Rate::Bps(r) => {
                let r = r as u128;
                Some(self.remaining.div_ceil(r).min(u64::MAX as u128) as u64)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowNetwork<T> {
    links: Vec<LinkSpec>,
    index: BTreeMap<LinkId, usize>,
    flows: BTreeMap<FlowId, Flow<T>>,
    next_id: u64,
    link_work: Vec<u128>,
    dirty: bool,
}

impl<T> FlowNetwork<T> {
    pub fn new(links: Vec<LinkSpec>) -> Result<Self, NetworkError> {
        let mut index = BTreeMap::new();
        for (i, l) in links.iter().enumerate() {
            if !(l.capacity_bps.is_finite() && l.capacity_bps > 0.0) {
                return Err(NetworkError::BadCapacity(l.id.clone()));
            }
            if index.insert(l.id.clone(), i).is_some() {
                return Err(NetworkError::DuplicateLink(l.id.clone()));
            }
        }
        let n = links.len();
        Ok(FlowNetwork {
            links,
            index,
            flows: BTreeMap::new(),
            next_id: 0,
            link_work: vec![0; n],
            dirty: false,
        })
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.links
    }

    pub fn link_index(&self, id: &LinkId) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Opens a transfer of `bytes` along `path`. The allocation is stale until
    /// [`resolve`](Self::resolve) runs.
    pub fn open(
        &mut self,
        path: &[LinkId],
        demand_bps: Option<f64>,
        bytes: u64,
        tag: T,
    ) -> Result<FlowId, NetworkError> {
        let mut p = Vec::with_capacity(path.len());
        for l in path {
            let i = self
                .link_index(l)
                .ok_or_else(|| NetworkError::UnknownLink(l.clone()))?;
            if !p.contains(&i) {
                p.push(i);
            }
        }
        let id = FlowId(self.next_id);
        self.next_id += 1;
        self.flows.insert(
            id,
            Flow {
                id,
                path: p,
                demand_bps,
                initial_bytes: bytes,
                remaining: bytes as u128 * UNITS_PER_BYTE,
                rate: Rate::Bps(0),
                tag,
            },
        );
        self.dirty = true;
        Ok(id)
    }

    /// Removes a flow before it finishes, returning it with its progress.
    pub fn close(&mut self, id: FlowId) -> Option<Flow<T>> {
        let f = self.flows.remove(&id);
        if f.is_some() {
            self.dirty = true;
        }
        f
    }

    pub fn set_demand(&mut self, id: FlowId, demand_bps: Option<f64>) -> bool {
        match self.flows.get_mut(&id) {
            Some(f) => {
                f.demand_bps = demand_bps;
                self.dirty = true;
                true
            }
            None => false,
        }
    }

    pub fn needs_resolve(&self) -> bool {
        self.dirty
    }

    /// Recomputes the max-min allocation for every open flow.
    pub fn resolve(&mut self) {
        let paths: Vec<Vec<usize>> = self.flows.values().map(|f| f.path.clone()).collect();
        let demands: Vec<Option<f64>> = self.flows.values().map(|f| f.demand_bps).collect();
        let caps: Vec<f64> = self.links.iter().map(|l| l.capacity_bps).collect();
        let rates = water_fill(&paths, &demands, &caps);
        for (f, r) in self.flows.values_mut().zip(rates) {
            f.rate = if r.is_infinite() {
                Rate::Unbounded
            } else {
                Rate::Bps(r.max(0.0).floor() as u64)
            };
        }
        self.dirty = false;
        debug_assert_eq!(self.check_capacity(), Ok(()));
    }

    /// Time until the earliest open flow completes under current rates.
    pub fn next_completion(&self) -> Option<SimDuration> {
        self.flows
            .values()
            .filter_map(|f| f.time_to_finish())
            .min()
            .map(SimDuration::from_micros)
    }

    /// Moves every flow forward by `dt` at its current rate and removes the
    /// ones that reach zero. Completed flows come back in id order.
    pub fn advance(&mut self, dt: SimDuration) -> Vec<Flow<T>> {
        debug_assert!(
            dt.is_zero() || !self.dirty,
            "advance with a stale allocation"
        );
        let dt = dt.as_micros() as u128;
        let mut done = Vec::new();
        for f in self.flows.values_mut() {
            let moved = match f.rate {
                Rate::Unbounded => f.remaining,
                Rate::Bps(r) => (r as u128 * dt).min(f.remaining),
            };
            if moved > 0 {
                f.remaining -= moved;
                for &l in &f.path {
                    self.link_work[l] += moved;
                }
            }
            if f.remaining == 0 {
                done.push(f.id);
            }
        }
        if !done.is_empty() {
            self.dirty = true;
        }
        done.into_iter()
            .filter_map(|id| self.flows.remove(&id))
            .collect()
    }

    pub fn flow(&self, id: FlowId) -> Option<&Flow<T>> {
        self.flows.get(&id)
    }

    pub fn flows(&self) -> impl Iterator<Item = &Flow<T>> {
        self.flows.values()
    }

    pub fn is_idle(&self) -> bool {
        self.flows.is_empty()
    }

    /// Cumulative link work in internal units (`bytes * 8e6`).
    pub fn link_work(&self, link: usize) -> u128 {
        self.link_work[link]
    }

    pub fn link_bytes(&self, link: usize) -> f64 {
        self.link_work[link] as f64 / UNITS_PER_BYTE as f64
    }

    /// Sum of current allocations on a link.
    pub fn link_load_bps(&self, link: usize) -> u64 {
        self.flows
            .values()
            .filter(|f| f.path.contains(&link))
            .map(|f| match f.rate {
                Rate::Bps(r) => r,
                Rate::Unbounded => 0,
            })
            .sum()
    }

    pub fn check_capacity(&self) -> Result<(), NetworkError> {
        for (i, l) in self.links.iter().enumerate() {
            let load = self.link_load_bps(i);
            if load as f64 > l.capacity_bps {
                return Err(NetworkError::CapacityExceeded {
                    link: l.id.clone(),
                    load_bps: load,
                    capacity_bps: l.capacity_bps,
                });
            }
        }
        Ok(())
    }
}
