//! Cloud Scheduler: watches the queue, boots matching VMs on clouds with free
//! slots, retires idle VMs, and replaces errored ones.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{CloudModel, VmState};
use crate::ids::{ImageId, SiteId, VmId};
use crate::jobs::JobQueue;
use crate::kernel::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    #[default]
    RoundRobin,
    FirstFit,
}

fn default_tick() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerPolicy {
    #[serde(default = "default_tick")]
    pub tick_interval_s: f64,
    #[serde(default)]
    pub placement: Placement,
    /// Unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_boots_per_tick: Option<u32>,
}

impl Default for SchedulerPolicy {
    fn default() -> Self {
        SchedulerPolicy {
            tick_interval_s: default_tick(),
            placement: Placement::RoundRobin,
            max_boots_per_tick: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmView {
    pub id: VmId,
    pub image: ImageId,
    pub site: SiteId,
    pub state: VmState,
    pub bound: bool,
    /// False while the scheduler cannot talk to the VM's site.
    pub reachable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteView {
    pub id: SiteId,
    pub free_slots: u32,
    pub reachable: bool,
}

/// What the scheduler believes at one tick.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulerView {
    pub now: SimTime,
    pub queued: BTreeMap<ImageId, u32>,
    pub running: BTreeMap<ImageId, u32>,
    /// In site declaration order.
    pub sites: Vec<SiteView>,
    /// Live (non-Terminated) VMs in id order.
    pub vms: Vec<VmView>,
}

impl SchedulerView {
    /// Exact picture of the ground state.
    pub fn observe(cloud: &CloudModel, jobs: &JobQueue, now: SimTime) -> Self {
        SchedulerView {
            now,
            queued: jobs.queued_by_image(now),
            running: jobs.running_by_image(),
            sites: cloud
                .sites()
                .iter()
                .map(|s| SiteView {
                    id: s.id.clone(),
                    free_slots: cloud.free_slots(&s.id),
                    reachable: true,
                })
                .collect(),
            vms: cloud
                .live_vms()
                .map(|v| VmView {
                    id: v.id,
                    image: v.image.clone(),
                    site: v.site.clone(),
                    state: v.state,
                    bound: v.bound_job.is_some(),
                    reachable: true,
                })
                .collect(),
        }
    }

    pub fn count_state(&self, state: VmState) -> usize {
        self.vms.iter().filter(|v| v.state == state).count()
    }
}

/// Produces the view the scheduler actually gets. Outside a blackout this is
/// the truth; VMs at an unreachable site report Error and the site offers no
/// free slots, while the ground state is left alone.
pub fn reconcile(truth: &SchedulerView, unreachable: &BTreeSet<SiteId>) -> SchedulerView {
    if unreachable.is_empty() {
        return truth.clone();
    }
    let mut view = truth.clone();
    for s in &mut view.sites {
        if unreachable.contains(&s.id) {
            s.free_slots = 0;
            s.reachable = false;
        }
    }
    for v in &mut view.vms {
        if unreachable.contains(&v.site) {
            v.state = VmState::Error;
            v.reachable = false;
        }
    }
    view
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Boot {
        image: ImageId,
        site: SiteId,
    },
    Shutdown(VmId),
    /// Terminate an errored VM. Any replacement comes as a separate Boot.
    KillAndReplace(VmId),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("no reachable site has a free slot for image {0}")]
    NoCapacity(ImageId),
}

#[derive(Debug, Clone)]
pub struct CloudScheduler {
    policy: SchedulerPolicy,
    cursors: BTreeMap<ImageId, usize>,
}

impl CloudScheduler {
    pub fn new(policy: SchedulerPolicy) -> Self {
        CloudScheduler {
            policy,
            cursors: BTreeMap::new(),
        }
    }

    pub fn policy(&self) -> &SchedulerPolicy {
        &self.policy
    }

    /// Picks a site for one boot of `image` and advances that image's cursor.
    /// `sites` is the caller's planning copy of per-site free slots.
    pub fn select_site(
        &mut self,
        image: &ImageId,
        sites: &[SiteView],
    ) -> Result<SiteId, SchedulerError> {
        let n = sites.len();
        let usable = |s: &SiteView| s.reachable && s.free_slots > 0;
        match self.policy.placement {
            Placement::FirstFit => sites
                .iter()
                .find(|s| usable(s))
                .map(|s| s.id.clone())
                .ok_or_else(|| SchedulerError::NoCapacity(image.clone())),
            Placement::RoundRobin => {
                let cursor = self.cursors.get(image).copied().unwrap_or(0) % n.max(1);
                for step in 0..n {
                    let i = (cursor + step) % n;
                    if usable(&sites[i]) {
                        self.cursors.insert(image.clone(), (i + 1) % n);
                        return Ok(sites[i].id.clone());
                    }
                }
                Err(SchedulerError::NoCapacity(image.clone()))
            }
        }
    }

    /// One scan of the queue. Actions come out in execution order: kills
    /// first (freeing slots), then idle shutdowns, then boots.
    pub fn tick(&mut self, view: &SchedulerView) -> Vec<Action> {
        let mut actions = Vec::new();
        let mut plan = view.sites.clone();

        for v in view
            .vms
            .iter()
            .filter(|v| v.state == VmState::Error && v.reachable)
        {
            actions.push(Action::KillAndReplace(v.id));
            if let Some(s) = plan.iter_mut().find(|s| s.id == v.site) {
                s.free_slots += 1;
            }
        }

        for v in &view.vms {
            let idle = v.state == VmState::Running && !v.bound && v.reachable;
            if idle && view.queued.get(&v.image).copied().unwrap_or(0) == 0 {
                actions.push(Action::Shutdown(v.id));
            }
        }

        let mut budget = self.policy.max_boots_per_tick.unwrap_or(u32::MAX);
        let images: BTreeSet<&ImageId> = view.queued.keys().chain(view.running.keys()).collect();
        for image in images {
            let needed = view.queued.get(image).copied().unwrap_or(0)
                + view.running.get(image).copied().unwrap_or(0);
            // Unreachable VMs still count: they cannot be replaced anyway.
            let supply = view
                .vms
                .iter()
                .filter(|v| &v.image == image)
                .filter(|v| {
                    !v.reachable
                        || matches!(
                            v.state,
                            VmState::Propagating | VmState::Booting | VmState::Running
                        )
                })
                .count() as u32;
            let mut deficit = needed.saturating_sub(supply);
            while deficit > 0 && budget > 0 {
                let Ok(site) = self.select_site(image, &plan) else {
                    break;
                };
                if let Some(s) = plan.iter_mut().find(|s| s.id == site) {
                    s.free_slots -= 1;
                }
                actions.push(Action::Boot {
                    image: image.clone(),
                    site,
                });
                deficit -= 1;
                budget -= 1;
            }
        }
        actions
    }
}
