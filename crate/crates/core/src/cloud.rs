//! IaaS sites, the image repository, and the VM lifecycle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{FlowId, ImageId, JobId, LinkId, SiteId, VmId};
use crate::kernel::{FlowNetwork, NetworkError, SimDuration, SimTime};
use crate::sim::FlowPurpose;

pub const DEFAULT_IMAGE_BYTES: u64 = 16_000_000_000;
pub const DEFAULT_IMAGE_RAM_MB: u32 = 1024;

fn default_image_bytes() -> u64 {
    DEFAULT_IMAGE_BYTES
}

fn default_ram_mb() -> u32 {
    DEFAULT_IMAGE_RAM_MB
}

/// A user-prepared VM image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmImageSpec {
    pub id: ImageId,
    #[serde(default = "default_image_bytes")]
    pub size_bytes: u64,
    #[serde(default = "default_ram_mb")]
    pub ram_mb: u32,
    #[serde(default)]
    pub software_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProvisioningFlavor {
    NimbusLike,
    Ec2Like,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudSite {
    pub id: SiteId,
    pub slot_capacity: u32,
    pub uplink: LinkId,
    pub downlink: LinkId,
    pub image_cache: BTreeSet<ImageId>,
    pub flavor: ProvisioningFlavor,
}

/// HTTP image server. Its egress link models the server throughput cap.
#[derive(Debug, Clone, PartialEq)]
pub struct RepositorySite {
    pub id: SiteId,
    /// Cloud site the server sits in, if any.
    pub location: Option<SiteId>,
    pub egress: LinkId,
    pub server_throughput_bps: f64,
    pub hosted_images: BTreeSet<ImageId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VmState {
    Propagating,
    Booting,
    Running,
    Error,
    ShuttingDown,
    Terminated,
}

impl VmState {
    pub const ALL: [VmState; 6] = [
        VmState::Propagating,
        VmState::Booting,
        VmState::Running,
        VmState::Error,
        VmState::ShuttingDown,
        VmState::Terminated,
    ];

    pub fn can_transition_to(self, next: VmState) -> bool {
        use VmState::*;
        matches!(
            (self, next),
            (Propagating, Booting)
                | (Propagating, Error)
                | (Booting, Running)
                | (Booting, Error)
                | (Running, ShuttingDown)
                | (Running, Error)
                | (Error, Terminated)
                | (ShuttingDown, Terminated)
        )
    }

    /// States a freshly requested VM may start in.
    pub fn is_initial(self) -> bool {
        matches!(self, VmState::Propagating | VmState::Booting)
    }

    /// Anything short of Terminated holds a slot.
    pub fn holds_slot(self) -> bool {
        self != VmState::Terminated
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VmState::Propagating => "Propagating",
            VmState::Booting => "Booting",
            VmState::Running => "Running",
            VmState::Error => "Error",
            VmState::ShuttingDown => "ShuttingDown",
            VmState::Terminated => "Terminated",
        }
    }

    pub fn parse(s: &str) -> Option<VmState> {
        VmState::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for VmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ErrorCause {
    /// Boot failed inside the site's IaaS stack.
    NimbusBootBug,
    /// A running VM was destroyed from outside the scheduler.
    ExternalDestroy,
    Other(String),
}

impl fmt::Display for ErrorCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorCause::NimbusBootBug => f.write_str("nimbus-boot-bug"),
            ErrorCause::ExternalDestroy => f.write_str("external-destroy"),
            ErrorCause::Other(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmInstance {
    pub id: VmId,
    pub image: ImageId,
    pub site: SiteId,
    pub state: VmState,
    pub state_entered_at: SimTime,
    pub bound_job: Option<JobId>,
    pub requested_at: SimTime,
    pub first_running_at: Option<SimTime>,
    pub error_cause: Option<ErrorCause>,
    /// Shutdown requested while still starting up; applied once Running.
    pub shutdown_pending: bool,
    /// Whether this VM needed an image transfer.
    pub propagated: bool,
}

impl VmInstance {
    pub fn is_idle(&self) -> bool {
        self.state == VmState::Running && self.bound_job.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudSettings {
    pub boot_delay: SimDuration,
    pub teardown_delay: SimDuration,
    /// Keep a transferred image at the site so later boots skip the transfer.
    pub single_copy_cache: bool,
}

impl Default for CloudSettings {
    fn default() -> Self {
        CloudSettings {
            boot_delay: SimDuration::from_secs(120),
            teardown_delay: SimDuration::from_secs(30),
            single_copy_cache: false,
        }
    }
}

/// One edge of a VM's lifecycle. `from == None` marks creation.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub at: SimTime,
    pub vm: VmId,
    pub site: SiteId,
    pub from: Option<VmState>,
    pub to: VmState,
    pub cause: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error("site {0} has no free slot")]
    NoFreeSlot(SiteId),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("unknown site {0}")]
    UnknownSite(SiteId),
    #[error("unknown vm {0}")]
    UnknownVm(VmId),
    #[error("{op} not allowed for {vm} in state {state}")]
    IllegalState {
        vm: VmId,
        state: VmState,
        op: &'static str,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootTicket {
    pub vm: VmId,
    /// Set when the image was already local and the VM went straight to
    /// Booting; the caller schedules boot completion at this time.
    pub boot_ready_at: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShutdownAck {
    TearingDown {
        done_at: SimTime,
    },
    Terminated,
    /// VM still starting; the shutdown is applied once it reaches Running.
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootOutcome {
    Running,
    /// Reached Running with a deferred shutdown, now tearing down.
    RunningThenShutdown {
        done_at: SimTime,
    },
    Error,
    /// The VM left Booting before the timer fired.
    Stale,
}

#[derive(Debug, Clone)]
struct Propagation {
    site: SiteId,
    image: ImageId,
    waiters: Vec<VmId>,
}

#[derive(Debug, Clone)]
pub struct CloudModel {
    sites: Vec<CloudSite>,
    site_index: BTreeMap<SiteId, usize>,
    repository: RepositorySite,
    images: BTreeMap<ImageId, VmImageSpec>,
    settings: CloudSettings,
    vms: BTreeMap<VmId, VmInstance>,
    next_vm: u64,
    propagations: BTreeMap<FlowId, Propagation>,
    shared: BTreeMap<(SiteId, ImageId), FlowId>,
    transitions: Vec<Transition>,
    propagations_started: u64,
    propagation_bytes: u128,
}

impl CloudModel {
    pub fn new(
        sites: Vec<CloudSite>,
        repository: RepositorySite,
        images: Vec<VmImageSpec>,
        settings: CloudSettings,
    ) -> Self {
        let site_index = sites
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        CloudModel {
            sites,
            site_index,
            repository,
            images: images.into_iter().map(|i| (i.id.clone(), i)).collect(),
            settings,
            vms: BTreeMap::new(),
            next_vm: 1,
            propagations: BTreeMap::new(),
            shared: BTreeMap::new(),
            transitions: Vec::new(),
            propagations_started: 0,
            propagation_bytes: 0,
        }
    }

    pub fn settings(&self) -> &CloudSettings {
        &self.settings
    }

    pub fn sites(&self) -> &[CloudSite] {
        &self.sites
    }

    pub fn site(&self, id: &SiteId) -> Option<&CloudSite> {
        self.site_index.get(id).map(|&i| &self.sites[i])
    }

    pub fn repository(&self) -> &RepositorySite {
        &self.repository
    }

    pub fn image(&self, id: &ImageId) -> Option<&VmImageSpec> {
        self.images.get(id)
    }

    pub fn vm(&self, id: VmId) -> Option<&VmInstance> {
        self.vms.get(&id)
    }

    /// Every VM ever created, in id order, including terminated ones.
    pub fn vms(&self) -> impl Iterator<Item = &VmInstance> {
        self.vms.values()
    }

    pub fn live_vms(&self) -> impl Iterator<Item = &VmInstance> {
        self.vms.values().filter(|v| v.state != VmState::Terminated)
    }

    pub fn occupied_slots(&self, site: &SiteId) -> u32 {
        self.live_vms().filter(|v| &v.site == site).count() as u32
    }

    pub fn free_slots(&self, site: &SiteId) -> u32 {
        self.site(site)
            .map(|s| s.slot_capacity.saturating_sub(self.occupied_slots(site)))
            .unwrap_or(0)
    }

    pub fn total_slots(&self) -> u32 {
        self.sites.iter().map(|s| s.slot_capacity).sum()
    }

    pub fn propagations_started(&self) -> u64 {
        self.propagations_started
    }

    /// Bytes the repository was asked to send (completed or not).
    pub fn propagation_bytes_requested(&self) -> u128 {
        self.propagation_bytes
    }

    pub fn take_transitions(&mut self) -> Vec<Transition> {
        std::mem::take(&mut self.transitions)
    }

    pub fn cache_lookup(&self, site: &SiteId, image: &ImageId) -> bool {
        self.site(site)
            .is_some_and(|s| s.image_cache.contains(image))
    }

    /// Links an image transfer from the repository to `site` crosses.
    /// Traffic that stays inside the repository's own site only pays the
    /// server cap.
    pub fn propagation_path(&self, site: &SiteId) -> Vec<LinkId> {
        let mut path = vec![self.repository.egress.clone()];
        if self.repository.location.as_ref() == Some(site) {
            return path;
        }
        if let Some(loc) = self.repository.location.as_ref().and_then(|l| self.site(l)) {
            path.push(loc.uplink.clone());
        }
        if let Some(dst) = self.site(site) {
            path.push(dst.downlink.clone());
        }
        path
    }

    fn record(
        &mut self,
        at: SimTime,
        vm: VmId,
        from: Option<VmState>,
        to: VmState,
        cause: Option<String>,
    ) {
        let site = self.vms[&vm].site.clone();
        self.transitions.push(Transition {
            at,
            vm,
            site: site.clone(),
            from,
            to,
            cause,
        });
        debug_assert!(
            self.occupied_slots(&site) <= self.site(&site).map_or(0, |s| s.slot_capacity),
            "slot overflow at {site}"
        );
    }

    fn set_state(&mut self, vm: VmId, to: VmState, now: SimTime, cause: Option<String>) {
        let inst = self.vms.get_mut(&vm).expect("known vm");
        let from = inst.state;
        debug_assert!(from.can_transition_to(to), "{from} -> {to}");
        inst.state = to;
        inst.state_entered_at = now;
        if to == VmState::Running && inst.first_running_at.is_none() {
            inst.first_running_at = Some(now);
        }
        self.record(now, vm, Some(from), to, cause);
    }

    /// Asks `site` to start a VM from `image`. If the image is not cached
    /// there, a repository transfer is opened in `net` first.
    pub fn request_boot(
        &mut self,
        image: &ImageId,
        site: &SiteId,
        now: SimTime,
        net: &mut FlowNetwork<FlowPurpose>,
    ) -> Result<BootTicket, CloudError> {
        if self.site(site).is_none() {
            return Err(CloudError::UnknownSite(site.clone()));
        }
        let spec = match self.images.get(image) {
            Some(s)
                if self.repository.hosted_images.contains(image)
                    || self.cache_lookup(site, image) =>
            {
                s.clone()
            }
            _ => return Err(CloudError::UnknownImage(image.clone())),
        };
        if self.free_slots(site) == 0 {
            return Err(CloudError::NoFreeSlot(site.clone()));
        }

        let cached = self.cache_lookup(site, image);
        let key = (site.clone(), image.clone());
        let join = if !cached && self.settings.single_copy_cache {
            self.shared.get(&key).copied()
        } else {
            None
        };
        let flow = match (cached, join) {
            (true, _) => None,
            (false, Some(f)) => Some(f),
            (false, None) => {
                let path = self.propagation_path(site);
                let f = net.open(
                    &path,
                    None,
                    spec.size_bytes,
                    FlowPurpose::Propagation {
                        site: site.clone(),
                        image: image.clone(),
                    },
                )?;
                self.propagations_started += 1;
                self.propagation_bytes += spec.size_bytes as u128;
                self.propagations.insert(
                    f,
                    Propagation {
                        site: site.clone(),
                        image: image.clone(),
                        waiters: Vec::new(),
                    },
                );
                if self.settings.single_copy_cache {
                    self.shared.insert(key, f);
                }
                Some(f)
            }
        };

        let id = VmId(self.next_vm);
        self.next_vm += 1;
        let state = if cached {
            VmState::Booting
        } else {
            VmState::Propagating
        };
        self.vms.insert(
            id,
            VmInstance {
                id,
                image: image.clone(),
                site: site.clone(),
                state,
                state_entered_at: now,
                bound_job: None,
                requested_at: now,
                first_running_at: None,
                error_cause: None,
                shutdown_pending: false,
                propagated: !cached,
            },
        );
        if let Some(f) = flow {
            self.propagations
                .get_mut(&f)
                .expect("open propagation")
                .waiters
                .push(id);
        }
        self.record(now, id, None, state, None);
        Ok(BootTicket {
            vm: id,
            boot_ready_at: cached.then_some(now + self.settings.boot_delay),
        })
    }

    /// Handles the end of an image transfer. Returns the VMs that moved to
    /// Booting with the time each finishes booting.
    pub fn propagation_complete(&mut self, flow: FlowId, now: SimTime) -> Vec<(VmId, SimTime)> {
        let Some(p) = self.propagations.remove(&flow) else {
            return Vec::new();
        };
        if self.settings.single_copy_cache {
            self.shared.remove(&(p.site.clone(), p.image.clone()));
            if let Some(&i) = self.site_index.get(&p.site) {
                self.sites[i].image_cache.insert(p.image.clone());
            }
        }
        let ready = now + self.settings.boot_delay;
        let mut booted = Vec::new();
        for vm in p.waiters {
            if self
                .vms
                .get(&vm)
                .is_some_and(|v| v.state == VmState::Propagating)
            {
                self.set_state(vm, VmState::Booting, now, None);
                booted.push((vm, ready));
            }
        }
        booted
    }

    /// Ends the Booting phase. `failed` comes from fault injection.
    pub fn boot_complete(&mut self, vm: VmId, now: SimTime, failed: bool) -> BootOutcome {
        let Some(inst) = self.vms.get(&vm) else {
            return BootOutcome::Stale;
        };
        if inst.state != VmState::Booting {
            return BootOutcome::Stale;
        }
        if failed {
            let cause = ErrorCause::NimbusBootBug;
            self.vms.get_mut(&vm).unwrap().error_cause = Some(cause.clone());
            self.set_state(vm, VmState::Error, now, Some(cause.to_string()));
            return BootOutcome::Error;
        }
        self.set_state(vm, VmState::Running, now, None);
        if self.vms[&vm].shutdown_pending {
            self.vms.get_mut(&vm).unwrap().shutdown_pending = false;
            let done_at = now + self.settings.teardown_delay;
            self.set_state(
                vm,
                VmState::ShuttingDown,
                now,
                Some("deferred-shutdown".into()),
            );
            return BootOutcome::RunningThenShutdown { done_at };
        }
        BootOutcome::Running
    }

    pub fn shutdown_vm(&mut self, vm: VmId, now: SimTime) -> Result<ShutdownAck, CloudError> {
        let inst = self.vms.get(&vm).ok_or(CloudError::UnknownVm(vm))?;
        match (inst.state, inst.bound_job.is_some()) {
            (VmState::Running, false) => {
                self.set_state(vm, VmState::ShuttingDown, now, None);
                Ok(ShutdownAck::TearingDown {
                    done_at: now + self.settings.teardown_delay,
                })
            }
            (VmState::Error, _) => {
                self.set_state(vm, VmState::Terminated, now, None);
                Ok(ShutdownAck::Terminated)
            }
            (VmState::Propagating | VmState::Booting, _) => {
                self.vms.get_mut(&vm).unwrap().shutdown_pending = true;
                Ok(ShutdownAck::Deferred)
            }
            (state, _) => Err(CloudError::IllegalState {
                vm,
                state,
                op: "shutdown",
            }),
        }
    }

    pub fn teardown_complete(&mut self, vm: VmId, now: SimTime) -> bool {
        if self
            .vms
            .get(&vm)
            .is_some_and(|v| v.state == VmState::ShuttingDown)
        {
            self.set_state(vm, VmState::Terminated, now, None);
            true
        } else {
            false
        }
    }

    /// Puts a VM into Error. Returns the job it was running, which the caller
    /// must hand back to the queue. An in-flight image transfer nobody else
    /// waits on is cancelled.
    pub fn mark_error(
        &mut self,
        vm: VmId,
        cause: ErrorCause,
        now: SimTime,
        net: &mut FlowNetwork<FlowPurpose>,
    ) -> Result<Option<JobId>, CloudError> {
        let inst = self.vms.get(&vm).ok_or(CloudError::UnknownVm(vm))?;
        match inst.state {
            VmState::Error => return Ok(None),
            VmState::ShuttingDown | VmState::Terminated => {
                return Err(CloudError::IllegalState {
                    vm,
                    state: inst.state,
                    op: "mark_error",
                })
            }
            VmState::Propagating => {
                let owner = self
                    .propagations
                    .iter()
                    .find(|(_, p)| p.waiters.contains(&vm))
                    .map(|(&f, _)| f);
                if let Some(f) = owner {
                    let p = self.propagations.get_mut(&f).unwrap();
                    p.waiters.retain(|&w| w != vm);
                    if p.waiters.is_empty() {
                        let p = self.propagations.remove(&f).unwrap();
                        self.shared.remove(&(p.site, p.image));
                        net.close(f);
                    }
                }
            }
            VmState::Booting | VmState::Running => {}
        }
        let inst = self.vms.get_mut(&vm).unwrap();
        let job = inst.bound_job.take();
        inst.error_cause = Some(cause.clone());
        inst.shutdown_pending = false;
        self.set_state(vm, VmState::Error, now, Some(cause.to_string()));
        Ok(job)
    }

    pub fn bind(&mut self, vm: VmId, job: JobId) -> Result<(), CloudError> {
        let inst = self.vms.get_mut(&vm).ok_or(CloudError::UnknownVm(vm))?;
        if !inst.is_idle() {
            return Err(CloudError::IllegalState {
                vm,
                state: inst.state,
                op: "bind",
            });
        }
        inst.bound_job = Some(job);
        Ok(())
    }

    pub fn unbind(&mut self, vm: VmId) -> Option<JobId> {
        self.vms.get_mut(&vm).and_then(|v| v.bound_job.take())
    }

    /// Lowest-id Running VM at a site.
    pub fn lowest_running(&self, site: &SiteId) -> Option<VmId> {
        self.vms
            .values()
            .find(|v| &v.site == site && v.state == VmState::Running)
            .map(|v| v.id)
    }

    pub fn idle_vms(&self) -> impl Iterator<Item = &VmInstance> {
        self.vms.values().filter(|v| v.is_idle())
    }
}
