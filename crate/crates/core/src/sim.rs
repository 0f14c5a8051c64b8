//! The simulation driver: one event loop over the kernel, the flow network,
//! the cloud, the job queue, the scheduler, and armed faults.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::cloud::{
    BootOutcome, CloudError, CloudModel, CloudSettings, CloudSite, ErrorCause, RepositorySite,
    ShutdownAck, VmState,
};
use crate::faults::{FaultError, FaultHandle, FaultInjector, FaultKind, FaultSpec};
use crate::ids::{FlowId, ImageId, JobId, LinkId, SiteId, VmId};
use crate::jobs::{JobError, JobPhase, JobQueue, JobSpec, JobState};
use crate::kernel::{EventHandle, Flow, FlowNetwork, Kernel, NetworkError, SimDuration, SimTime};
use crate::metrics::{MetricsFrame, MetricsRecorder};
use crate::scenario::ScenarioConfig;
use crate::scheduler::{reconcile, Action, CloudScheduler, SchedulerView};

/// What a transfer in the flow network is for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlowPurpose {
    Propagation { site: SiteId, image: ImageId },
    Calibration(JobId),
    Stream(JobId),
    Output(JobId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultAction {
    Kill,
    BlackoutStart,
    BlackoutEnd,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    /// The earliest open transfer finishes now.
    TransferComplete,
    VmBootComplete(VmId),
    VmTeardownComplete(VmId),
    SchedulerTick,
    JobSubmit(JobId),
    FaultTrigger {
        handle: FaultHandle,
        action: FaultAction,
    },
    MetricsSample,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error(transparent)]
    Fault(#[from] FaultError),
}

/// Where a transfer starts and which local links it leaves through.
#[derive(Debug, Clone)]
struct Endpoint {
    egress: Option<LinkId>,
    location: Option<SiteId>,
    bytes: u64,
}

/// Running counters reported at the end of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunCounters {
    pub vm_boots: u64,
    pub boot_errors: u64,
    pub vm_kills: u64,
    pub requeues: u64,
    pub rejected_actions: u64,
}

pub struct Simulation {
    kernel: Kernel<Event>,
    net: FlowNetwork<FlowPurpose>,
    cloud: CloudModel,
    jobs: JobQueue,
    scheduler: CloudScheduler,
    faults: FaultInjector,
    recorder: MetricsRecorder,
    log: Vec<String>,
    horizon: SimTime,
    tick_interval: SimDuration,
    sample_interval: SimDuration,
    flow_clock: SimTime,
    wake: Option<EventHandle>,
    job_flow: BTreeMap<JobId, FlowId>,
    blackouts: BTreeMap<SiteId, u32>,
    pending_jobs: Vec<JobSpec>,
    storage: Endpoint,
    calibration: Option<Endpoint>,
    user_location: Option<SiteId>,
    user_ingress: Option<LinkId>,
    counters: RunCounters,
    finished: bool,
    quiesced: bool,
}

impl Simulation {
    /// Builds the world from a validated scenario and arms its faults.
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, SimError> {
        let net = FlowNetwork::new(cfg.links.clone())?;
        let sites = cfg
            .clouds
            .iter()
            .map(|c| CloudSite {
                id: c.id.clone(),
                slot_capacity: c.slots,
                uplink: c.uplink.clone(),
                downlink: c.downlink.clone(),
                image_cache: c.preseeded_images.iter().cloned().collect(),
                flavor: c.flavor,
            })
            .collect();
        let server_throughput_bps = cfg
            .link(&cfg.repository.egress)
            .map_or(0.0, |l| l.capacity_bps);
        let repository = RepositorySite {
            id: cfg.repository.id.clone(),
            location: cfg.repository.location.clone(),
            egress: cfg.repository.egress.clone(),
            server_throughput_bps,
            hosted_images: cfg.repository.images.iter().cloned().collect(),
        };
        let settings = CloudSettings {
            boot_delay: SimDuration::from_secs_f64(cfg.cloud.boot_delay_s),
            teardown_delay: SimDuration::from_secs_f64(cfg.cloud.teardown_delay_s),
            single_copy_cache: cfg.cloud.single_copy_cache,
        };
        let cloud = CloudModel::new(sites, repository, cfg.images.clone(), settings);
        let jobs = JobQueue::new(cfg.samples.clone(), cfg.images.iter().map(|i| i.id.clone()));
        let recorder = MetricsRecorder::new(cfg.links.iter().map(|l| l.id.clone()).collect());

        let mut sim = Simulation {
            kernel: Kernel::new(),
            net,
            cloud,
            jobs,
            scheduler: CloudScheduler::new(cfg.scheduler.clone()),
            faults: FaultInjector::new(cfg.seed),
            recorder,
            log: Vec::new(),
            horizon: SimTime::from_secs_f64(cfg.horizon_s),
            tick_interval: SimDuration::from_secs_f64(cfg.scheduler.tick_interval_s),
            sample_interval: SimDuration::from_secs_f64(cfg.sample_interval_s),
            flow_clock: SimTime::ZERO,
            wake: None,
            job_flow: BTreeMap::new(),
            blackouts: BTreeMap::new(),
            pending_jobs: Vec::new(),
            storage: Endpoint {
                egress: Some(cfg.storage.egress.clone()),
                location: cfg.storage.location.clone(),
                bytes: 0,
            },
            calibration: cfg.calibration.as_ref().map(|c| Endpoint {
                egress: Some(c.egress.clone()),
                location: c.location.clone(),
                bytes: c.fetch_bytes,
            }),
            user_location: cfg.user_storage.location.clone(),
            user_ingress: cfg.user_storage.ingress.clone(),
            counters: RunCounters::default(),
            finished: false,
            quiesced: false,
        };

        let mut specs = cfg.jobs();
        specs.sort_by_key(|j| j.submit_at);
        for spec in &specs {
            sim.kernel
                .schedule(spec.submit_at, Event::JobSubmit(spec.id.clone()))
                .expect("submit times are not in the past");
        }
        sim.pending_jobs = specs;
        sim.kernel
            .schedule_in(SimDuration::ZERO, Event::SchedulerTick);
        sim.kernel
            .schedule_in(SimDuration::ZERO, Event::MetricsSample);
        for f in &cfg.faults {
            sim.arm(f.clone())?;
        }
        Ok(sim)
    }

    pub fn now(&self) -> SimTime {
        self.kernel.now()
    }

    pub fn horizon(&self) -> SimTime {
        self.horizon
    }

    pub fn cloud(&self) -> &CloudModel {
        &self.cloud
    }

    pub fn jobs(&self) -> &JobQueue {
        &self.jobs
    }

    pub fn network(&self) -> &FlowNetwork<FlowPurpose> {
        &self.net
    }

    pub fn faults(&self) -> &FaultInjector {
        &self.faults
    }

    pub fn frames(&self) -> &[MetricsFrame] {
        self.recorder.frames()
    }

    pub fn recorder(&self) -> &MetricsRecorder {
        &self.recorder
    }

    pub fn event_log(&self) -> &[String] {
        &self.log
    }

    pub fn counters(&self) -> &RunCounters {
        &self.counters
    }

    /// True once every job is done and the clouds are empty, or the horizon
    /// passed.
    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// True when the run stopped early because the workload was done.
    pub fn quiesced(&self) -> bool {
        self.quiesced
    }

    pub fn unreachable_sites(&self) -> BTreeSet<SiteId> {
        self.blackouts
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// Arms a fault at the current time. Windows that already started are
    /// clipped to now.
    pub fn arm(&mut self, spec: FaultSpec) -> Result<FaultHandle, SimError> {
        let known: BTreeSet<SiteId> = self
            .cloud
            .sites()
            .iter()
            .map(|s| s.id.clone())
            .chain(std::iter::once(self.cloud.repository().id.clone()))
            .collect();
        let kind = spec.kind.clone();
        let site = spec.site.clone();
        let h = self.faults.arm(spec, |s| known.contains(s))?;
        let now = self.now();
        let at = |s: f64| SimTime::from_secs_f64(s).max(now);
        match kind {
            FaultKind::PeriodicKill {
                period_s,
                first_at_s,
                ..
            } => {
                let mut first = SimTime::from_secs_f64(first_at_s);
                let period = SimDuration::from_secs_f64(period_s);
                while first < now {
                    first += period;
                }
                self.schedule_fault(first, h, FaultAction::Kill);
            }
            FaultKind::CommBlackout { start_s, end_s } => {
                self.schedule_fault(at(start_s), h, FaultAction::BlackoutStart);
                self.schedule_fault(at(end_s), h, FaultAction::BlackoutEnd);
            }
            FaultKind::BootError { .. } | FaultKind::MonitorGap { .. } => {}
        }
        self.log
            .push(format!("{} fault {} armed {}", now, site, h.0));
        Ok(h)
    }

    /// Stops a fault. An active blackout ends immediately.
    pub fn disarm(&mut self, h: FaultHandle) -> Result<(), SimError> {
        let before = self.faults.disarm(h)?;
        if before.blackout_on {
            self.end_blackout(&before.spec.site);
        }
        self.log.push(format!(
            "{} fault {} disarmed {}",
            self.now(),
            before.spec.site,
            h.0
        ));
        Ok(())
    }

    fn schedule_fault(&mut self, at: SimTime, handle: FaultHandle, action: FaultAction) {
        self.kernel
            .schedule(at, Event::FaultTrigger { handle, action })
            .expect("fault times are clipped to now");
    }

    /// Runs until the horizon or until the workload is done.
    pub fn run(&mut self) -> Result<(), SimError> {
        self.run_until(self.horizon)
    }

    /// Fires every event up to `t` (capped at the horizon).
    pub fn run_until(&mut self, t: SimTime) -> Result<(), SimError> {
        let until = t.min(self.horizon);
        while !self.finished {
            let Some(ev) = self.kernel.pop_due(until) else {
                break;
            };
            self.advance_flows(ev.fire_at)?;
            self.handle(ev.kind)?;
            self.reflow();
            self.drain_transitions();
        }
        if until >= self.horizon && !self.finished {
            self.advance_flows(self.horizon)?;
            self.reflow();
            self.drain_transitions();
            self.finished = true;
        }
        Ok(())
    }

    fn advance_flows(&mut self, to: SimTime) -> Result<(), SimError> {
        // A zero step still completes unbounded and empty transfers.
        if to < self.flow_clock {
            return Ok(());
        }
        let dt = to.since(self.flow_clock);
        self.flow_clock = to;
        let streams: Vec<(JobId, f64)> = self
            .net
            .flows()
            .filter_map(|f| match &f.tag {
                FlowPurpose::Stream(j) => Some((j.clone(), f.allocated_bps())),
                _ => None,
            })
            .collect();
        for (job, bps) in streams {
            self.jobs.progress(&job, dt, bps);
        }
        let done = self.net.advance(dt);
        for flow in done {
            self.transfer_done(flow)?;
        }
        Ok(())
    }

    /// Re-solves rates if needed and re-arms the wakeup for the next
    /// transfer completion.
    fn reflow(&mut self) {
        if self.net.needs_resolve() {
            self.net.resolve();
        }
        if let Some(h) = self.wake.take() {
            self.kernel.cancel(h);
        }
        if let Some(d) = self.net.next_completion() {
            self.wake = Some(self.kernel.schedule_in(d, Event::TransferComplete));
        }
    }

    fn drain_transitions(&mut self) {
        for t in self.cloud.take_transitions() {
            let from = t.from.map_or("-", |s| s.as_str());
            let mut line = format!("{} vm {} {} {} {}", t.at, t.vm, t.site, from, t.to);
            if let Some(c) = t.cause {
                line.push(' ');
                line.push_str(&c);
            }
            self.log.push(line);
        }
        for t in self.jobs.take_transitions() {
            let from = t.from.map_or_else(|| "-".to_string(), |s| s.to_string());
            let mut line = format!("{} job {} {} {}", t.at, t.job, from, t.to);
            if let Some(vm) = t.vm {
                line.push(' ');
                line.push_str(&vm.to_string());
            }
            self.log.push(line);
        }
    }

    fn handle(&mut self, ev: Event) -> Result<(), SimError> {
        match ev {
            Event::TransferComplete => self.wake = None,
            Event::VmBootComplete(vm) => self.boot_done(vm),
            Event::VmTeardownComplete(vm) => {
                let now = self.now();
                self.cloud.teardown_complete(vm, now);
            }
            Event::SchedulerTick => {
                self.tick()?;
                self.kernel
                    .schedule_in(self.tick_interval, Event::SchedulerTick);
            }
            Event::JobSubmit(id) => {
                if let Some(i) = self.pending_jobs.iter().position(|j| j.id == id) {
                    let spec = self.pending_jobs.swap_remove(i);
                    self.jobs.submit(spec)?;
                }
            }
            Event::FaultTrigger { handle, action } => self.fault_fired(handle, action)?,
            Event::MetricsSample => {
                self.sample();
                if self.quiescent() {
                    self.finished = true;
                    self.quiesced = true;
                } else {
                    self.kernel
                        .schedule_in(self.sample_interval, Event::MetricsSample);
                }
            }
        }
        Ok(())
    }

    fn quiescent(&self) -> bool {
        self.pending_jobs.is_empty()
            && self.jobs.all_completed()
            && self.cloud.live_vms().next().is_none()
            && self.net.is_idle()
    }

    fn sample(&mut self) {
        let now = self.now();
        if self.faults.monitor_gap_at(now) {
            return;
        }
        let view = reconcile(
            &SchedulerView::observe(&self.cloud, &self.jobs, now),
            &self.unreachable_sites(),
        );
        let vm_counts = [
            view.count_state(VmState::Propagating),
            view.count_state(VmState::Booting),
            view.count_state(VmState::Running),
            view.count_state(VmState::Error),
        ];
        let queued = self.jobs.count_state(now, JobState::Queued)
            + self.jobs.count_state(now, JobState::Requeued);
        let running = self.jobs.count_state(now, JobState::Running);
        let completed = self.jobs.completed();
        let work: Vec<u128> = (0..self.net.links().len())
            .map(|i| self.net.link_work(i))
            .collect();
        self.recorder
            .record(now, vm_counts, [queued, running, completed], &work);
    }

    fn boot_done(&mut self, vm: VmId) {
        let now = self.now();
        let Some(inst) = self.cloud.vm(vm) else {
            return;
        };
        if inst.state != VmState::Booting {
            return;
        }
        let site = inst.site.clone();
        let failed = self.faults.boot_fails(&site);
        match self.cloud.boot_complete(vm, now, failed) {
            BootOutcome::RunningThenShutdown { done_at } => {
                self.schedule_at(done_at, Event::VmTeardownComplete(vm));
            }
            BootOutcome::Error => self.counters.boot_errors += 1,
            BootOutcome::Running | BootOutcome::Stale => {}
        }
    }

    fn schedule_at(&mut self, at: SimTime, ev: Event) {
        self.kernel
            .schedule(at, ev)
            .expect("event time is not in the past");
    }

    fn tick(&mut self) -> Result<(), SimError> {
        let now = self.now();
        let unreachable = self.unreachable_sites();

        let idle: Vec<(VmId, ImageId)> = self
            .cloud
            .idle_vms()
            .filter(|v| !unreachable.contains(&v.site))
            .map(|v| (v.id, v.image.clone()))
            .collect();
        let bound = self
            .jobs
            .match_and_dispatch(now, idle.iter().map(|(v, i)| (*v, i)));
        for (job, vm) in bound {
            self.cloud.bind(vm, job.clone())?;
            self.start_job(&job, vm)?;
        }

        let view = reconcile(
            &SchedulerView::observe(&self.cloud, &self.jobs, now),
            &unreachable,
        );
        for action in self.scheduler.tick(&view) {
            self.execute(action);
        }
        Ok(())
    }

    /// Carries out one scheduler action. A command the cloud refuses is
    /// logged and dropped; the next tick sees the real state.
    fn execute(&mut self, action: Action) {
        let now = self.now();
        let result = match &action {
            Action::Boot { image, site } => self
                .cloud
                .request_boot(image, site, now, &mut self.net)
                .map(|ticket| {
                    self.counters.vm_boots += 1;
                    if let Some(at) = ticket.boot_ready_at {
                        self.schedule_at(at, Event::VmBootComplete(ticket.vm));
                    }
                }),
            Action::Shutdown(vm) | Action::KillAndReplace(vm) => {
                self.cloud.shutdown_vm(*vm, now).map(|ack| {
                    if let ShutdownAck::TearingDown { done_at } = ack {
                        self.schedule_at(done_at, Event::VmTeardownComplete(*vm));
                    }
                })
            }
        };
        if let Err(e) = result {
            self.counters.rejected_actions += 1;
            self.log.push(format!("{now} reject {action:?} {e}"));
        }
        // Propagation completion times can change with every new transfer.
        self.reflow();
    }

    fn fault_fired(&mut self, h: FaultHandle, action: FaultAction) -> Result<(), SimError> {
        let Some(f) = self.faults.get(h) else {
            return Ok(());
        };
        if !f.active {
            return Ok(());
        }
        let site = f.spec.site.clone();
        let kind = f.spec.kind.clone();
        let now = self.now();
        match action {
            FaultAction::Kill => {
                if let Some(vm) = self.cloud.lowest_running(&site) {
                    self.counters.vm_kills += 1;
                    self.fail_vm(vm, ErrorCause::ExternalDestroy)?;
                }
                if let FaultKind::PeriodicKill {
                    period_s, until_s, ..
                } = kind
                {
                    let next = now + SimDuration::from_secs_f64(period_s);
                    let last = until_s.map_or(self.horizon, SimTime::from_secs_f64);
                    if next <= last {
                        self.schedule_fault(next, h, FaultAction::Kill);
                    }
                }
            }
            FaultAction::BlackoutStart => {
                if let Some(f) = self.faults.get_mut(h) {
                    f.blackout_on = true;
                }
                *self.blackouts.entry(site.clone()).or_insert(0) += 1;
                self.log.push(format!("{now} fault {site} blackout-start"));
            }
            FaultAction::BlackoutEnd => {
                let was_on = self.faults.get(h).is_some_and(|f| f.blackout_on);
                if was_on {
                    if let Some(f) = self.faults.get_mut(h) {
                        f.blackout_on = false;
                    }
                    self.end_blackout(&site);
                }
            }
        }
        Ok(())
    }

    fn end_blackout(&mut self, site: &SiteId) {
        if let Some(n) = self.blackouts.get_mut(site) {
            *n = n.saturating_sub(1);
        }
        self.log
            .push(format!("{} fault {site} blackout-end", self.now()));
    }

    /// Puts a VM into Error and sends its job back to the queue.
    fn fail_vm(&mut self, vm: VmId, cause: ErrorCause) -> Result<(), SimError> {
        let now = self.now();
        let job = self.cloud.mark_error(vm, cause, now, &mut self.net)?;
        if let Some(job) = job {
            if let Some(fid) = self.job_flow.remove(&job) {
                if let Some(flow) = self.net.close(fid) {
                    if matches!(flow.tag, FlowPurpose::Stream(_)) {
                        self.jobs.add_streamed_bytes(&job, flow.moved_bytes());
                    }
                }
            }
            self.jobs.requeue_on_failure(&job, now)?;
            self.counters.requeues += 1;
        }
        Ok(())
    }

    fn site_links(&self, site: &SiteId) -> Option<(LinkId, LinkId)> {
        self.cloud
            .site(site)
            .map(|s| (s.uplink.clone(), s.downlink.clone()))
    }

    /// Links from a data source to a VM's site. Traffic that stays inside one
    /// site skips its uplink and downlink.
    fn inbound_path(&self, src: &Endpoint, vm_site: &SiteId) -> Vec<LinkId> {
        let mut path: Vec<LinkId> = src.egress.iter().cloned().collect();
        if src.location.as_ref() == Some(vm_site) {
            return path;
        }
        if let Some((up, _)) = src.location.as_ref().and_then(|l| self.site_links(l)) {
            path.push(up);
        }
        if let Some((_, down)) = self.site_links(vm_site) {
            path.push(down);
        }
        path
    }

    fn output_path(&self, vm_site: &SiteId) -> Vec<LinkId> {
        let mut path = Vec::new();
        if self.user_location.as_ref() != Some(vm_site) {
            if let Some((up, _)) = self.site_links(vm_site) {
                path.push(up);
            }
            if let Some((_, down)) = self.user_location.as_ref().and_then(|l| self.site_links(l)) {
                path.push(down);
            }
        }
        path.extend(self.user_ingress.iter().cloned());
        path
    }

    fn vm_site(&self, vm: VmId) -> SiteId {
        self.cloud.vm(vm).expect("bound vm exists").site.clone()
    }

    fn start_job(&mut self, job: &JobId, vm: VmId) -> Result<(), SimError> {
        match self.calibration.clone() {
            Some(cal) => {
                let path = self.inbound_path(&cal, &self.vm_site(vm));
                let f = self.net.open(
                    &path,
                    None,
                    cal.bytes,
                    FlowPurpose::Calibration(job.clone()),
                )?;
                self.job_flow.insert(job.clone(), f);
                self.jobs.set_phase(job, JobPhase::FetchingCalibration);
                Ok(())
            }
            None => self.start_stream(job, vm),
        }
    }

    fn start_stream(&mut self, job: &JobId, vm: VmId) -> Result<(), SimError> {
        let j = self.jobs.job(job).expect("dispatched job exists");
        let sample = self.jobs.sample(&j.spec.sample).expect("validated sample");
        let demand = sample.stream_demand_bps();
        let bytes = j.spec.events_total * sample.event_size_bytes;
        let src = Endpoint {
            bytes,
            ..self.storage.clone()
        };
        let path = self.inbound_path(&src, &self.vm_site(vm));
        let f = self
            .net
            .open(&path, Some(demand), bytes, FlowPurpose::Stream(job.clone()))?;
        self.job_flow.insert(job.clone(), f);
        self.jobs.set_phase(job, JobPhase::Streaming);
        Ok(())
    }

    fn transfer_done(&mut self, flow: Flow<FlowPurpose>) -> Result<(), SimError> {
        let now = self.flow_clock;
        let (id, bytes) = (flow.id(), flow.initial_bytes());
        match flow.tag {
            FlowPurpose::Propagation { .. } => {
                for (vm, ready) in self.cloud.propagation_complete(id, now) {
                    self.schedule_at(ready, Event::VmBootComplete(vm));
                }
            }
            FlowPurpose::Calibration(job) => {
                self.job_flow.remove(&job);
                if let Some(vm) = self.jobs.job(&job).and_then(|j| j.vm) {
                    self.start_stream(&job, vm)?;
                }
            }
            FlowPurpose::Stream(job) => {
                self.job_flow.remove(&job);
                self.jobs.add_streamed_bytes(&job, bytes);
                self.jobs.finish_input(&job);
                let j = self.jobs.job(&job).expect("streaming job exists");
                let out_bytes = (bytes as f64 * j.spec.output_fraction).round() as u64;
                let Some(vm) = j.vm else {
                    return Ok(());
                };
                let path = self.output_path(&self.vm_site(vm));
                let f = self
                    .net
                    .open(&path, None, out_bytes, FlowPurpose::Output(job.clone()))?;
                self.job_flow.insert(job, f);
            }
            FlowPurpose::Output(job) => {
                self.job_flow.remove(&job);
                if let Some(vm) = self.jobs.complete(&job, now)? {
                    self.cloud.unbind(vm);
                }
            }
        }
        Ok(())
    }

    /// Live VM states, as the simulator knows them.
    pub fn vm_states(&self) -> BTreeMap<VmId, VmState> {
        self.cloud.live_vms().map(|v| (v.id, v.state)).collect()
    }
}
