//! Condor-style job queue: submission, image matching, progress, requeue.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ImageId, JobId, SampleId, VmId};
use crate::kernel::{SimDuration, SimTime};

pub const DEFAULT_OUTPUT_FRACTION: f64 = 0.02;

/// A named dataset with a uniform event size and per-job processing rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub id: SampleId,
    pub event_size_bytes: u64,
    /// Size of the whole sample on storage. Descriptive only.
    pub total_size_bytes: u64,
    pub events_per_job: u64,
    /// Event rate when input delivery is not the bottleneck.
    pub cpu_events_per_s: f64,
}

impl SampleSpec {
    /// Bit rate a job needs to run at its CPU-limited event rate.
    pub fn stream_demand_bps(&self) -> f64 {
        self.event_size_bytes as f64 * self.cpu_events_per_s * 8.0
    }

    pub fn job_input_bytes(&self) -> u64 {
        self.events_per_job * self.event_size_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum JobState {
    Queued,
    Running,
    Completed,
    Requeued,
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobState::Queued => "Queued",
            JobState::Running => "Running",
            JobState::Completed => "Completed",
            JobState::Requeued => "Requeued",
        })
    }
}

/// What a Running job is currently doing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobPhase {
    FetchingCalibration,
    Streaming,
    ReturningOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub id: JobId,
    pub required_image: ImageId,
    pub sample: SampleId,
    pub events_total: u64,
    pub submit_at: SimTime,
    pub output_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub spec: JobSpec,
    pub state: JobState,
    pub events_done: u64,
    /// Fractional progress carried between `progress` calls.
    partial_events: f64,
    pub vm: Option<VmId>,
    pub phase: Option<JobPhase>,
    pub attempts: u32,
    /// Input bytes streamed across all attempts, including discarded ones.
    pub streamed_bytes: u64,
    pub started_at: Option<SimTime>,
    pub completed_at: Option<SimTime>,
    order: QueueKey,
}

impl Job {
    pub fn is_waiting(&self) -> bool {
        matches!(self.state, JobState::Queued | JobState::Requeued)
    }
}

/// Dispatch order inside one image class: submit time, then requeued jobs
/// ahead of never-run ones, then submission sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct QueueKey {
    submit_at: SimTime,
    fresh: bool,
    seq: u64,
    id: JobId,
}

#[derive(Debug, Error, PartialEq)]
pub enum JobError {
    #[error("job {job} requires unknown image {image}")]
    UnknownImage { job: JobId, image: ImageId },
    #[error("job {job} reads unknown sample {sample}")]
    UnknownSample { job: JobId, sample: SampleId },
    #[error("duplicate job id {0}")]
    DuplicateId(JobId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {job} is {state}, expected {expected}")]
    IllegalState {
        job: JobId,
        state: JobState,
        expected: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobTransition {
    pub at: SimTime,
    pub job: JobId,
    pub from: Option<JobState>,
    pub to: JobState,
    pub vm: Option<VmId>,
}

#[derive(Debug, Clone, Default)]
pub struct JobQueue {
    jobs: BTreeMap<JobId, Job>,
    samples: BTreeMap<SampleId, SampleSpec>,
    images: BTreeSet<ImageId>,
    waiting: BTreeMap<ImageId, BTreeSet<QueueKey>>,
    next_seq: u64,
    transitions: Vec<JobTransition>,
}

impl JobQueue {
    pub fn new(samples: Vec<SampleSpec>, images: impl IntoIterator<Item = ImageId>) -> Self {
        JobQueue {
            samples: samples.into_iter().map(|s| (s.id.clone(), s)).collect(),
            images: images.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn sample(&self, id: &SampleId) -> Option<&SampleSpec> {
        self.samples.get(id)
    }

    pub fn job(&self, id: &JobId) -> Option<&Job> {
        self.jobs.get(id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.jobs.values()
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    /// Jobs not yet Completed, including ones whose submit time is in the future.
    pub fn depth(&self) -> usize {
        self.jobs
            .values()
            .filter(|j| j.state != JobState::Completed)
            .count()
    }

    pub fn completed(&self) -> usize {
        self.jobs
            .values()
            .filter(|j| j.state == JobState::Completed)
            .count()
    }

    pub fn all_completed(&self) -> bool {
        self.jobs.values().all(|j| j.state == JobState::Completed)
    }

    pub fn take_transitions(&mut self) -> Vec<JobTransition> {
        std::mem::take(&mut self.transitions)
    }

    /// Waiting jobs per image that are visible at `now`.
    pub fn queued_by_image(&self, now: SimTime) -> BTreeMap<ImageId, u32> {
        let mut out = BTreeMap::new();
        for (img, set) in &self.waiting {
            let n = set.iter().take_while(|k| k.submit_at <= now).count() as u32;
            if n > 0 {
                out.insert(img.clone(), n);
            }
        }
        out
    }

    pub fn running_by_image(&self) -> BTreeMap<ImageId, u32> {
        let mut out = BTreeMap::new();
        for j in self.jobs.values().filter(|j| j.state == JobState::Running) {
            *out.entry(j.spec.required_image.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn count_state(&self, now: SimTime, state: JobState) -> usize {
        self.jobs
            .values()
            .filter(|j| j.state == state && j.spec.submit_at <= now)
            .count()
    }

    pub fn submit(&mut self, spec: JobSpec) -> Result<JobId, JobError> {
        if self.jobs.contains_key(&spec.id) {
            return Err(JobError::DuplicateId(spec.id));
        }
        if !self.images.contains(&spec.required_image) {
            return Err(JobError::UnknownImage {
                job: spec.id,
                image: spec.required_image,
            });
        }
        if !self.samples.contains_key(&spec.sample) {
            return Err(JobError::UnknownSample {
                job: spec.id,
                sample: spec.sample,
            });
        }
        let order = QueueKey {
            submit_at: spec.submit_at,
            fresh: true,
            seq: self.next_seq,
            id: spec.id.clone(),
        };
        self.next_seq += 1;
        self.waiting
            .entry(spec.required_image.clone())
            .or_default()
            .insert(order.clone());
        let id = spec.id.clone();
        self.transitions.push(JobTransition {
            at: spec.submit_at,
            job: id.clone(),
            from: None,
            to: JobState::Queued,
            vm: None,
        });
        self.jobs.insert(
            id.clone(),
            Job {
                spec,
                state: JobState::Queued,
                events_done: 0,
                partial_events: 0.0,
                vm: None,
                phase: None,
                attempts: 0,
                streamed_bytes: 0,
                started_at: None,
                completed_at: None,
                order,
            },
        );
        Ok(id)
    }

    /// Binds the oldest visible job of the right image to each idle VM, in the
    /// order the VMs are given. Jobs become Running; the caller starts their
    /// transfers and binds the VMs.
    pub fn match_and_dispatch<'a>(
        &mut self,
        now: SimTime,
        idle_vms: impl IntoIterator<Item = (VmId, &'a ImageId)>,
    ) -> Vec<(JobId, VmId)> {
        let mut out = Vec::new();
        for (vm, image) in idle_vms {
            let Some(set) = self.waiting.get_mut(image) else {
                continue;
            };
            let head = match set.iter().next() {
                Some(k) if k.submit_at <= now => k.clone(),
                _ => continue,
            };
            set.remove(&head);
            let job = self.jobs.get_mut(&head.id).expect("queued job exists");
            let from = job.state;
            job.state = JobState::Running;
            job.vm = Some(vm);
            job.phase = None;
            job.attempts += 1;
            job.events_done = 0;
            job.partial_events = 0.0;
            job.started_at = Some(now);
            self.transitions.push(JobTransition {
                at: now,
                job: head.id.clone(),
                from: Some(from),
                to: JobState::Running,
                vm: Some(vm),
            });
            out.push((head.id, vm));
        }
        out
    }

    pub fn set_phase(&mut self, job: &JobId, phase: JobPhase) {
        if let Some(j) = self.jobs.get_mut(job) {
            j.phase = Some(phase);
        }
    }

    /// Advances a running job by `dt` at a delivered input rate of
    /// `achieved_bps`. Returns the events processed in this interval.
    ///
    /// The event rate is the smaller of the CPU rate and what the stream can
    /// feed; progress stops at `events_total`.
    pub fn progress(&mut self, job: &JobId, dt: SimDuration, achieved_bps: f64) -> f64 {
        let Some(j) = self.jobs.get_mut(job) else {
            return 0.0;
        };
        let Some(sample) = self.samples.get(&j.spec.sample) else {
            return 0.0;
        };
        if j.state != JobState::Running {
            return 0.0;
        }
        let rate = event_rate(sample, achieved_bps);
        let left = (j.spec.events_total - j.events_done) as f64 - j.partial_events;
        let processed = (rate * dt.as_secs_f64()).min(left.max(0.0));
        let total = j.partial_events + processed;
        let whole = total.floor();
        j.events_done = (j.events_done + whole as u64).min(j.spec.events_total);
        j.partial_events = total - whole;
        processed
    }

    /// Marks streaming finished: every event is processed.
    pub fn finish_input(&mut self, job: &JobId) {
        if let Some(j) = self.jobs.get_mut(job) {
            j.events_done = j.spec.events_total;
            j.partial_events = 0.0;
            j.phase = Some(JobPhase::ReturningOutput);
        }
    }

    pub fn add_streamed_bytes(&mut self, job: &JobId, bytes: u64) {
        if let Some(j) = self.jobs.get_mut(job) {
            j.streamed_bytes += bytes;
        }
    }

    /// Output returned; the job is done. Returns the VM it ran on.
    pub fn complete(&mut self, job: &JobId, now: SimTime) -> Result<Option<VmId>, JobError> {
        let j = self
            .jobs
            .get_mut(job)
            .ok_or_else(|| JobError::UnknownJob(job.clone()))?;
        if j.state != JobState::Running {
            return Err(JobError::IllegalState {
                job: job.clone(),
                state: j.state,
                expected: "Running",
            });
        }
        j.events_done = j.spec.events_total;
        j.state = JobState::Completed;
        j.phase = None;
        j.completed_at = Some(now);
        let vm = j.vm.take();
        self.transitions.push(JobTransition {
            at: now,
            job: job.clone(),
            from: Some(JobState::Running),
            to: JobState::Completed,
            vm,
        });
        Ok(vm)
    }

    /// Returns a job whose VM failed to the queue. All progress is discarded;
    /// the job goes ahead of never-run jobs with the same submit time.
    pub fn requeue_on_failure(&mut self, job: &JobId, now: SimTime) -> Result<(), JobError> {
        let j = self
            .jobs
            .get_mut(job)
            .ok_or_else(|| JobError::UnknownJob(job.clone()))?;
        if j.state != JobState::Running {
            return Err(JobError::IllegalState {
                job: job.clone(),
                state: j.state,
                expected: "Running",
            });
        }
        let vm = j.vm.take();
        j.state = JobState::Requeued;
        j.phase = None;
        j.events_done = 0;
        j.partial_events = 0.0;
        j.order.fresh = false;
        let key = j.order.clone();
        self.waiting
            .entry(j.spec.required_image.clone())
            .or_default()
            .insert(key);
        self.transitions.push(JobTransition {
            at: now,
            job: job.clone(),
            from: Some(JobState::Running),
            to: JobState::Requeued,
            vm,
        });
        Ok(())
    }
}

/// Events per second a job achieves at a delivered input rate.
pub fn event_rate(sample: &SampleSpec, achieved_bps: f64) -> f64 {
    let io_limited = achieved_bps.max(0.0) / (8.0 * sample.event_size_bytes as f64);
    sample.cpu_events_per_s.min(io_limited)
}

/// Seconds until `events_left` are processed at a steady delivered rate.
pub fn time_to_finish(sample: &SampleSpec, events_left: u64, achieved_bps: f64) -> Option<f64> {
    let rate = event_rate(sample, achieved_bps);
    (rate > 0.0).then(|| events_left as f64 / rate)
}
