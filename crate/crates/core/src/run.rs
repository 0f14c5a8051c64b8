//! Whole-run driver: simulate a scenario and write its artifacts.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::ids::LinkId;
use crate::kernel::SimTime;
use crate::scenario::ScenarioConfig;
use crate::sim::{RunCounters, SimError, Simulation};

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub end_time: SimTime,
    /// The run went all the way to the horizon instead of stopping once
    /// the workload drained.
    pub horizon_reached: bool,
    pub jobs_total: usize,
    pub jobs_completed: usize,
    pub link_bytes: Vec<(LinkId, f64)>,
    pub propagations: u64,
    pub counters: RunCounters,
}

impl RunSummary {
    pub fn from_sim(sim: &Simulation, cfg: &ScenarioConfig) -> Self {
        let net = sim.network();
        RunSummary {
            scenario: cfg.name.clone(),
            seed: cfg.seed,
            end_time: if sim.quiesced() {
                sim.now()
            } else {
                sim.horizon()
            },
            horizon_reached: !sim.quiesced(),
            jobs_total: cfg.jobs().len(),
            jobs_completed: sim.jobs().completed(),
            link_bytes: net
                .links()
                .iter()
                .enumerate()
                .map(|(i, l)| (l.id.clone(), net.link_bytes(i)))
                .collect(),
            propagations: sim.cloud().propagations_started(),
            counters: sim.counters().clone(),
        }
    }

    pub fn all_completed(&self) -> bool {
        self.jobs_completed == self.jobs_total
    }

    pub fn completion_deficit(&self) -> usize {
        self.jobs_total - self.jobs_completed
    }

    pub fn link(&self, id: &str) -> Option<f64> {
        self.link_bytes
            .iter()
            .find(|(l, _)| l.as_str() == id)
            .map(|&(_, b)| b)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario = {}", self.scenario);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "end_time_s = {:.3}", self.end_time.as_secs_f64());
        let _ = writeln!(s, "horizon_reached = {}", self.horizon_reached);
        let _ = writeln!(s, "jobs_total = {}", self.jobs_total);
        let _ = writeln!(s, "jobs_completed = {}", self.jobs_completed);
        let _ = writeln!(s, "completion_deficit = {}", self.completion_deficit());
        let _ = writeln!(s, "image_transfers = {}", self.propagations);
        let _ = writeln!(s, "vm_boots = {}", self.counters.vm_boots);
        let _ = writeln!(s, "boot_errors = {}", self.counters.boot_errors);
        let _ = writeln!(s, "vm_kills = {}", self.counters.vm_kills);
        let _ = writeln!(s, "requeues = {}", self.counters.requeues);
        let _ = writeln!(s, "rejected_actions = {}", self.counters.rejected_actions);
        for (l, b) in &self.link_bytes {
            let _ = writeln!(s, "link_{l}_bytes = {b:.0}");
        }
        s
    }
}

/// Everything a run produces, in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub metrics_csv: String,
    pub events_log: String,
}

/// Simulates a scenario to completion or its horizon.
pub fn simulate(cfg: &ScenarioConfig) -> Result<Simulation, SimError> {
    let mut sim = Simulation::new(cfg)?;
    sim.run()?;
    Ok(sim)
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, SimError> {
    let sim = simulate(cfg)?;
    let mut events_log = sim.event_log().join("\n");
    events_log.push('\n');
    Ok(RunOutput {
        summary: RunSummary::from_sim(&sim, cfg),
        metrics_csv: sim.recorder().to_csv(),
        events_log,
    })
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Runs and writes `metrics.csv`, `events.log` and `summary.txt` into
/// `out_dir`, creating it if needed.
pub fn run(cfg: &ScenarioConfig, out_dir: impl AsRef<Path>) -> Result<RunSummary, RunError> {
    let dir = out_dir.as_ref();
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| RunError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let out = run_scenario(cfg)?;
    for (name, body) in [
        ("metrics.csv", &out.metrics_csv),
        ("events.log", &out.events_log),
        ("summary.txt", &out.summary.to_text()),
    ] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(io(&p))?;
    }
    Ok(out.summary)
}
