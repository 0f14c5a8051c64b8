//! Browser front end for the simulator. The plain functions return JSON
//! strings so they can be exercised natively; the `wasm` wrappers at the
//! bottom are what the page calls.

use std::collections::BTreeMap;

use dcsim::faults::FaultKind;
use dcsim::kernel::maxmin::{parse_flow_list, parse_link_list};
use dcsim::kernel::solve_max_min;
use dcsim::oracle::{check_max_min, max_min_oracle};
use dcsim::{preset_scenario, simulate, RunSummary};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::wasm_bindgen;

/// Knobs the page exposes on top of the built-in scenario.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PresetOverrides {
    pub seed: Option<u64>,
    pub single_copy_cache: bool,
    pub repo_mbps: Option<f64>,
    pub boot_error_probability: Option<f64>,
    pub periodic_kill: bool,
}

impl Default for PresetOverrides {
    fn default() -> Self {
        PresetOverrides {
            seed: None,
            single_copy_cache: false,
            repo_mbps: None,
            boot_error_probability: None,
            periodic_kill: true,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunSeries {
    pub t_hours: Vec<f64>,
    pub vms_propagating: Vec<usize>,
    pub vms_booting: Vec<usize>,
    pub vms_running: Vec<usize>,
    pub vms_error: Vec<usize>,
    pub jobs_completed: Vec<usize>,
    pub link_mbps: BTreeMap<String, Vec<f64>>,
    pub end_hours: f64,
    pub jobs_total: usize,
    pub jobs_done: usize,
    pub boot_errors: u64,
    pub vm_kills: u64,
    pub propagations: u64,
    pub repo_gb: f64,
}

#[derive(Debug, Serialize)]
pub struct FlowRate {
    pub flow: String,
    pub solver_mbps: f64,
    pub oracle_mbps: f64,
}

#[derive(Debug, Serialize)]
pub struct MaxMinResult {
    pub flows: Vec<FlowRate>,
    /// `None` when the allocation is feasible and max-min fair.
    pub violation: Option<String>,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum Reply<T> {
    Ok(T),
    Err { error: String },
}

fn reply<T: Serialize>(r: Result<T, String>) -> String {
    let r = match r {
        Ok(v) => Reply::Ok(v),
        Err(error) => Reply::Err { error },
    };
    serde_json::to_string(&r).expect("plain data serializes")
}

/// Runs the built-in scenario with `overrides` applied.
pub fn run_preset(overrides: &PresetOverrides) -> Result<RunSeries, String> {
    let mut cfg = preset_scenario();
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    cfg.cloud.single_copy_cache = overrides.single_copy_cache;
    if let Some(mbps) = overrides.repo_mbps {
        let egress = cfg.repository.egress.clone();
        let link = cfg
            .links
            .iter_mut()
            .find(|l| l.id == egress)
            .ok_or("repository egress link missing")?;
        link.capacity_bps = mbps * 1e6;
    }
    for f in &mut cfg.faults {
        if let (FaultKind::BootError { probability }, Some(p)) =
            (&mut f.kind, overrides.boot_error_probability)
        {
            *probability = p;
        }
    }
    if !overrides.periodic_kill {
        cfg.faults
            .retain(|f| !matches!(f.kind, FaultKind::PeriodicKill { .. }));
    }
    cfg.validate().map_err(|issues| {
        issues
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ")
    })?;

    let sim = simulate(&cfg).map_err(|e| e.to_string())?;
    let summary = RunSummary::from_sim(&sim, &cfg);
    let frames = sim.frames();
    let links = sim.recorder().links();
    let column = |i: usize| frames.iter().map(|f| f.link_mbps[i]).collect();
    Ok(RunSeries {
        t_hours: frames.iter().map(|f| f.t.as_secs_f64() / 3600.0).collect(),
        vms_propagating: frames.iter().map(|f| f.vms_propagating).collect(),
        vms_booting: frames.iter().map(|f| f.vms_booting).collect(),
        vms_running: frames.iter().map(|f| f.vms_running).collect(),
        vms_error: frames.iter().map(|f| f.vms_error).collect(),
        jobs_completed: frames.iter().map(|f| f.jobs_completed).collect(),
        link_mbps: links
            .iter()
            .enumerate()
            .map(|(i, id)| (id.to_string(), column(i)))
            .collect(),
        end_hours: summary.end_time.as_secs_f64() / 3600.0,
        jobs_total: summary.jobs_total,
        jobs_done: summary.jobs_completed,
        boot_errors: summary.counters.boot_errors,
        vm_kills: summary.counters.vm_kills,
        propagations: summary.propagations,
        repo_gb: summary.link(cfg.repository.egress.as_str()).unwrap_or(0.0) / 1e9,
    })
}

/// Solves a max-min instance given in the CLI's text syntax, alongside the
/// exact-arithmetic reference.
pub fn max_min(flows: &str, links: &str) -> Result<MaxMinResult, String> {
    let links = parse_link_list(links)?;
    let flows = parse_flow_list(flows)?;
    let solved = solve_max_min(&flows, &links).map_err(|e| e.to_string())?;
    let exact = max_min_oracle(&flows, &links).map_err(|e| e.to_string())?;
    let violation = check_max_min(&flows, &links, &solved, 1e-9).err();
    Ok(MaxMinResult {
        flows: solved
            .iter()
            .map(|(k, r)| FlowRate {
                flow: k.clone(),
                solver_mbps: r / 1e6,
                oracle_mbps: exact[k] / 1e6,
            })
            .collect(),
        violation,
    })
}

pub fn preset_toml() -> String {
    preset_scenario()
        .to_toml()
        .expect("built-in scenario serializes")
}

#[wasm_bindgen]
pub fn simulate_preset(overrides_json: &str) -> String {
    let parsed = if overrides_json.trim().is_empty() {
        Ok(PresetOverrides::default())
    } else {
        serde_json::from_str(overrides_json).map_err(|e| e.to_string())
    };
    reply(parsed.and_then(|o| run_preset(&o)))
}

#[wasm_bindgen]
pub fn solve_maxmin(flows: &str, links: &str) -> String {
    reply(max_min(flows, links))
}

#[wasm_bindgen]
pub fn scenario_toml() -> String {
    preset_toml()
}
