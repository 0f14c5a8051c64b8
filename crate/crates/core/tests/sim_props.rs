mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use common::*;
use dcsim::audit::audit_log;
use dcsim::cloud::VmState;
use dcsim::ids::SiteId;
use dcsim::jobs::JobState;
use dcsim::metrics::MetricsTable;
use dcsim::{run_scenario, simulate, ScenarioConfig};

fn capacities(cfg: &ScenarioConfig) -> BTreeMap<SiteId, u32> {
    cfg.clouds.iter().map(|c| (c.id.clone(), c.slots)).collect()
}

fn faulty(jobs_a: u32, jobs_b: u32, p: f64, kill: bool, dark: bool) -> ScenarioConfig {
    let mut faults = vec![boot_error("a", p, "boot")];
    if kill {
        faults.push(periodic_kill("b", 1500.0, 900.0, 6000.0));
    }
    if dark {
        faults.push(blackout("a", 1200.0, 1500.0));
    }
    small_scenario(jobs_a, jobs_b, faults)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_are_legal_and_complete(
        jobs_a in 0u32..12, jobs_b in 0u32..6, p in 0.0f64..0.5,
        kill: bool, dark: bool, seed: u64,
    ) {
        let mut cfg = faulty(jobs_a, jobs_b, p, kill, dark);
        cfg.seed = seed;
        let out = run_scenario(&cfg).unwrap();

        let audit = audit_log(&out.events_log, &capacities(&cfg));
        prop_assert!(audit.is_clean(), "{:?}", audit);
        prop_assert_eq!(out.summary.jobs_completed, (jobs_a + jobs_b) as usize);

        let times = log_times(&out.events_log);
        prop_assert!(times.windows(2).all(|w| w[0] <= w[1]), "log out of order");

        let table = MetricsTable::parse(&out.metrics_csv).unwrap();
        let t = table.column("t_seconds").unwrap();
        prop_assert!(t.windows(2).all(|w| (w[1] - w[0] - 60.0).abs() < 1e-9));
        let running = table.column("vms_running").unwrap();
        prop_assert!(running.iter().all(|&r| r <= cfg.total_slots() as f64));

        // Traffic columns integrate back to the summary's byte totals.
        for (link, bytes) in &out.summary.link_bytes {
            let integrated = table.integrate_bytes(&format!("link_{link}_mbps")).unwrap();
            let cap = cfg.link(link).unwrap().capacity_bps;
            prop_assert!((integrated - bytes).abs() <= cap / 8.0 * 60.0, "{}: {} vs {}", link, integrated, bytes);
        }
    }

    #[test]
    fn same_seed_same_bytes(jobs_a in 1u32..10, p in 0.0f64..0.6, seed: u64) {
        let mut cfg = faulty(jobs_a, 2, p, true, true);
        cfg.seed = seed;
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        prop_assert_eq!(a.metrics_csv, b.metrics_csv);
        prop_assert_eq!(a.events_log, b.events_log);
    }

    /// Jobs that never failed streamed exactly their input; a job that was
    /// cut off streamed its input plus whatever it had read before.
    #[test]
    fn streamed_bytes_account_for_failures(jobs_a in 1u32..10, kill: bool) {
        let cfg = faulty(jobs_a, 3, 0.0, kill, false);
        let sim = simulate(&cfg).unwrap();
        for job in sim.jobs().jobs() {
            prop_assert_eq!(job.state, JobState::Completed);
            let sample = sim.jobs().sample(&job.spec.sample).unwrap();
            let input = job.spec.events_total * sample.event_size_bytes;
            if job.attempts == 1 {
                prop_assert_eq!(job.streamed_bytes, input);
            } else {
                prop_assert!(job.streamed_bytes >= input);
                // A kill during output return discards a fully streamed attempt.
                prop_assert!(job.streamed_bytes <= input * job.attempts as u64);
            }
        }
    }

    /// The monitoring gap only removes rows.
    #[test]
    fn monitor_gap_is_observation_only(jobs_a in 1u32..10, start in 0.0f64..3000.0, len in 60.0f64..2000.0) {
        let base = faulty(jobs_a, 2, 0.3, true, false);
        let mut gapped = base.clone();
        gapped.faults.push(monitor_gap("a", start, start + len));
        let a = run_scenario(&base).unwrap();
        let b = run_scenario(&gapped).unwrap();
        let state_lines = |log: &str| -> Vec<String> {
            log.lines().filter(|l| !l.contains(" fault ")).map(str::to_string).collect()
        };
        prop_assert_eq!(state_lines(&a.events_log), state_lines(&b.events_log));
        let ta = MetricsTable::parse(&a.metrics_csv).unwrap();
        let tb = MetricsTable::parse(&b.metrics_csv).unwrap();
        let counts = |t: &MetricsTable| -> Vec<Vec<f64>> { t.rows.iter().map(|r| r[..8].to_vec()).collect() };
        let kept: Vec<Vec<f64>> = counts(&ta)
            .into_iter()
            .filter(|r| r[0] < start.ceil() || r[0] > start + len)
            .collect();
        prop_assert_eq!(kept, counts(&tb));
    }
}

#[test]
fn idle_vms_terminate_soon_after_last_job() {
    let cfg = small_scenario(6, 2, vec![]);
    let out = run_scenario(&cfg).unwrap();
    let last = |needle: &str| {
        out.events_log
            .lines()
            .filter(|l| l.contains(needle))
            .filter_map(|l| l.split_whitespace().next()?.parse::<f64>().ok())
            .fold(0.0, f64::max)
    };
    let done = last(" Completed");
    let gone = last(" Terminated");
    // Teardown plus two scheduler ticks.
    assert!(
        gone - done <= 30.0 + 2.0 * 30.0,
        "completed {done}, terminated {gone}"
    );
    assert!(!out.summary.horizon_reached);
}

#[test]
fn boot_errors_are_replaced() {
    let cfg = small_scenario(8, 0, vec![boot_error("a", 0.5, "boot")]);
    let sim = simulate(&cfg).unwrap();
    assert!(sim.counters().boot_errors > 0);
    assert_eq!(sim.jobs().completed(), 8);
    assert!(sim.cloud().vms().all(|v| v.state == VmState::Terminated));
}

#[test]
fn short_horizon_leaves_a_deficit() {
    let mut cfg = small_scenario(6, 2, vec![]);
    cfg.horizon_s = 300.0;
    let out = run_scenario(&cfg).unwrap();
    assert!(out.summary.horizon_reached);
    assert_eq!(out.summary.completion_deficit(), 8);
}

#[test]
fn single_copy_cache_transfers_once_per_site() {
    let mut cfg = small_scenario(7, 0, vec![]);
    cfg.cloud.single_copy_cache = true;
    let sim = simulate(&cfg).unwrap();
    assert_eq!(sim.cloud().propagations_started(), 1);
    cfg.cloud.single_copy_cache = false;
    let sim = simulate(&cfg).unwrap();
    assert_eq!(sim.cloud().propagations_started(), 3);
}
