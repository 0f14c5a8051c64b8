use dcsim_demo::{max_min, run_preset, simulate_preset, solve_maxmin, PresetOverrides};

#[test]
fn maxmin_matches_reference_on_shared_uplink() {
    let r = max_min("a=up:3.52e6,b=up:1.76e6,c=up", "up=10e6").unwrap();
    assert!(r.violation.is_none());
    let c = r.flows.iter().find(|f| f.flow == "c").unwrap();
    assert!((c.solver_mbps - 4.72).abs() < 1e-9);
    for f in &r.flows {
        assert!((f.solver_mbps - f.oracle_mbps).abs() <= 1e-9 * f.oracle_mbps.max(1.0));
    }
}

#[test]
fn bad_input_is_reported_as_json_error() {
    let out = solve_maxmin("a=nowhere", "up=1e6");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["error"].is_string());
    let out = simulate_preset("{\"bogus\": 1}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["error"].as_str().unwrap().contains("bogus"));
}

#[test]
fn preset_runs_to_completion_and_cache_cuts_repo_traffic() {
    let plain = run_preset(&PresetOverrides::default()).unwrap();
    assert_eq!(plain.jobs_done, plain.jobs_total);
    assert_eq!(plain.t_hours.len(), plain.vms_running.len());
    assert!(plain.vms_running.iter().all(|&n| n <= 110));
    let cached = run_preset(&PresetOverrides {
        single_copy_cache: true,
        periodic_kill: false,
        ..Default::default()
    })
    .unwrap();
    assert!(cached.repo_gb < plain.repo_gb);
}

#[test]
fn invalid_override_fails_validation() {
    let r = run_preset(&PresetOverrides {
        boot_error_probability: Some(1.5),
        ..Default::default()
    });
    assert!(r.is_err());
}
