#![allow(dead_code)]

use dcsim::cloud::{ProvisioningFlavor, VmImageSpec};
use dcsim::faults::{FaultKind, FaultSpec};
use dcsim::jobs::SampleSpec;
use dcsim::kernel::LinkSpec;
use dcsim::scenario::{
    CloudSettingsConfig, CloudSiteConfig, JobGroupConfig, RepositoryConfig, ScenarioConfig,
    StorageConfig, StreamingClientConfig, UserStorageConfig,
};
use dcsim::scheduler::SchedulerPolicy;

/// Two small clouds, a 1 GB image, and short jobs: a full run takes a few
/// simulated hours and milliseconds of wall time.
pub fn small_scenario(jobs_a: u32, jobs_b: u32, faults: Vec<FaultSpec>) -> ScenarioConfig {
    let cloud = |id: &str, slots, preseed: bool| CloudSiteConfig {
        id: id.into(),
        slots,
        flavor: ProvisioningFlavor::NimbusLike,
        uplink: format!("{id}_up").into(),
        downlink: format!("{id}_down").into(),
        preseeded_images: if preseed { vec!["img".into()] } else { vec![] },
    };
    let group = |id: &str, sample: &str, count, at: f64| JobGroupConfig {
        id: id.into(),
        image: "img".into(),
        sample: sample.into(),
        count,
        submit_at_s: at,
        events_per_job: None,
        output_fraction: 0.02,
    };
    let mut job_groups = Vec::new();
    if jobs_a > 0 {
        job_groups.push(group("fast", "s1", jobs_a, 0.0));
    }
    if jobs_b > 0 {
        job_groups.push(group("slow", "s2", jobs_b, 600.0));
    }
    ScenarioConfig {
        name: "small".into(),
        seed: 7,
        horizon_s: 12.0 * 3600.0,
        sample_interval_s: 60.0,
        cloud: CloudSettingsConfig::default(),
        scheduler: SchedulerPolicy::default(),
        streaming: StreamingClientConfig::default(),
        links: vec![
            LinkSpec::new("repo", 100e6),
            LinkSpec::new("a_up", 1e9),
            LinkSpec::new("a_down", 1e9),
            LinkSpec::new("b_up", 200e6),
            LinkSpec::new("b_down", 200e6),
            LinkSpec::new("store", 50e6),
        ],
        clouds: vec![cloud("a", 4, true), cloud("b", 3, false)],
        repository: RepositoryConfig {
            id: "repo-site".into(),
            location: Some("a".into()),
            egress: "repo".into(),
            images: vec!["img".into()],
        },
        storage: StorageConfig {
            id: "store-site".into(),
            location: Some("a".into()),
            egress: "store".into(),
            samples: vec!["s1".into(), "s2".into()],
        },
        user_storage: UserStorageConfig {
            id: "home".into(),
            location: Some("a".into()),
            ingress: None,
        },
        calibration: None,
        images: vec![VmImageSpec {
            id: "img".into(),
            size_bytes: 1_000_000_000,
            ram_mb: 1024,
            software_tag: "test".into(),
        }],
        samples: vec![
            SampleSpec {
                id: "s1".into(),
                event_size_bytes: 4000,
                total_size_bytes: 0,
                events_per_job: 60_000,
                cpu_events_per_s: 100.0,
            },
            SampleSpec {
                id: "s2".into(),
                event_size_bytes: 3000,
                total_size_bytes: 0,
                events_per_job: 180_000,
                cpu_events_per_s: 200.0,
            },
        ],
        job_groups,
        faults,
    }
}

pub fn boot_error(site: &str, p: f64, stream: &str) -> FaultSpec {
    FaultSpec {
        site: site.into(),
        seed_stream: stream.into(),
        kind: FaultKind::BootError { probability: p },
    }
}

pub fn periodic_kill(site: &str, period_s: f64, first_at_s: f64, until_s: f64) -> FaultSpec {
    FaultSpec {
        site: site.into(),
        seed_stream: "kill".into(),
        kind: FaultKind::PeriodicKill {
            period_s,
            first_at_s,
            until_s: Some(until_s),
        },
    }
}

pub fn blackout(site: &str, start_s: f64, end_s: f64) -> FaultSpec {
    FaultSpec {
        site: site.into(),
        seed_stream: "blackout".into(),
        kind: FaultKind::CommBlackout { start_s, end_s },
    }
}

pub fn monitor_gap(site: &str, start_s: f64, end_s: f64) -> FaultSpec {
    FaultSpec {
        site: site.into(),
        seed_stream: "gap".into(),
        kind: FaultKind::MonitorGap { start_s, end_s },
    }
}

/// Event-log timestamps, in order.
pub fn log_times(log: &str) -> Vec<f64> {
    log.lines()
        .filter_map(|l| l.split_whitespace().next())
        .map(|t| t.parse().expect("timestamp"))
        .collect()
}
