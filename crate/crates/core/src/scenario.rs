//! Scenario files: loading, validation, and the built-in distributed-cloud
//! preset.
//!
//! The on-disk format is TOML. All rates are in bit/s, sizes in bytes, and
//! times in seconds, with decimal prefixes (1 GB = 10^9 bytes).

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{ProvisioningFlavor, VmImageSpec};
use crate::faults::{FaultKind, FaultSpec};
use crate::ids::{ImageId, JobId, LinkId, SampleId, SiteId};
use crate::jobs::{JobSpec, SampleSpec, DEFAULT_OUTPUT_FRACTION};
use crate::kernel::{LinkSpec, SimTime};
use crate::scheduler::{Placement, SchedulerPolicy};

fn default_sample_interval() -> f64 {
    60.0
}

fn default_boot_delay() -> f64 {
    120.0
}

fn default_teardown_delay() -> f64 {
    30.0
}

fn default_output_fraction() -> f64 {
    DEFAULT_OUTPUT_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSettingsConfig {
    #[serde(default = "default_boot_delay")]
    pub boot_delay_s: f64,
    #[serde(default = "default_teardown_delay")]
    pub teardown_delay_s: f64,
    #[serde(default)]
    pub single_copy_cache: bool,
}

impl Default for CloudSettingsConfig {
    fn default() -> Self {
        CloudSettingsConfig {
            boot_delay_s: default_boot_delay(),
            teardown_delay_s: default_teardown_delay(),
            single_copy_cache: false,
        }
    }
}

/// Remote-read client tuning. Recorded with the scenario, not simulated:
/// streaming is modeled as a fluid flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamingClientConfig {
    pub read_ahead_bytes: u64,
    pub read_ahead_cache_bytes: u64,
}

impl Default for StreamingClientConfig {
    fn default() -> Self {
        StreamingClientConfig {
            read_ahead_bytes: 1_000_000,
            read_ahead_cache_bytes: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSiteConfig {
    pub id: SiteId,
    pub slots: u32,
    pub flavor: ProvisioningFlavor,
    pub uplink: LinkId,
    pub downlink: LinkId,
    #[serde(default)]
    pub preseeded_images: Vec<ImageId>,
}

/// Image server. The capacity of `egress` is its throughput cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepositoryConfig {
    pub id: SiteId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<SiteId>,
    pub egress: LinkId,
    pub images: Vec<ImageId>,
}

/// Event-data store that running jobs stream from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageConfig {
    pub id: SiteId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<SiteId>,
    pub egress: LinkId,
    pub samples: Vec<SampleId>,
}

/// Where job output goes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserStorageConfig {
    pub id: SiteId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<SiteId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingress: Option<LinkId>,
}

/// Optional conditions database every job reads from before it starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub id: SiteId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<SiteId>,
    pub egress: LinkId,
    pub fetch_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobGroupConfig {
    pub id: String,
    pub image: ImageId,
    pub sample: SampleId,
    pub count: u32,
    pub submit_at_s: f64,
    /// Overrides the sample's `events_per_job`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events_per_job: Option<u64>,
    #[serde(default = "default_output_fraction")]
    pub output_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub horizon_s: f64,
    #[serde(default = "default_sample_interval")]
    pub sample_interval_s: f64,
    #[serde(default)]
    pub cloud: CloudSettingsConfig,
    #[serde(default)]
    pub scheduler: SchedulerPolicy,
    #[serde(default)]
    pub streaming: StreamingClientConfig,
    pub links: Vec<LinkSpec>,
    pub clouds: Vec<CloudSiteConfig>,
    pub repository: RepositoryConfig,
    pub storage: StorageConfig,
    pub user_storage: UserStorageConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationConfig>,
    pub images: Vec<VmImageSpec>,
    pub samples: Vec<SampleSpec>,
    pub job_groups: Vec<JobGroupConfig>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario:\n{}", format_issues(.0))]
    Validation(Vec<ValidationIssue>),
    #[error("cannot serialize scenario: {0}")]
    Serialize(#[from] toml::ser::Error),
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let cfg: ScenarioConfig = toml::from_str(text)?;
    cfg.validate().map_err(ScenarioError::Validation)?;
    Ok(cfg)
}

pub fn emit_preset_scenario(path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    let text = preset_scenario().to_toml()?;
    std::fs::write(path, text).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Issues(Vec<ValidationIssue>);

impl Issues {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(ValidationIssue {
            path: path.into(),
            message: message.into(),
        });
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

impl ScenarioConfig {
    pub fn to_toml(&self) -> Result<String, ScenarioError> {
        Ok(toml::to_string(self)?)
    }

    pub fn total_slots(&self) -> u32 {
        self.clouds.iter().map(|c| c.slots).sum()
    }

    pub fn link(&self, id: &LinkId) -> Option<&LinkSpec> {
        self.links.iter().find(|l| &l.id == id)
    }

    pub fn cloud(&self, id: &SiteId) -> Option<&CloudSiteConfig> {
        self.clouds.iter().find(|c| &c.id == id)
    }

    pub fn sample(&self, id: &SampleId) -> Option<&SampleSpec> {
        self.samples.iter().find(|s| &s.id == id)
    }

    /// Every site id that faults may target.
    pub fn site_ids(&self) -> BTreeSet<SiteId> {
        let mut s: BTreeSet<SiteId> = self.clouds.iter().map(|c| c.id.clone()).collect();
        s.insert(self.repository.id.clone());
        s.insert(self.storage.id.clone());
        s.insert(self.user_storage.id.clone());
        if let Some(c) = &self.calibration {
            s.insert(c.id.clone());
        }
        s
    }

    /// Expands job groups into individual jobs, `<group>-<nnn>`.
    pub fn jobs(&self) -> Vec<JobSpec> {
        let mut out = Vec::new();
        for g in &self.job_groups {
            let events = g
                .events_per_job
                .or_else(|| self.sample(&g.sample).map(|s| s.events_per_job))
                .unwrap_or(0);
            for i in 0..g.count {
                out.push(JobSpec {
                    id: JobId::new(format!("{}-{:03}", g.id, i)),
                    required_image: g.image.clone(),
                    sample: g.sample.clone(),
                    events_total: events,
                    submit_at: SimTime::from_secs_f64(g.submit_at_s),
                    output_fraction: g.output_fraction,
                });
            }
        }
        out
    }

    /// Checks referential integrity and value ranges, reporting every problem.
    pub fn validate(&self) -> Result<(), Vec<ValidationIssue>> {
        let mut bad = Issues(Vec::new());

        if !positive(self.horizon_s) {
            bad.push("horizon_s", "must be positive");
        }
        if !positive(self.sample_interval_s) {
            bad.push("sample_interval_s", "must be positive");
        }
        if !positive(self.scheduler.tick_interval_s) {
            bad.push("scheduler.tick_interval_s", "must be positive");
        }
        if !(self.cloud.boot_delay_s.is_finite() && self.cloud.boot_delay_s >= 0.0) {
            bad.push("cloud.boot_delay_s", "must be non-negative");
        }
        if !(self.cloud.teardown_delay_s.is_finite() && self.cloud.teardown_delay_s >= 0.0) {
            bad.push("cloud.teardown_delay_s", "must be non-negative");
        }

        let mut link_ids = BTreeSet::new();
        for (i, l) in self.links.iter().enumerate() {
            if !link_ids.insert(&l.id) {
                bad.push(format!("links[{i}].id"), format!("duplicate link {}", l.id));
            }
            if !positive(l.capacity_bps) {
                bad.push(format!("links[{i}].capacity_bps"), "must be positive");
            }
        }
        let check_link = |bad: &mut Issues, path: String, id: &LinkId| {
            if !link_ids.contains(id) {
                bad.push(path, format!("unknown link {id}"));
            }
        };

        let image_ids: BTreeSet<&ImageId> = self.images.iter().map(|i| &i.id).collect();
        let sample_ids: BTreeSet<&SampleId> = self.samples.iter().map(|s| &s.id).collect();
        let mut cloud_ids = BTreeSet::new();
        for (i, c) in self.clouds.iter().enumerate() {
            let p = format!("clouds[{i}]");
            if !cloud_ids.insert(&c.id) {
                bad.push(format!("{p}.id"), format!("duplicate site {}", c.id));
            }
            if c.slots == 0 {
                bad.push(format!("{p}.slots"), "must be at least 1");
            }
            check_link(&mut bad, format!("{p}.uplink"), &c.uplink);
            check_link(&mut bad, format!("{p}.downlink"), &c.downlink);
            for (k, img) in c.preseeded_images.iter().enumerate() {
                if !image_ids.contains(img) {
                    bad.push(
                        format!("{p}.preseeded_images[{k}]"),
                        format!("unknown image {img}"),
                    );
                }
            }
        }
        let check_location = |bad: &mut Issues, path: String, loc: &Option<SiteId>| {
            if let Some(l) = loc {
                if !cloud_ids.contains(l) {
                    bad.push(path, format!("unknown cloud site {l}"));
                }
            }
        };

        let r = &self.repository;
        check_location(&mut bad, "repository.location".into(), &r.location);
        check_link(&mut bad, "repository.egress".into(), &r.egress);
        for (k, img) in r.images.iter().enumerate() {
            if !image_ids.contains(img) {
                bad.push(
                    format!("repository.images[{k}]"),
                    format!("unknown image {img}"),
                );
            }
        }
        if let (Some(cap), Some(up)) = (
            self.link(&r.egress).map(|l| l.capacity_bps),
            r.location
                .as_ref()
                .and_then(|l| self.cloud(l))
                .and_then(|c| self.link(&c.uplink))
                .map(|l| l.capacity_bps),
        ) {
            if cap > up {
                bad.push(
                    "repository.egress",
                    format!("server throughput {cap} exceeds site uplink {up}"),
                );
            }
        }

        let s = &self.storage;
        check_location(&mut bad, "storage.location".into(), &s.location);
        check_link(&mut bad, "storage.egress".into(), &s.egress);
        for (k, id) in s.samples.iter().enumerate() {
            if !sample_ids.contains(id) {
                bad.push(
                    format!("storage.samples[{k}]"),
                    format!("unknown sample {id}"),
                );
            }
        }
        check_location(
            &mut bad,
            "user_storage.location".into(),
            &self.user_storage.location,
        );
        if let Some(l) = &self.user_storage.ingress {
            check_link(&mut bad, "user_storage.ingress".into(), l);
        }
        if let Some(c) = &self.calibration {
            check_location(&mut bad, "calibration.location".into(), &c.location);
            check_link(&mut bad, "calibration.egress".into(), &c.egress);
        }

        let mut seen = BTreeSet::new();
        for (i, img) in self.images.iter().enumerate() {
            if !seen.insert(&img.id) {
                bad.push(
                    format!("images[{i}].id"),
                    format!("duplicate image {}", img.id),
                );
            }
            if img.size_bytes == 0 {
                bad.push(format!("images[{i}].size_bytes"), "must be positive");
            }
            if img.ram_mb == 0 {
                bad.push(format!("images[{i}].ram_mb"), "must be positive");
            }
        }
        let mut seen = BTreeSet::new();
        for (i, smp) in self.samples.iter().enumerate() {
            let p = format!("samples[{i}]");
            if !seen.insert(&smp.id) {
                bad.push(format!("{p}.id"), format!("duplicate sample {}", smp.id));
            }
            if smp.event_size_bytes == 0 {
                bad.push(format!("{p}.event_size_bytes"), "must be positive");
            }
            if !positive(smp.cpu_events_per_s) {
                bad.push(format!("{p}.cpu_events_per_s"), "must be positive");
            }
            if !s.samples.contains(&smp.id) {
                bad.push(
                    format!("{p}.id"),
                    format!("sample {} is not hosted by storage", smp.id),
                );
            }
        }

        let mut seen = BTreeSet::new();
        for (i, g) in self.job_groups.iter().enumerate() {
            let p = format!("job_groups[{i}]");
            if !seen.insert(&g.id) {
                bad.push(format!("{p}.id"), format!("duplicate job group {}", g.id));
            }
            if !image_ids.contains(&g.image) {
                bad.push(
                    format!("{p}.image"),
                    format!("job group {} requires unknown image {}", g.id, g.image),
                );
            } else if !r.images.contains(&g.image) {
                bad.push(
                    format!("{p}.image"),
                    format!(
                        "job group {} requires image {} not held by the repository",
                        g.id, g.image
                    ),
                );
            }
            if !sample_ids.contains(&g.sample) {
                bad.push(
                    format!("{p}.sample"),
                    format!("job group {} reads unknown sample {}", g.id, g.sample),
                );
            }
            if g.count == 0 {
                bad.push(format!("{p}.count"), "must be at least 1");
            }
            if !(g.submit_at_s.is_finite() && g.submit_at_s >= 0.0) {
                bad.push(format!("{p}.submit_at_s"), "must be non-negative");
            }
            if g.events_per_job == Some(0) {
                bad.push(format!("{p}.events_per_job"), "must be positive");
            }
            if !(0.0..=1.0).contains(&g.output_fraction) {
                bad.push(format!("{p}.output_fraction"), "must be within [0, 1]");
            }
        }

        let sites = self.site_ids();
        for (i, f) in self.faults.iter().enumerate() {
            if !sites.contains(&f.site) {
                bad.push(
                    format!("faults[{i}].site"),
                    format!("unknown site {}", f.site),
                );
            }
            if let Err(e) = f.validate() {
                bad.push(format!("faults[{i}]"), e);
            }
        }

        if bad.0.is_empty() {
            Ok(())
        } else {
            Err(bad.0)
        }
    }
}

const HOUR: f64 = 3600.0;
const GBIT: f64 = 1e9;
const MBIT: f64 = 1e6;

/// The four-cloud setup from the distributed analysis run: NRC hosts the
/// image repository, EC2 holds its own copy, UVIC-A hosts the event store.
pub fn preset_scenario() -> ScenarioConfig {
    let link = |id: &str, cap: f64| LinkSpec::new(id, cap);
    let cloud = |id: &str, slots: u32, flavor, preseed: &[&str]| CloudSiteConfig {
        id: id.into(),
        slots,
        flavor,
        uplink: format!("{id}_up").into(),
        downlink: format!("{id}_down").into(),
        preseeded_images: preseed.iter().map(|&s| ImageId::from(s)).collect(),
    };
    let sample = |id: &str, size: u64, total: u64, events: u64, rate: f64| SampleSpec {
        id: id.into(),
        event_size_bytes: size,
        total_size_bytes: total,
        events_per_job: events,
        cpu_events_per_s: rate,
    };
    let group = |id: &str, sample: &str, count: u32, at_h: f64| JobGroupConfig {
        id: id.into(),
        image: "babar-sl55".into(),
        sample: sample.into(),
        count,
        submit_at_s: at_h * HOUR,
        events_per_job: None,
        output_fraction: DEFAULT_OUTPUT_FRACTION,
    };
    let fault = |site: &str, stream: &str, kind| FaultSpec {
        site: site.into(),
        seed_stream: stream.into(),
        kind,
    };

    ScenarioConfig {
        name: "distributed-cloud-babar".into(),
        seed: 2010,
        horizon_s: 48.0 * HOUR,
        sample_interval_s: 60.0,
        cloud: CloudSettingsConfig::default(),
        scheduler: SchedulerPolicy {
            tick_interval_s: 30.0,
            placement: Placement::RoundRobin,
            max_boots_per_tick: None,
        },
        streaming: StreamingClientConfig::default(),
        links: vec![
            link("nrc_repo", 500.0 * MBIT),
            link("nrc_up", GBIT),
            link("nrc_down", GBIT),
            link("ec2_up", GBIT),
            link("ec2_down", GBIT),
            link("uvic_a_up", GBIT),
            link("uvic_a_down", GBIT),
            link("uvic_b_up", GBIT),
            link("uvic_b_down", GBIT),
            link("lustre", GBIT),
        ],
        clouds: vec![
            cloud("nrc", 30, ProvisioningFlavor::NimbusLike, &["babar-sl55"]),
            cloud("ec2", 20, ProvisioningFlavor::Ec2Like, &["babar-sl55"]),
            cloud("uvic_a", 40, ProvisioningFlavor::NimbusLike, &[]),
            cloud("uvic_b", 20, ProvisioningFlavor::NimbusLike, &[]),
        ],
        repository: RepositoryConfig {
            id: "vm-repository".into(),
            location: Some("nrc".into()),
            egress: "nrc_repo".into(),
            images: vec!["babar-sl55".into()],
        },
        storage: StorageConfig {
            id: "lustre".into(),
            location: Some("uvic_a".into()),
            egress: "lustre".into(),
            samples: vec!["tau1n-data".into(), "tau1n-mc".into(), "tau11-mc".into()],
        },
        user_storage: UserStorageConfig {
            id: "user-home".into(),
            location: Some("uvic_a".into()),
            ingress: None,
        },
        calibration: None,
        images: vec![VmImageSpec {
            id: "babar-sl55".into(),
            size_bytes: 16_000_000_000,
            ram_mb: 1024,
            software_tag: "SL 5.5 Xen image with BaBar analysis release".into(),
        }],
        samples: vec![
            sample("tau1n-data", 4000, 1_158_000_000_000, 4_752_000, 110.0),
            sample("tau1n-mc", 4000, 615_000_000_000, 2_376_000, 55.0),
            sample("tau11-mc", 3000, 1_386_000_000_000, 18_576_000, 430.0),
        ],
        job_groups: vec![
            group("tau1n-data", "tau1n-data", 77, 0.0),
            group("tau1n-mc", "tau1n-mc", 64, 2.0),
            group("tau11-mc", "tau11-mc", 114, 4.0),
        ],
        faults: vec![
            fault(
                "nrc",
                "nimbus-boot-bug",
                FaultKind::BootError { probability: 0.2 },
            ),
            fault(
                "uvic_b",
                "xen-destroy",
                FaultKind::PeriodicKill {
                    period_s: HOUR,
                    first_at_s: 6.0 * HOUR,
                    until_s: Some(18.0 * HOUR),
                },
            ),
            fault(
                "ec2",
                "comm-loss",
                FaultKind::CommBlackout {
                    start_s: 18.0 * HOUR,
                    end_s: 18.25 * HOUR,
                },
            ),
            fault(
                "nrc",
                "monitor",
                FaultKind::MonitorGap {
                    start_s: 17.0 * HOUR,
                    end_s: 17.5 * HOUR,
                },
            ),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_is_valid_and_has_110_slots() {
        let p = preset_scenario();
        p.validate().unwrap();
        assert_eq!(p.clouds.len(), 4);
        assert_eq!(p.total_slots(), 110);
        assert_eq!(p.jobs().len(), 255);
    }

    #[test]
    fn preset_demands() {
        let p = preset_scenario();
        let d: Vec<f64> = p.samples.iter().map(|s| s.stream_demand_bps()).collect();
        assert_eq!(d, vec![3.52e6, 1.76e6, 10.32e6]);
    }

    #[test]
    fn preset_round_trips_through_toml() {
        let p = preset_scenario();
        let text = p.to_toml().unwrap();
        assert_eq!(parse_scenario(&text).unwrap(), p);
    }

    #[test]
    fn unknown_image_names_the_job_group() {
        let mut p = preset_scenario();
        p.job_groups[1].image = "missing".into();
        let issues = p.validate().unwrap_err();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "job_groups[1].image");
        assert!(issues[0].message.contains("tau1n-mc"));
    }

    #[test]
    fn every_violation_is_reported() {
        let mut p = preset_scenario();
        p.links[0].capacity_bps = 0.0;
        p.clouds[0].uplink = "nowhere".into();
        p.faults[0].site = "mars".into();
        p.horizon_s = -1.0;
        let issues = p.validate().unwrap_err();
        let paths: Vec<&str> = issues.iter().map(|i| i.path.as_str()).collect();
        assert!(paths.contains(&"links[0].capacity_bps"));
        assert!(paths.contains(&"clouds[0].uplink"));
        assert!(paths.contains(&"faults[0].site"));
        assert!(paths.contains(&"horizon_s"));
    }

    #[test]
    fn parse_error_is_distinct() {
        assert!(matches!(
            parse_scenario("name = "),
            Err(ScenarioError::Parse(_))
        ));
    }
}
