//! Seeded fault processes: boot errors, periodic external kills,
//! scheduler communication blackouts and monitoring gaps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::SiteId;
use crate::kernel::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FaultKind {
    /// Each boot at the site lands in Error with this probability when
    /// Booting completes.
    BootError { probability: f64 },
    /// Every `period_s`, the lowest-id Running VM at the site is destroyed.
    PeriodicKill {
        period_s: f64,
        first_at_s: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        until_s: Option<f64>,
    },
    /// The scheduler loses contact with the site during the window.
    CommBlackout { start_s: f64, end_s: f64 },
    /// Metrics rows inside the window are not written.
    MonitorGap { start_s: f64, end_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub site: SiteId,
    /// Name of this fault's private random stream.
    pub seed_stream: String,
    #[serde(flatten)]
    pub kind: FaultKind,
}

impl FaultSpec {
    pub fn validate(&self) -> Result<(), String> {
        let ordered = |a: f64, b: f64| a.is_finite() && b.is_finite() && a >= 0.0 && a <= b;
        match self.kind {
            FaultKind::BootError { probability } => {
                if !(0.0..=1.0).contains(&probability) {
                    return Err(format!("probability {probability} outside [0, 1]"));
                }
            }
            FaultKind::PeriodicKill {
                period_s,
                first_at_s,
                until_s,
            } => {
                if !(period_s.is_finite() && period_s > 0.0) {
                    return Err(format!("period_s {period_s} must be positive"));
                }
                if !(first_at_s.is_finite() && first_at_s >= 0.0) {
                    return Err(format!("first_at_s {first_at_s} must be non-negative"));
                }
                if let Some(u) = until_s {
                    if !ordered(first_at_s, u) {
                        return Err(format!("until_s {u} before first_at_s {first_at_s}"));
                    }
                }
            }
            FaultKind::CommBlackout { start_s, end_s }
            | FaultKind::MonitorGap { start_s, end_s } => {
                if !ordered(start_s, end_s) {
                    return Err(format!("window [{start_s}, {end_s}] is not well-ordered"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FaultHandle(pub u32);

#[derive(Debug, Error, PartialEq)]
pub enum FaultError {
    #[error("fault targets unknown site {0}")]
    UnknownSite(SiteId),
    #[error("bad fault parameters: {0}")]
    BadParams(String),
    #[error("unknown or already disarmed fault handle {0:?}")]
    UnknownHandle(FaultHandle),
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Random stream for one fault: the run seed picks the key, the stream name
/// picks the ChaCha stream, so renaming one fault's stream leaves every other
/// fault's draws untouched.
pub fn fault_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(stream));
    rng
}

#[derive(Debug, Clone)]
pub struct ArmedFault {
    pub spec: FaultSpec,
    pub active: bool,
    /// CommBlackout currently in effect.
    pub blackout_on: bool,
    rng: ChaCha8Rng,
    pub draws: u64,
}

#[derive(Debug, Clone)]
pub struct FaultInjector {
    seed: u64,
    faults: Vec<ArmedFault>,
}

impl FaultInjector {
    pub fn new(seed: u64) -> Self {
        FaultInjector {
            seed,
            faults: Vec::new(),
        }
    }

    pub fn arm(
        &mut self,
        spec: FaultSpec,
        site_exists: impl Fn(&SiteId) -> bool,
    ) -> Result<FaultHandle, FaultError> {
        if !site_exists(&spec.site) {
            return Err(FaultError::UnknownSite(spec.site));
        }
        spec.validate().map_err(FaultError::BadParams)?;
        let rng = fault_rng(self.seed, &spec.seed_stream);
        self.faults.push(ArmedFault {
            spec,
            active: true,
            blackout_on: false,
            rng,
            draws: 0,
        });
        Ok(FaultHandle(self.faults.len() as u32 - 1))
    }

    /// Stops further triggers. Returns the fault as it was just before.
    pub fn disarm(&mut self, h: FaultHandle) -> Result<ArmedFault, FaultError> {
        match self.faults.get_mut(h.0 as usize) {
            Some(f) if f.active => {
                let before = f.clone();
                f.active = false;
                f.blackout_on = false;
                Ok(before)
            }
            _ => Err(FaultError::UnknownHandle(h)),
        }
    }

    pub fn get(&self, h: FaultHandle) -> Option<&ArmedFault> {
        self.faults.get(h.0 as usize)
    }

    pub fn get_mut(&mut self, h: FaultHandle) -> Option<&mut ArmedFault> {
        self.faults.get_mut(h.0 as usize)
    }

    pub fn is_active(&self, h: FaultHandle) -> bool {
        self.get(h).is_some_and(|f| f.active)
    }

    pub fn iter(&self) -> impl Iterator<Item = (FaultHandle, &ArmedFault)> {
        self.faults
            .iter()
            .enumerate()
            .map(|(i, f)| (FaultHandle(i as u32), f))
    }

    /// Decides whether a boot finishing at `site` fails. Every active
    /// BootError fault on the site draws once, in arming order.
    pub fn boot_fails(&mut self, site: &SiteId) -> bool {
        let mut failed = false;
        for f in self
            .faults
            .iter_mut()
            .filter(|f| f.active && &f.spec.site == site)
        {
            if let FaultKind::BootError { probability } = f.spec.kind {
                f.draws += 1;
                failed |= f.rng.random_bool(probability);
            }
        }
        failed
    }

    pub fn monitor_gap_at(&self, t: SimTime) -> bool {
        self.faults.iter().any(|f| match f.spec.kind {
            FaultKind::MonitorGap { start_s, end_s } if f.active => {
                t >= SimTime::from_secs_f64(start_s) && t <= SimTime::from_secs_f64(end_s)
            }
            _ => false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boot_error(site: &str, p: f64, stream: &str) -> FaultSpec {
        FaultSpec {
            site: site.into(),
            seed_stream: stream.into(),
            kind: FaultKind::BootError { probability: p },
        }
    }

    #[test]
    fn rejects_bad_params_and_sites() {
        let mut f = FaultInjector::new(1);
        assert_eq!(
            f.arm(boot_error("x", 0.5, "s"), |_| false),
            Err(FaultError::UnknownSite("x".into()))
        );
        assert!(matches!(
            f.arm(boot_error("x", 1.5, "s"), |_| true),
            Err(FaultError::BadParams(_))
        ));
        let gap = FaultSpec {
            site: "x".into(),
            seed_stream: "g".into(),
            kind: FaultKind::MonitorGap {
                start_s: 10.0,
                end_s: 5.0,
            },
        };
        assert!(matches!(
            f.arm(gap, |_| true),
            Err(FaultError::BadParams(_))
        ));
    }

    #[test]
    fn disarm_twice_is_unknown_handle() {
        let mut f = FaultInjector::new(1);
        let h = f.arm(boot_error("x", 1.0, "s"), |_| true).unwrap();
        assert!(f.boot_fails(&"x".into()));
        f.disarm(h).unwrap();
        assert!(!f.boot_fails(&"x".into()));
        assert_eq!(f.disarm(h).unwrap_err(), FaultError::UnknownHandle(h));
    }

    #[test]
    fn streams_are_isolated() {
        let draws = |other_stream: &str| {
            let mut f = FaultInjector::new(7);
            f.arm(boot_error("a", 0.5, "keep"), |_| true).unwrap();
            f.arm(boot_error("b", 0.5, other_stream), |_| true).unwrap();
            let a: Vec<bool> = (0..64).map(|_| f.boot_fails(&"a".into())).collect();
            let b: Vec<bool> = (0..64).map(|_| f.boot_fails(&"b".into())).collect();
            (a, b)
        };
        let (a1, b1) = draws("one");
        let (a2, b2) = draws("two");
        assert_eq!(a1, a2);
        assert_ne!(b1, b2);
    }

    #[test]
    fn boot_error_rate_is_roughly_p() {
        let mut f = FaultInjector::new(3);
        f.arm(boot_error("a", 0.2, "s"), |_| true).unwrap();
        let n = (0..10_000).filter(|_| f.boot_fails(&"a".into())).count();
        assert!((1800..2200).contains(&n), "{n}");
    }

    #[test]
    fn monitor_gap_window_inclusive() {
        let mut f = FaultInjector::new(0);
        f.arm(
            FaultSpec {
                site: "x".into(),
                seed_stream: "g".into(),
                kind: FaultKind::MonitorGap {
                    start_s: 60.0,
                    end_s: 120.0,
                },
            },
            |_| true,
        )
        .unwrap();
        assert!(!f.monitor_gap_at(SimTime::from_secs(59)));
        assert!(f.monitor_gap_at(SimTime::from_secs(60)));
        assert!(f.monitor_gap_at(SimTime::from_secs(120)));
        assert!(!f.monitor_gap_at(SimTime::from_secs(121)));
    }
}
