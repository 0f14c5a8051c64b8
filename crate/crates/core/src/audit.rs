//! Replays an `events.log` and checks VM lifecycle legality and slot limits.

use std::collections::BTreeMap;

use crate::cloud::VmState;
use crate::ids::SiteId;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub vm_transitions: usize,
    pub illegal_transitions: Vec<String>,
    pub slot_violations: Vec<String>,
    pub unparsed: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.illegal_transitions.is_empty()
            && self.slot_violations.is_empty()
            && self.unparsed.is_empty()
    }
}

/// Checks every `vm` line: the `from` state must match the replayed state,
/// the edge must be legal, and no site may hold more slot-occupying VMs than
/// `capacity` allows. Lines of other kinds are skipped.
pub fn audit_log(log: &str, capacity: &BTreeMap<SiteId, u32>) -> AuditReport {
    let mut report = AuditReport::default();
    let mut state: BTreeMap<String, (SiteId, VmState)> = BTreeMap::new();
    let mut occupied: BTreeMap<SiteId, u32> = BTreeMap::new();

    for (n, line) in log.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.get(1) != Some(&"vm") {
            continue;
        }
        let (Some(&vm), Some(&site), Some(&from), Some(to)) = (
            f.get(2),
            f.get(3),
            f.get(4),
            f.get(5).and_then(|s| VmState::parse(s)),
        ) else {
            report.unparsed.push(format!("line {}: {line}", n + 1));
            continue;
        };
        report.vm_transitions += 1;
        let site = SiteId::from(site);
        let prev = state.get(vm).map(|(_, s)| *s);

        let legal = match (from, prev) {
            ("-", None) => to.is_initial(),
            ("-", Some(_)) => false,
            (f, Some(p)) => VmState::parse(f) == Some(p) && p.can_transition_to(to),
            (_, None) => false,
        };
        if !legal {
            report.illegal_transitions.push(format!(
                "line {}: {line} (replayed state {:?})",
                n + 1,
                prev
            ));
        }

        let held_before = prev.is_some_and(|s| s.holds_slot());
        let held_after = to.holds_slot();
        let slots = occupied.entry(site.clone()).or_insert(0);
        match (held_before, held_after) {
            (false, true) => *slots += 1,
            (true, false) => *slots = slots.saturating_sub(1),
            _ => {}
        }
        let cap = capacity.get(&site).copied().unwrap_or(0);
        if *slots > cap {
            report.slot_violations.push(format!(
                "line {}: site {site} holds {slots} of {cap} slots",
                n + 1
            ));
        }
        state.insert(vm.to_string(), (site, to));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caps(n: u32) -> BTreeMap<SiteId, u32> {
        BTreeMap::from([(SiteId::from("s"), n)])
    }

    #[test]
    fn clean_lifecycle() {
        let log = "\
0.000000 vm vm-0001 s - Propagating
10.000000 vm vm-0001 s Propagating Booting
130.000000 vm vm-0001 s Booting Running
130.000000 job j-000 Queued Running vm-0001
200.000000 vm vm-0001 s Running ShuttingDown
230.000000 vm vm-0001 s ShuttingDown Terminated
";
        let r = audit_log(log, &caps(1));
        assert!(r.is_clean(), "{r:?}");
        assert_eq!(r.vm_transitions, 5);
    }

    #[test]
    fn skipped_state_is_illegal() {
        let log = "0.0 vm vm-0001 s - Propagating\n1.0 vm vm-0001 s Propagating Running\n";
        let r = audit_log(log, &caps(1));
        assert_eq!(r.illegal_transitions.len(), 1);
    }

    #[test]
    fn mismatched_from_is_illegal() {
        let log = "0.0 vm vm-0001 s - Booting\n1.0 vm vm-0001 s Propagating Booting\n";
        assert_eq!(audit_log(log, &caps(1)).illegal_transitions.len(), 1);
    }

    #[test]
    fn overfull_site_is_flagged() {
        let log = "0.0 vm vm-0001 s - Booting\n0.0 vm vm-0002 s - Booting\n";
        let r = audit_log(log, &caps(1));
        assert_eq!(r.slot_violations.len(), 1);
        assert!(r.illegal_transitions.is_empty());
    }

    #[test]
    fn terminated_frees_the_slot() {
        let log = "\
0.0 vm vm-0001 s - Booting
1.0 vm vm-0001 s Booting Error
2.0 vm vm-0001 s Error Terminated
2.0 vm vm-0002 s - Booting
";
        assert!(audit_log(log, &caps(1)).is_clean());
    }
}
