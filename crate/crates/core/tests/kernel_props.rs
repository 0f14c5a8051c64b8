use std::collections::BTreeMap;

use proptest::prelude::*;

use dcsim::ids::LinkId;
use dcsim::kernel::{
    solve_max_min, FlowNetwork, FlowRequest, Kernel, LinkSpec, SimDuration, SimTime,
};
use dcsim::oracle::{check_max_min, max_min_oracle};

fn instance() -> impl Strategy<Value = (Vec<LinkSpec>, Vec<FlowRequest<usize>>)> {
    (1usize..=3).prop_flat_map(|n_links| {
        let links = prop::collection::vec(1e6f64..1e9, n_links).prop_map(|caps| {
            caps.into_iter()
                .enumerate()
                .map(|(i, c)| LinkSpec::new(format!("l{i}"), c))
                .collect::<Vec<_>>()
        });
        let flow = (
            prop::collection::btree_set(0..n_links, 1..=n_links),
            prop::option::of(1e5f64..2e9),
        );
        (links, prop::collection::vec(flow, 1..=6)).prop_map(|(links, flows)| {
            let flows = flows
                .into_iter()
                .enumerate()
                .map(|(k, (path, demand))| FlowRequest {
                    key: k,
                    path: path
                        .into_iter()
                        .map(|i| LinkId::new(format!("l{i}")))
                        .collect(),
                    demand_bps: demand,
                })
                .collect();
            (links, flows)
        })
    })
}

proptest! {
    #[test]
    fn solver_matches_oracle((links, flows) in instance()) {
        let got = solve_max_min(&flows, &links).unwrap();
        let want = max_min_oracle(&flows, &links).unwrap();
        for f in &flows {
            let (g, w) = (got[&f.key], want[&f.key]);
            prop_assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "flow {}: {} vs {}", f.key, g, w);
        }
        prop_assert_eq!(check_max_min(&flows, &links, &got, 1e-9), Ok(()));
    }

    #[test]
    fn allocation_respects_capacity((links, flows) in instance()) {
        let got = solve_max_min(&flows, &links).unwrap();
        for l in &links {
            let load: f64 = flows.iter().filter(|f| f.path.contains(&l.id)).map(|f| got[&f.key]).sum();
            prop_assert!(load <= l.capacity_bps * (1.0 + 1e-12));
        }
        for f in &flows {
            if let Some(d) = f.demand_bps {
                prop_assert!(got[&f.key] <= d * (1.0 + 1e-12));
            }
        }
    }

    /// Every byte a completed flow carried shows up on each link of its
    /// path, exactly, however the rates shifted along the way.
    #[test]
    fn completed_flows_conserve_bytes(
        flows in prop::collection::vec((0usize..3, 1u64..5_000_000_000, prop::option::of(1e6f64..4e8)), 1..8),
        steps in prop::collection::vec(1u64..400_000_000, 1..40),
    ) {
        let links = vec![LinkSpec::new("x", 3e8), LinkSpec::new("y", 7e8), LinkSpec::new("z", 1.1e8)];
        let paths: [&[&str]; 3] = [&["x"], &["x", "y"], &["y", "z"]];
        let mut net = FlowNetwork::new(links).unwrap();
        let mut expected: BTreeMap<usize, u128> = BTreeMap::new();
        let mut opened = Vec::new();
        for (i, &(p, bytes, demand)) in flows.iter().enumerate() {
            let path: Vec<LinkId> = paths[p].iter().map(|&s| s.into()).collect();
            opened.push(net.open(&path, demand, bytes, i).unwrap());
        }
        net.resolve();
        let mut done = Vec::new();
        for dt in steps {
            done.extend(net.advance(SimDuration::from_micros(dt)));
            net.resolve();
            net.check_capacity().unwrap();
        }
        // Drain whatever is left.
        while let Some(d) = net.next_completion() {
            done.extend(net.advance(d));
            net.resolve();
        }
        prop_assert!(net.is_idle());
        prop_assert_eq!(done.len(), flows.len());
        for f in &done {
            prop_assert_eq!(f.moved_bytes(), f.initial_bytes());
            let (p, bytes, _) = flows[f.tag];
            for l in paths[p] {
                let idx = net.link_index(&LinkId::from(*l)).unwrap();
                *expected.entry(idx).or_default() += bytes as u128;
            }
        }
        for i in 0..3 {
            let want = expected.get(&i).copied().unwrap_or(0) as f64;
            prop_assert_eq!(net.link_bytes(i), want);
        }
    }

    #[test]
    fn events_fire_in_time_order(
        times in prop::collection::vec(0u64..1_000, 1..60),
        cancel in prop::collection::vec(any::<bool>(), 60),
    ) {
        let mut k = Kernel::new();
        let mut live = Vec::new();
        for (i, &t) in times.iter().enumerate() {
            let h = k.schedule(SimTime::from_secs(t), i).unwrap();
            if cancel[i] {
                prop_assert!(k.cancel(h));
            } else {
                live.push((t, i));
            }
        }
        let mut fired = Vec::new();
        k.run_until(SimTime::from_secs(2_000), |k, ev| fired.push((k.now().as_micros() / 1_000_000, ev.kind)));
        live.sort();
        prop_assert_eq!(fired, live);
    }
}
