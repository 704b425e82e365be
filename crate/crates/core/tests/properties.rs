use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use cfl_core::aggregation::{mask, plan_route, quantize, unmask_and_sum, AccVector, Arithmetic, MaskedAccumulator};
use cfl_core::analysis::{edge_probability, ring_size};
use cfl_core::config::{ExperimentConfig, ScenarioConfig};
use cfl_core::graph::LinkGraph;
use cfl_core::keying::{
    challenge, derive_comm_key, discover_shared, predistribute_keyrings, KeyPool, KeyState, RingSize, VoteState,
};
use cfl_core::simnet::{neighborhood_broadcast, FaultPlan, MessageKind, SimConfig, Simulation, Workload};
use cfl_core::topology::{divide_clusters, mark_targets, ClientId, ClusterId, ClusterOptions, NetworkTopology, Point};
use cfl_core::trainer::{
    local_train, logistic_gradient, logistic_loss, shard_sizes, AggregationWeights, DatasetShard, ModelVector, Sample,
    ShardParams, SpreadKind, TrainParams,
};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn scenario(n: usize, k: usize, seed: u64) -> Option<(NetworkTopology, cfl_core::topology::ClusterPlan)> {
    let topo = NetworkTopology::generate(n, 100.0, 35.0, seed);
    let plan = divide_clusters(&topo, k, &ClusterOptions { seed, ..Default::default() }).ok()?;
    let plan = mark_targets(&plan, 0.6, seed).ok()?;
    Some((topo, plan))
}

/// Random connected graph on `0..n`: a random tree plus extra edges.
fn connected_graph() -> impl Strategy<Value = LinkGraph> {
    (2usize..25).prop_flat_map(|n| {
        (
            proptest::collection::vec(any::<prop::sample::Index>(), n - 1),
            proptest::collection::vec((0..n, 0..n), 0..2 * n),
        )
            .prop_map(move |(parents, extra)| {
                let mut g = LinkGraph::with_nodes((0..n as u32).map(ClientId));
                for (i, p) in parents.iter().enumerate() {
                    let child = i + 1;
                    g.add_edge(ClientId(child as u32), ClientId(p.index(child) as u32));
                }
                for (a, b) in extra {
                    if a != b {
                        g.add_edge(ClientId(a as u32), ClientId(b as u32));
                    }
                }
                g
            })
    })
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn edges_iff_within_range(
        pts in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0), 1..40),
        range in 0.0f64..30.0,
    ) {
        let positions: Vec<Point> = pts.iter().map(|&(x, y)| Point { x, y }).collect();
        let topo = NetworkTopology::from_positions(positions.clone(), range);
        for a in topo.clients() {
            let nb = topo.neighbors(a);
            prop_assert!(nb.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(!nb.contains(&a));
            for b in topo.clients() {
                let want = a != b && positions[a.index()].distance(&positions[b.index()]) <= range;
                prop_assert_eq!(topo.has_edge(a, b), want);
            }
        }
    }

    #[test]
    fn clusters_partition_and_stay_connected(n in 5usize..80, k in 1usize..6, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let s = scenario(n, k, seed);
        prop_assume!(s.is_some());
        let (topo, plan) = s.unwrap();
        let mut seen = BTreeSet::new();
        for c in &plan.clusters {
            for m in &c.members {
                prop_assert!(seen.insert(*m), "{m} in two clusters");
            }
            let members: BTreeSet<ClientId> = plan.active_members(c.id).into_iter().collect();
            prop_assert_eq!(topo.components_within(&members).len(), 1);
            prop_assert!(c.is_target(c.leader) && c.is_server_adjacent(c.leader));
            prop_assert!(c.targets.iter().all(|t| members.contains(t)));
        }
        // Isolated clients keep a cluster label but take no part.
        prop_assert!(plan.isolated.iter().all(|i| seen.contains(i)));
        prop_assert_eq!(seen, topo.clients().collect::<BTreeSet<_>>());
        let again = scenario(n, k, seed).unwrap();
        prop_assert_eq!(again.0, topo);
        prop_assert_eq!(again.1, plan);
    }

    #[test]
    fn rings_symmetric_and_discovery_is_intersection(n in 3usize..30, m_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let s = scenario(n, 1, seed);
        prop_assume!(s.is_some());
        let (_, plan) = s.unwrap();
        let size = plan.active_members(ClusterId(0)).len();
        prop_assume!(size >= 2);
        let m = 1 + ((size - 2) as f64 * m_frac) as usize;
        let mut pool = KeyPool::new(seed);
        let (rings, _) = predistribute_keyrings(&plan, RingSize::Fixed(m), &mut pool, seed).unwrap();
        for (owner, ring) in &rings {
            prop_assert!(ring.len() == m || ring.len() == m + 1);
            for e in &ring.entries {
                prop_assert_eq!(rings[&e.peer].key_for(*owner), Some(&e.key));
            }
        }
        for (a, ra) in &rings {
            let ch = challenge(ra, seed);
            let ka: BTreeSet<_> = ra.entries.iter().map(|e| e.key.0).collect();
            for (b, rb) in &rings {
                if a == b {
                    continue;
                }
                let found: BTreeSet<_> = discover_shared(rb, &ch).iter().map(|k| k.0).collect();
                let truth: BTreeSet<_> = rb.entries.iter().map(|e| e.key.0).filter(|k| ka.contains(k)).collect();
                prop_assert_eq!(found, truth);
            }
        }
    }

    #[test]
    fn comm_keys_agree_at_both_ends(n in 3usize..30, seed in any::<u64>()) {
        let s = scenario(n, 1, seed);
        prop_assume!(s.is_some());
        let (_, plan) = s.unwrap();
        let (state, _) = KeyState::establish(&plan, RingSize::Connectivity(0.99), seed).unwrap();
        for (a, ra) in state.rings() {
            for e in &ra.entries {
                let ab = state.comm_key(*a, e.peer).copied();
                prop_assert_eq!(ab, state.comm_key(e.peer, *a).copied());
                let rb = &state.rings()[&e.peer];
                let mut shared: Vec<_> = ra.entries.iter().filter(|x| rb.entries.iter().any(|y| y.key == x.key)).map(|x| x.key).collect();
                shared.sort_by_key(|k| k.0);
                prop_assert_eq!(ab, Some(derive_comm_key(&shared).unwrap()));
            }
        }
    }

    #[test]
    fn revocation_needs_quorum(m in 1usize..20, l_frac in 0.0f64..1.0, votes in 0usize..20, seed in any::<u64>(),
                               forgeries in proptest::collection::vec(any::<[u8; 32]>(), 0..20)) {
        let members: Vec<ClientId> = (1..=m as u32).map(ClientId).collect();
        let l = 1 + ((m - 1) as f64 * l_frac) as usize;
        let mut st = VoteState::setup(ClientId(0), &members, l, seed);
        for f in &forgeries {
            prop_assert!(!st.verify_and_mark(f));
        }
        let k = votes.min(m);
        for mem in &members[..k] {
            let v = st.cast_vote(*mem).unwrap();
            prop_assert!(st.verify_and_mark(&v.v));
            prop_assert!(!st.verify_and_mark(&v.v));
        }
        prop_assert_eq!(st.revocation_due(), k >= l);
    }

    #[test]
    fn route_visits_targets_and_adds_each_once(g in connected_graph(), pick in any::<u64>(),
                                              values in proptest::collection::vec(-1e3f64..1e3, 25)) {
        let nodes: Vec<ClientId> = g.nodes().collect();
        let leader = nodes[(pick as usize) % nodes.len()];
        let mut targets: BTreeSet<ClientId> = nodes.iter().copied().filter(|c| (pick >> (c.0 % 60)) & 1 == 1).collect();
        targets.insert(leader);
        let route = plan_route(ClusterId(0), &g, &targets, leader).unwrap();
        prop_assert_eq!(route.order.first(), Some(&leader));
        prop_assert_eq!(route.order.last(), Some(&leader));
        for w in route.order.windows(2) {
            prop_assert!(g.has_edge(w[0], w[1]));
        }
        let contribution = |c: ClientId| AccVector::Fixed(vec![quantize(values[c.index()])]);
        // Leader's own value is folded in by masking; relays add at first visit.
        let (masked, s) = mask(&contribution(leader), 1000.0, pick);
        let mut acc = MaskedAccumulator { vector: masked, hop_index: 0, round: 0 };
        let first = route.first_visits();
        for (i, c) in route.order.iter().enumerate().skip(1) {
            if first[i] && targets.contains(c) {
                acc.vector = acc.vector.add(&contribution(*c)).unwrap();
            }
        }
        let mut oracle = 0i64;
        for t in &targets {
            oracle = oracle.wrapping_add(quantize(values[t.index()]));
        }
        prop_assert_eq!(unmask_and_sum(&acc, &s).unwrap(), AccVector::Fixed(vec![oracle]));
        prop_assert!(targets.iter().all(|t| route.order.contains(t)));
    }

    #[test]
    fn flood_reaches_exactly_the_component(n in 2usize..60, seed in any::<u64>(), keep in any::<u64>()) {
        let topo = NetworkTopology::generate(n, 100.0, 25.0, seed);
        let within: BTreeSet<ClientId> = topo.clients().filter(|c| c.0 == 0 || (keep >> (c.0 % 64)) & 1 == 1).collect();
        let reached = neighborhood_broadcast(&topo, ClientId(0), &within);
        prop_assert!(reached.is_subset(&within));
        prop_assert_eq!(&reached, &topo.reachable_within(ClientId(0), &within));
        // One transmission per reached node; never more than twice the edge count.
        prop_assert!(reached.len() <= 2 * topo.edge_count() + 1);
    }
}

proptest! {
    #![proptest_config(config(100))]

    #[test]
    fn gradient_matches_central_differences(
        w in proptest::collection::vec(-2.0f64..2.0, 2..8),
        data in proptest::collection::vec((proptest::collection::vec(-3.0f64..3.0, 8), any::<bool>()), 1..20),
    ) {
        let d = w.len();
        let w = ModelVector::from_vec(w);
        let samples: Vec<Sample> = data
            .into_iter()
            .map(|(f, y)| Sample { features: f[..d].to_vec(), label: if y { 1.0 } else { 0.0 } })
            .collect();
        let g = logistic_gradient(&w, &samples).unwrap();
        let h = 1e-5;
        let mut fd = vec![0.0; d];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut up = w.clone();
            let mut dn = w.clone();
            up.values[i] += h;
            dn.values[i] -= h;
            *slot = (logistic_loss(&up, &samples).unwrap() - logistic_loss(&dn, &samples).unwrap()) / (2.0 * h);
        }
        let diff: f64 = g.values.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        prop_assert!(diff / scale < 1e-5, "relative error {}", diff / scale);
    }

    #[test]
    fn hierarchical_weights_equal_flat_weights(
        groups in proptest::collection::vec(proptest::collection::vec(1usize..2000, 1..12), 1..8),
    ) {
        let mut map = BTreeMap::new();
        let mut next = 0u32;
        let mut total = 0usize;
        for (h, sizes) in groups.iter().enumerate() {
            let members: Vec<(ClientId, usize)> = sizes.iter().map(|s| { next += 1; total += s; (ClientId(next), *s) }).collect();
            map.insert(ClusterId(h as u32), members);
        }
        let w = AggregationWeights::from_sizes(&map);
        prop_assert!((w.q.values().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (h, members) in &map {
            let p_sum: f64 = members.iter().map(|(c, _)| w.p[c]).sum();
            prop_assert!((p_sum - 1.0).abs() <= 1e-12);
            for (c, s) in members {
                let flat = *s as f64 / total as f64;
                prop_assert!((w.q[h] * w.p[c] - flat).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shard_sizes_positive(n in 0usize..200, mean in 0.5f64..1000.0, spread in 0.0f64..2000.0, var in any::<bool>(), seed in any::<u64>()) {
        let p = ShardParams { mean, spread, spread_kind: if var { SpreadKind::Variance } else { SpreadKind::StdDev } };
        let sizes = shard_sizes(n, &p, seed).unwrap();
        prop_assert_eq!(sizes.len(), n);
        prop_assert!(sizes.iter().all(|s| *s >= 1));
        prop_assert_eq!(sizes, shard_sizes(n, &p, seed).unwrap());
    }

    #[test]
    fn local_training_is_deterministic(
        data in proptest::collection::vec((proptest::collection::vec(-3.0f64..3.0, 4), any::<bool>()), 1..50),
        seed in any::<u64>(),
    ) {
        let shard = DatasetShard {
            owner: ClientId(1),
            samples: data.into_iter().map(|(f, y)| Sample { features: f, label: f64::from(u8::from(y)) }).collect(),
        };
        let params = TrainParams { epochs: 2, lr: 0.1, batch_size: 8 };
        let w0 = ModelVector::zeros(4);
        let a = local_train(&w0, &shard, &params, seed).unwrap();
        let b = local_train(&w0, &shard, &params, seed).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
        prop_assert!(a.is_finite());
    }

    #[test]
    fn ring_size_consistent_and_monotone(n in 2usize..5000, p1 in 0.01f64..0.98) {
        let p2 = p1 + (0.999 - p1) / 2.0;
        let m1 = ring_size(n, p1).unwrap();
        let m2 = ring_size(n, p2).unwrap();
        prop_assert!(m1 >= 1 && m1 < n);
        prop_assert!(m2 >= m1);
        let r = edge_probability(n, p1).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        if r < 1.0 && m1 > 1 && m1 < n - 1 {
            let real = r * n as f64;
            prop_assert!(m1 as f64 - real >= 0.0 && m1 as f64 - real < 1.0);
        }
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn rounds_are_deterministic_and_counts_reconcile(seed in any::<u64>(), dropout in 0.0f64..0.3, fixed in any::<bool>()) {
        let s = ScenarioConfig { clients: 40, clusters: 3, mean_degree: 9.0, seed, ..Default::default() };
        let built = s.build();
        prop_assume!(built.is_ok());
        let (topo, plan) = built.unwrap();
        let sizes: BTreeMap<ClientId, u64> = plan.all_targets().map(|c| (c, 1 + u64::from(c.0) % 7)).collect();
        let sim_cfg = SimConfig {
            seed,
            arithmetic: if fixed { Arithmetic::Fixed } else { Arithmetic::Float },
            ..Default::default()
        };
        let run = || -> Option<Vec<_>> {
            let workload = Workload::sizes_only(ModelVector::zeros(3), sizes.clone());
            let mut sim = Simulation::new(topo.clone(), plan.clone(), sim_cfg.clone(), FaultPlan::with_dropout(dropout, seed), workload).ok()?;
            (0..3u64)
                .map(|t| {
                    let updates = sizes
                        .keys()
                        .map(|c| (*c, ModelVector::from_vec(vec![f64::from(c.0) * 0.01, t as f64 - 1.0, 0.5])))
                        .collect();
                    sim.run_round_with_updates(&updates).ok()
                })
                .collect()
        };
        let a = run();
        prop_assume!(a.is_some());
        let a = a.unwrap();
        let b = run().unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        for r in &a {
            prop_assert_eq!(r.messages_sent, r.trace.len());
            prop_assert_eq!(r.messages_sent, r.aggregation_messages + r.broadcast_messages);
            prop_assert_eq!(r.aggregation_messages, r.hops + r.uploads);
            let count = |k: MessageKind| r.trace.iter().filter(|t| t.kind == k).count();
            prop_assert_eq!(count(MessageKind::Hop), r.hops);
            prop_assert_eq!(count(MessageKind::Upload), r.uploads);
            prop_assert_eq!(r.bytes_sent, r.trace.iter().map(|t| t.bytes).sum::<usize>());
        }
    }

    #[test]
    fn config_round_trips(
        clients in 1usize..1000,
        clusters_frac in 0.0f64..1.0,
        mean_degree in 0.0f64..50.0,
        range in proptest::option::of(0.0f64..200.0),
        target_fraction in 0.01f64..=1.0,
        dropout in 0.0f64..=1.0,
        rounds in 0u64..1000,
        epsilon in proptest::option::of(0.0f64..1.0),
        mask_bound in 0.0f64..1e6,
        seeds in any::<[u64; 4]>(),
        ring in 0u8..3,
        lr in 1e-4f64..1.0,
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.clients = clients;
        cfg.scenario.clusters = 1 + ((clients - 1) as f64 * clusters_frac) as usize;
        cfg.scenario.mean_degree = mean_degree;
        cfg.scenario.range = range;
        cfg.scenario.target_fraction = target_fraction;
        cfg.scenario.seed = seeds[0];
        cfg.faults.dropout_fraction = dropout;
        cfg.faults.dropout_seed = seeds[1];
        cfg.sim.seed = seeds[2];
        cfg.sim.mask_bound = mask_bound;
        cfg.sim.ring_size = match ring {
            0 => RingSize::Complete,
            1 => RingSize::Fixed(clients / 3),
            _ => RingSize::Connectivity(target_fraction.min(0.999)),
        };
        cfg.training.data_seed = seeds[3];
        cfg.training.params.lr = lr;
        cfg.rounds = rounds;
        cfg.epsilon = epsilon;
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
