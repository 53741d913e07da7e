use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use compiso_core::estimator::{did_estimate, DidInputs};
use compiso_core::graph::{CompetitionGraph, NodeMetrics};
use compiso_core::io;
use compiso_core::market::{generate_catalog, simulate, ItemSpec, MarketConfig, PanelRow, SinkingPlan, TrafficRow, TreatmentPlan};
use compiso_core::matching::{match_all, quantile_bins, MatchOptions, Ranking, StratumScheme};
use compiso_core::partition::{brute_force_min_cut, kl_partition, BalanceConstraints, Partition};
use compiso_core::types::{CategoryPath, DayWindow, ItemId, Metric};
use proptest::prelude::*;

fn id(i: usize) -> ItemId {
    ItemId(format!("v{i:02}"))
}

fn metrics(pv: u64, orders: u64, price: f64, leaf: usize) -> NodeMetrics {
    NodeMetrics {
        pv,
        orders,
        gmv: orders as f64 * price,
        price,
        category_path: CategoryPath::new("d", "g", format!("l{leaf}")).unwrap(),
    }
}

prop_compose! {
    fn arb_graph(max_nodes: usize)(n in 2..=max_nodes)(
        nodes in prop::collection::vec((50u64..500, 1u64..40, 5.0f64..80.0, 0usize..3), n),
        edges in prop::collection::vec((0..n, 0..n, 1u32..20), 0..3 * n),
    ) -> CompetitionGraph {
        let nodes: BTreeMap<ItemId, NodeMetrics> = nodes
            .into_iter()
            .enumerate()
            .map(|(i, (pv, orders, price, leaf))| (id(i), metrics(pv, orders.min(pv), price, leaf)))
            .collect();
        let mut g = CompetitionGraph::new(nodes);
        for (u, v, w) in edges {
            if u != v {
                g.add_weight(&id(u), &id(v), f64::from(w)).unwrap();
            }
        }
        g
    }
}

/// Crossing weight straight from the edge list.
fn cut_of(g: &CompetitionGraph, side_a: &BTreeSet<ItemId>) -> f64 {
    let mut cut = 0.0;
    for (u, v, w) in g.edges() {
        if side_a.contains(u) != side_a.contains(v) {
            cut += w;
        }
    }
    cut
}

fn loose() -> BalanceConstraints {
    BalanceConstraints { delta_n: 0.34, delta_p: 1.0, delta_g: 1.0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn did_is_the_double_difference(a in -1e9f64..1e9, b in -1e9f64..1e9, c in -1e9f64..1e9, d in -1e9f64..1e9) {
        let tau = did_estimate(&DidInputs { y_pre_a: a, y_pre_b: b, y_post_a: c, y_post_b: d }).unwrap();
        prop_assert_eq!(tau, (c - d) - (a - b));
    }

    #[test]
    fn did_rejects_non_finite(a in -1e3f64..1e3, slot in 0usize..4) {
        let mut v = [a, a, a, a];
        v[slot] = f64::NAN;
        let inputs = DidInputs { y_pre_a: v[0], y_pre_b: v[1], y_post_a: v[2], y_post_b: v[3] };
        prop_assert!(did_estimate(&inputs).is_err());
    }

    #[test]
    fn quantile_bins_are_monotone_and_bounded(values in prop::collection::vec(-1e6f64..1e6, 1..60), bins in 1usize..12) {
        let b = quantile_bins(&values, bins);
        prop_assert_eq!(b.len(), values.len());
        for i in 0..values.len() {
            prop_assert!((b[i] as usize) < bins);
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(b[i] <= b[j]);
                }
                if values[i] == values[j] {
                    prop_assert_eq!(b[i], b[j]);
                }
            }
        }
    }

    #[test]
    fn from_side_a_recomputes_cut_and_covers(g in arb_graph(12), mask in any::<u16>()) {
        let side_a: BTreeSet<ItemId> = g.nodes.keys().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, k)| k.clone()).collect();
        let p = Partition::from_side_a(&g, side_a.clone()).unwrap();
        prop_assert_eq!(p.cut_weight, cut_of(&g, &side_a));
        prop_assert!(p.side_a.is_disjoint(&p.side_b));
        prop_assert_eq!(p.side_a.len() + p.side_b.len(), g.node_count());
        prop_assert!(p.check_covers(&g).is_ok());
    }

    #[test]
    fn kl_is_feasible_and_never_beats_exhaustive(g in arb_graph(10), seed in any::<u64>()) {
        let c = loose();
        let best = brute_force_min_cut(&g, &c).unwrap();
        let kl = kl_partition(&g, &c, seed, 20).unwrap();
        prop_assert!(c.admits(&kl.balance_report), "{:?}", kl.balance_report);
        prop_assert_eq!(kl.cut_weight, cut_of(&g, &kl.side_a));
        prop_assert!(kl.cut_weight >= best.cut_weight);
    }

    #[test]
    fn kl_is_deterministic(g in arb_graph(12), seed in any::<u64>()) {
        prop_assert_eq!(kl_partition(&g, &loose(), seed, 10).unwrap(), kl_partition(&g, &loose(), seed, 10).unwrap());
    }

    #[test]
    fn match_sets_respect_sides_and_minimize_the_gap(
        g in arb_graph(12),
        mask in any::<u16>(),
        target_mask in any::<u16>(),
        k_max in 1usize..6,
        random in any::<bool>(),
    ) {
        let side_a: BTreeSet<ItemId> = g.nodes.keys().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, k)| k.clone()).collect();
        let p = Partition::from_side_a(&g, side_a).unwrap();
        let targets: BTreeSet<ItemId> = g.nodes.keys().enumerate().filter(|(i, _)| target_mask >> i & 1 == 1).map(|(_, k)| k.clone()).collect();
        let options = MatchOptions {
            k_max,
            scheme: StratumScheme::Pooled,
            ranking: if random { Ranking::Random } else { Ranking::Ctcvr },
            smoothing: true,
            ..Default::default()
        };
        let out = match_all(&targets, &p, &g.nodes, &options);
        prop_assert_eq!(out.matches.len() + out.unmatched.len(), targets.len());
        for (t, m) in &out.matches {
            let own = p.side_of(t).unwrap();
            prop_assert!(m.k >= 1 && m.k <= k_max && m.members.len() == m.k);
            let unique: BTreeSet<&ItemId> = m.members.iter().collect();
            prop_assert_eq!(unique.len(), m.k);
            for member in &m.members {
                prop_assert!(!targets.contains(member));
                prop_assert_eq!(p.side_of(member), Some(own.opposite()));
            }
            let orders = |i: &ItemId| g.nodes[i].orders as f64;
            let mean = m.members.iter().map(orders).sum::<f64>() / m.k as f64;
            prop_assert!((mean - m.member_mean).abs() <= 1e-9 * mean.max(1.0));
            prop_assert!(((orders(t) - mean).abs() - m.pre_gap).abs() <= 1e-9 * orders(t).max(1.0));
        }
    }

    #[test]
    fn catalog_round_trips(items in prop::collection::vec(
        (any::<u32>(), -1e6f64..1e6, 1e-6f64..1e9, 1e-6f64..1e3, 0u8..5), 1..30)
    ) {
        let catalog: Vec<ItemSpec> = items
            .into_iter()
            .enumerate()
            .map(|(i, (tag, q, price, w, leaf))| ItemSpec {
                item_id: ItemId(format!("it-{i}-{tag}")),
                category_path: CategoryPath::new("root", "mid, \"quoted\"", format!("leaf {leaf}")).unwrap(),
                base_quality: q,
                price,
                base_demand_weight: w,
            })
            .collect();
        let mut buf = Vec::new();
        io::write_catalog(&mut buf, &catalog).unwrap();
        prop_assert_eq!(io::read_catalog(buf.as_slice(), Path::new("c")).unwrap(), catalog);
    }

    #[test]
    fn graph_and_partition_files_round_trip(g in arb_graph(12), mask in any::<u16>()) {
        let mut edges = Vec::new();
        io::write_edges(&mut edges, &g).unwrap();
        let mut nodes = Vec::new();
        io::write_nodes(&mut nodes, &g.nodes).unwrap();
        let back_nodes = io::read_nodes(nodes.as_slice(), Path::new("n")).unwrap();
        let back = io::read_edges(edges.as_slice(), Path::new("e"), back_nodes).unwrap();
        prop_assert_eq!(&back, &g);

        let side_a: BTreeSet<ItemId> = g.nodes.keys().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, k)| k.clone()).collect();
        let p = Partition::from_side_a(&g, side_a).unwrap();
        let mut buf = Vec::new();
        io::write_partition(&mut buf, &p).unwrap();
        prop_assert_eq!(io::read_partition(buf.as_slice(), Path::new("p"), &g).unwrap(), p);
    }

    #[test]
    fn panel_rows_round_trip(rows in prop::collection::vec((0u32..30, 0usize..3, 0usize..50, 0u64..1_000_000, 0u64..1000, 0.0f64..1e7), 0..40)) {
        let buckets = ["all", "control", "treatment"];
        let rows: Vec<PanelRow> = rows
            .into_iter()
            .map(|(day, b, item, impressions, transactions, gmv)| PanelRow {
                day,
                bucket: buckets[b].to_string(),
                item_id: id(item),
                impressions,
                transactions,
                gmv,
            })
            .collect();
        let mut buf = Vec::new();
        io::write_panel_rows(&mut buf, &rows).unwrap();
        prop_assert_eq!(io::read_panel_rows(buf.as_slice(), Path::new("p")).unwrap(), rows);

        let traffic: Vec<TrafficRow> = (0..5).map(|d| TrafficRow { day: d, bucket: "all".into(), requests: u64::from(d) * 7 }).collect();
        let mut buf = Vec::new();
        io::write_traffic(&mut buf, &traffic).unwrap();
        prop_assert_eq!(io::read_traffic(buf.as_slice(), Path::new("t")).unwrap(), traffic);
    }
}

fn market(seed: u64, slots: u32) -> MarketConfig {
    MarketConfig {
        items: generate_catalog(40, 8, seed ^ 0x55).unwrap(),
        requests_per_day: 600,
        days_pre: 2,
        days_post: 2,
        price_sensitivity_beta: 0.05,
        outside_option_utility: 0.5,
        visible_slots: slots,
        rng_seed: seed,
        ranking_noise: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn simulator_conserves_requests_and_hides_sunk_items(seed in any::<u64>(), slots in 1u32..6, sunk_mask in any::<u64>()) {
        let cfg = market(seed, slots);
        let sunk: BTreeSet<ItemId> = cfg.items.iter().enumerate().filter(|(i, _)| sunk_mask >> (i % 64) & 1 == 1).map(|(_, it)| it.item_id.clone()).collect();
        let plan = SinkingPlan::two_sided(sunk.clone(), BTreeSet::new());
        let panel = simulate(&cfg, &plan, None).unwrap();
        let all = DayWindow::new(0, 4);
        let total: u64 = panel.traffic.iter().map(|t| t.requests).sum();
        prop_assert_eq!(total, 600 * 4);
        for bucket in ["control", "treatment"] {
            let requests = panel.requests(all, Some(bucket));
            let shown: u64 = panel.rows.iter().filter(|r| r.bucket == bucket).map(|r| r.impressions).sum();
            let bought: u64 = panel.rows.iter().filter(|r| r.bucket == bucket).map(|r| r.transactions).sum();
            prop_assert!(shown <= requests * u64::from(slots));
            prop_assert!(bought <= requests);
        }
        for r in panel.rows.iter().filter(|r| r.bucket == "control") {
            prop_assert!(!sunk.contains(&r.item_id) || r.impressions == 0, "{:?}", r);
        }
        for r in &panel.rows {
            prop_assert!(r.transactions <= r.impressions);
        }
    }

    #[test]
    fn common_random_numbers_keep_traffic_and_unit_multiplier_is_a_no_op(seed in any::<u64>()) {
        let cfg = market(seed, 3);
        let targets: BTreeSet<ItemId> = cfg.items.iter().step_by(5).map(|i| i.item_id.clone()).collect();
        let base = simulate(&cfg, &SinkingPlan::full_market(), None).unwrap();
        let unit = simulate(&cfg, &SinkingPlan::full_market(), Some(&TreatmentPlan::new(targets.iter().cloned(), 1.0))).unwrap();
        prop_assert_eq!(&base, &unit);
        let cut = simulate(&cfg, &SinkingPlan::full_market(), Some(&TreatmentPlan::new(targets.iter().cloned(), 0.8))).unwrap();
        prop_assert_eq!(&base.traffic, &cut.traffic);
        let pre = DayWindow::new(0, 2);
        prop_assert_eq!(
            base.metric_total(Metric::Orders, pre, None, None),
            cut.metric_total(Metric::Orders, pre, None, None)
        );
    }
}
