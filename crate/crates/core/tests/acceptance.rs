//! Acceptance criteria 1-8. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.
//!
//! `ACCEPTANCE_ONLY=2,5` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use compiso_core::campaign::{run_campaign, CampaignReport, CampaignSpec, ReplicateRow, ScenarioSource};
use compiso_core::estimator::{did_estimate, measure_design_spillover, DidInputs};
use compiso_core::graph::{normalized_cut_capacity, CompetitionGraph, NodeMetrics};
use compiso_core::io::{self, RunConfig};
use compiso_core::partition::{brute_force_min_cut, kl_partition, BalanceConstraints, Partition};
use compiso_core::pipeline::{placebo_estimate, Method, SimulationContext};
use compiso_core::scenarios::{two_block_graph, CatalogSpec, Scenario, TargetSelection};
use compiso_core::types::{CategoryPath, ItemId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 30;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

// ---- 1 ----------------------------------------------------------------------

/// Inputs live on a 2^-10 grid with magnitude below 2^40, so every sum and
/// difference is exact in f64 and the integer computation is an exact oracle.
fn did_exactness() -> Verdict {
    const SCALE: f64 = 1024.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut exact = 0;
    let mut shift_ok = 0;
    let trials = 1000;
    let draw = |rng: &mut ChaCha8Rng| rng.random_range(-(1i64 << 40)..(1i64 << 40));
    for _ in 0..trials {
        let k = [draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng)];
        let c = draw(&mut rng);
        let inputs = |shift: i64| DidInputs {
            y_pre_a: (k[0] + shift) as f64 / SCALE,
            y_pre_b: (k[1] + shift) as f64 / SCALE,
            y_post_a: (k[2] + shift) as f64 / SCALE,
            y_post_b: (k[3] + shift) as f64 / SCALE,
        };
        let oracle = ((k[2] as i128 - k[3] as i128) - (k[0] as i128 - k[1] as i128)) as f64 / SCALE;
        let tau = did_estimate(&inputs(0)).expect("finite inputs");
        exact += usize::from(tau.to_bits() == oracle.to_bits());
        let shifted = did_estimate(&inputs(c)).expect("finite inputs");
        shift_ok += usize::from(shifted.to_bits() == tau.to_bits());
    }
    verdict(
        exact == trials && shift_ok == trials,
        format!("{exact}/{trials} exact vs integer oracle, {shift_ok}/{trials} bit-identical under shift"),
    )
}

// ---- 2 ----------------------------------------------------------------------

fn node(pv: u64, orders: u64, price: f64) -> NodeMetrics {
    NodeMetrics {
        pv,
        orders,
        gmv: orders as f64 * price,
        price,
        category_path: CategoryPath::new("d", "g", "l").expect("valid path"),
    }
}

fn random_graph(rng: &mut ChaCha8Rng) -> CompetitionGraph {
    let n = rng.random_range(4..=12usize);
    let nodes = (0..n)
        .map(|i| (ItemId(format!("r{i:02}")), node(rng.random_range(100..1000), rng.random_range(1..50), rng.random_range(10.0..100.0))))
        .collect();
    let mut g = CompetitionGraph::new(nodes);
    let p = rng.random_range(0.2..0.7);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                let w = f64::from(rng.random_range(1..10u32));
                g.add_weight(&ItemId(format!("r{i:02}")), &ItemId(format!("r{j:02}")), w).expect("valid edge");
            }
        }
    }
    g
}

/// Two internally connected clusters of equal size with mirrored metrics and
/// no edge between them.
fn two_cluster_graph(rng: &mut ChaCha8Rng) -> CompetitionGraph {
    let half = rng.random_range(2..=6usize);
    let metrics: Vec<NodeMetrics> =
        (0..half).map(|_| node(rng.random_range(100..1000), rng.random_range(1..50), rng.random_range(10.0..100.0))).collect();
    let id = |c: usize, i: usize| ItemId(format!("c{c}n{i}"));
    let nodes = (0..2).flat_map(|c| (0..half).map(move |i| (c, i))).map(|(c, i)| (id(c, i), metrics[i].clone())).collect();
    let mut g = CompetitionGraph::new(nodes);
    for c in 0..2 {
        for i in 1..half {
            g.add_weight(&id(c, i - 1), &id(c, i), f64::from(rng.random_range(1..10u32))).expect("valid edge");
        }
        for i in 0..half {
            for j in i + 2..half {
                if rng.random::<f64>() < 0.5 {
                    g.add_weight(&id(c, i), &id(c, j), f64::from(rng.random_range(1..10u32))).expect("valid edge");
                }
            }
        }
    }
    g
}

fn random_constraints(rng: &mut ChaCha8Rng) -> BalanceConstraints {
    BalanceConstraints {
        delta_n: rng.random_range(0.05..0.5),
        delta_p: rng.random_range(0.2..1.0),
        delta_g: rng.random_range(0.2..1.0),
    }
}

fn partition_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut random_ok, mut random_total) = (0, 0);
    while random_total < 200 {
        let g = random_graph(&mut rng);
        let c = random_constraints(&mut rng);
        let Ok(best) = brute_force_min_cut(&g, &c) else { continue };
        random_total += 1;
        match kl_partition(&g, &c, rng.random(), 20) {
            Ok(kl) if kl.cut_weight >= best.cut_weight && c.admits(&kl.balance_report) => random_ok += 1,
            _ => {}
        }
    }
    let (mut cluster_ok, clusters) = (0, 100);
    for _ in 0..clusters {
        let g = two_cluster_graph(&mut rng);
        let c = random_constraints(&mut rng);
        let best = brute_force_min_cut(&g, &c).expect("the cluster split is feasible");
        let kl = kl_partition(&g, &c, rng.random(), 20).expect("feasible");
        cluster_ok += usize::from(kl.cut_weight == best.cut_weight && best.cut_weight == 0.0);
    }
    verdict(
        random_ok == random_total && cluster_ok == clusters,
        format!("KL >= exhaustive on {random_ok}/{random_total} random graphs; equal on {cluster_ok}/{clusters} two-cluster graphs"),
    )
}

// ---- 3 ----------------------------------------------------------------------

fn mutual_exclusion_quality() -> Verdict {
    let fixture = two_block_graph(20, 4, 7);
    let constraints = BalanceConstraints::default();
    let capacity = |g: &CompetitionGraph, seed: u64| -> Option<f64> {
        let p = kl_partition(g, &constraints, seed, 20).ok()?;
        normalized_cut_capacity(g, &p).ok()
    };
    let shipped = (0..50).filter(|&s| capacity(&fixture, s).is_some_and(|c| c <= 0.05)).count();
    let redrawn = (0..50).filter(|&s| capacity(&two_block_graph(20, 4, 1000 + s), s).is_some_and(|c| c <= 0.05)).count();
    verdict(
        shipped >= 48 && redrawn >= 48,
        format!("capacity <= 0.05 for {shipped}/50 seeds on the shipped graph, {redrawn}/50 on redrawn graphs"),
    )
}

// ---- 4 ----------------------------------------------------------------------

fn context(scenario: &Scenario, seed: u64) -> SimulationContext {
    let (config, treatment) = scenario.instantiate(seed).expect("bundled scenario instantiates");
    SimulationContext::new(&config, &treatment, &scenario.pipeline).expect("history simulates")
}

fn cannibalization_reduction() -> Verdict {
    let scenario = Scenario::bundled("high_interference").expect("bundled");
    let (mut naive, mut isolated) = (Vec::new(), Vec::new());
    for seed in 1..=SEEDS {
        let ctx = context(&scenario, seed);
        let p = ctx.partition().expect("feasible partition");
        let m = ctx.match_targets(Method::CiCtcvr, Some(p)).expect("matching");
        let d = ctx.design(Method::CiCtcvr, Some(p), &m).expect("design");
        isolated.push(measure_design_spillover(&ctx.config, &d).expect("spillover").abs());
        let m = ctx.match_targets(Method::Naive, None).expect("matching");
        let d = ctx.design(Method::Naive, None, &m).expect("design");
        naive.push(measure_design_spillover(&ctx.config, &d).expect("spillover").abs());
    }
    let (mn, mi) = (mean(&naive), mean(&isolated));
    let ratio = if mi > 0.0 { mn / mi } else if mn > 0.0 { f64::INFINITY } else { 0.0 };
    let consistent = naive.iter().zip(&isolated).filter(|(n, i)| n > i).count();
    verdict(
        ratio >= 5.0 && consistent as f64 >= 0.9 * SEEDS as f64,
        format!("spillover non-exclusive {mn:.3}% vs exclusive {mi:.4}% (ratio {ratio:.1}x); larger in {consistent}/{SEEDS} seeds"),
    )
}

// ---- 5 ----------------------------------------------------------------------

fn matching_ordering() -> Verdict {
    let mut spec = CampaignSpec::new(vec![ScenarioSource::Bundled("scale_20k".into())], Method::ALL.to_vec(), SEEDS as u32);
    spec.base_seed = 1;
    spec.estimate = false;
    let report = run_campaign(&spec).expect("campaign runs");
    let gaps = |m: Method| -> Vec<f64> {
        report.rows.iter().filter(|r| r.method == m).filter_map(|r| r.pre_gap_relative).collect()
    };
    let failed = report.rows.iter().filter(|r| !r.ok).count();
    let [ctcvr, strat, random, naive] = Method::ALL.map(|m| gaps(m));
    let n_ok = [&ctcvr, &strat, &random, &naive].iter().all(|g| g.len() == SEEDS as usize);
    let [mc, ms, mr, mn] = [&ctcvr, &strat, &random, &naive].map(|g| mean(g));
    let (sc, sr) = (sample_std(&ctcvr), sample_std(&random));
    let passed = failed == 0 && n_ok && mc <= ms && mc < mr && mc < mn && ms < mr && ms < mn && mc < 2.0 && sc < sr;
    verdict(
        passed,
        format!(
            "gap % ctcvr {mc:.2}±{sc:.2}, stratified-random {ms:.2}±{:.2}, random {mr:.2}±{sr:.2}, naive {mn:.2}±{:.2}",
            sample_std(&strat),
            sample_std(&naive)
        ),
    )
}

// ---- 6 ----------------------------------------------------------------------

fn bias_dominance() -> Verdict {
    let scenario = Scenario::bundled("high_interference").expect("bundled");
    let mut rel = Vec::new();
    let mut wins = 0;
    for seed in 1..=SEEDS {
        let ctx = context(&scenario, seed);
        let ci = ctx.run(Method::CiCtcvr).expect("ci run").estimate;
        let naive = ctx.run(Method::Naive).expect("naive run").estimate;
        let (Some(e_ci), Some(e_nv), Some(d)) = (ci.abs_error, naive.abs_error, ci.oracle_delta_star) else {
            return verdict(false, format!("seed {seed}: oracle missing"));
        };
        rel.push(e_ci / d.abs() * 100.0);
        wins += usize::from(e_ci < e_nv);
    }
    let mre = mean(&rel);
    verdict(
        mre < 20.0 && wins as f64 >= 0.8 * SEEDS as f64,
        format!("CI mean |rel error| {mre:.1}%; CI closer to its oracle than naive in {wins}/{SEEDS} seeds"),
    )
}

// ---- 7 ----------------------------------------------------------------------

fn null_soundness() -> Verdict {
    let scenario = Scenario::bundled("high_interference").expect("bundled").with_multiplier(1.0);
    let (mut taus, mut placebos) = (Vec::new(), Vec::new());
    let mut zero_oracles = 0;
    for seed in 1..=SEEDS {
        let ctx = context(&scenario, seed);
        let run = ctx.run(Method::CiCtcvr).expect("ci run");
        zero_oracles += usize::from(run.estimate.oracle_delta_star == Some(0.0));
        taus.push(run.estimate.tau_hat);
        placebos.push(placebo_estimate(&run, &ctx.config, ctx.options.metric).expect("placebo"));
    }
    let se = |xs: &[f64]| sample_std(xs) / (xs.len() as f64).sqrt();
    let (mt, st) = (mean(&taus), se(&taus));
    let (mp, sp) = (mean(&placebos), se(&placebos));
    verdict(
        zero_oracles == SEEDS as usize && mt.abs() <= 2.0 * st && mp.abs() <= 2.0 * sp,
        format!("Δ* = 0 on {zero_oracles}/{SEEDS}; τ̂ mean {mt:.1} (SE {st:.1}); placebo mean {mp:.1} (SE {sp:.1})"),
    )
}

// ---- 8 ----------------------------------------------------------------------

fn small_scenario() -> Scenario {
    let mut s = Scenario::bundled("high_interference").expect("bundled");
    s.name = "determinism".into();
    s.catalog = CatalogSpec { n_items: 200, n_categories: 20, ..s.catalog };
    s.requests_per_day = 10_000;
    s.days_pre = 4;
    s.days_post = 3;
    s.targets = TargetSelection { leaf_fraction: 0.3, item_fraction: 0.6 };
    s.pipeline.constraints = BalanceConstraints { delta_n: 0.1, delta_p: 0.3, delta_g: 0.3 };
    s
}

fn determinism_and_round_trip() -> Verdict {
    let scenario = small_scenario();
    let mut problems: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            problems.push(what.to_string());
        }
    };

    let (a, b) = (context(&scenario, 9), context(&scenario, 9));
    check(a.history == b.history, "history panel");
    check(a.graph == b.graph, "graph");
    check(a.partition().ok() == b.partition().ok(), "partition");
    for m in Method::ALL {
        let (ra, rb) = (a.run(m), b.run(m));
        match (ra, rb) {
            (Ok(ra), Ok(rb)) => {
                check(ra.matches == rb.matches, "match sets");
                check(ra.experiment == rb.experiment, "experiment panel");
                check(ra.estimate.tau_hat.to_bits() == rb.estimate.tau_hat.to_bits(), "estimate");
            }
            _ => check(false, "pipeline run failed"),
        }
    }
    let mut spec = CampaignSpec::new(vec![ScenarioSource::Inline(Box::new(scenario.clone()))], Method::ALL.to_vec(), 2);
    spec.base_seed = 3;
    let (ca, cb) = (run_campaign(&spec), run_campaign(&spec));
    match (ca, cb) {
        (Ok(ca), Ok(cb)) => {
            let bytes = |r: &CampaignReport| serde_json::to_vec_pretty(r).expect("serializes");
            check(bytes(&ca) == bytes(&cb), "campaign report bytes");
            check(ca.verify().is_ok(), "report summaries recompute");
            round_trips(&a, &ca, &scenario, &spec, &mut check);
        }
        _ => check(false, "campaign failed"),
    }
    let detail = if problems.is_empty() {
        "panels, graph, partition, matches, estimates and reports identical across runs; all formats round-trip".to_string()
    } else {
        format!("mismatched: {}", problems.join(", "))
    };
    verdict(problems.is_empty(), detail)
}

fn round_trips(
    ctx: &SimulationContext,
    report: &CampaignReport,
    scenario: &Scenario,
    spec: &CampaignSpec,
    check: &mut dyn FnMut(bool, &str),
) {
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();

    io::save_catalog(&d.join("catalog.jsonl"), &ctx.config.items).expect("write");
    check(io::load_catalog(&d.join("catalog.jsonl")).ok().as_deref() == Some(&ctx.config.items[..]), "catalog");

    io::save_panel(&d.join("history"), &ctx.history, &ctx.config, None).expect("write");
    check(io::load_panel(&d.join("history")).ok().as_ref() == Some(&ctx.history), "panel + request log");

    let run = ctx.run(Method::CiCtcvr).expect("run");
    io::save_panel(&d.join("experiment"), &run.experiment, &ctx.config, Some(&ctx.treatment)).expect("write");
    check(io::load_panel(&d.join("experiment")).ok().as_ref() == Some(&run.experiment), "experiment panel");

    io::save_graph(&d.join("graph"), &ctx.graph).expect("write");
    check(io::load_graph(&d.join("graph")).ok().as_ref() == Some(&ctx.graph), "graph");

    let partition: &Partition = ctx.partition().expect("partition");
    io::save_partition(&d.join("partition.csv"), partition).expect("write");
    check(io::load_partition(&d.join("partition.csv"), &ctx.graph).ok().as_ref() == Some(partition), "partition file");

    io::save_matches(&d.join("matches.csv"), &run.matches).expect("write");
    let back = io::load_matches(&d.join("matches.csv"), &ctx.history_metrics, ctx.options.matching.metric);
    check(back.map(|m| m.matches).ok().as_ref() == Some(&run.matches.matches), "matches file");

    let config = RunConfig {
        market: ctx.config.clone(),
        treatment: ctx.treatment.clone(),
        sinking: Some(run.design.sinking.clone()),
        pipeline: ctx.options.clone(),
    };
    io::write_json(&d.join("config.json"), &config).expect("write");
    check(RunConfig::load(&d.join("config.json")).ok().as_ref() == Some(&config), "run config");

    io::write_json(&d.join("scenario.json"), scenario).expect("write");
    check(io::read_json::<Scenario>(&d.join("scenario.json")).ok().as_ref() == Some(scenario), "scenario");

    io::write_json(&d.join("spec.json"), spec).expect("write");
    check(CampaignSpec::load(&d.join("spec.json")).ok().as_ref() == Some(spec), "campaign spec");

    report.write(&d.join("report")).expect("write");
    check(io::read_json::<CampaignReport>(&d.join("report/report.json")).ok().as_ref() == Some(report), "report json");
    let rows: Option<Vec<ReplicateRow>> = csv::Reader::from_path(d.join("report/rows.csv"))
        .ok()
        .and_then(|mut r| r.deserialize().collect::<Result<Vec<_>, _>>().ok());
    check(rows.as_ref() == Some(&report.rows), "rows csv");

}

// ---- driver -------------------------------------------------------------------

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    run: fn() -> Verdict,
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let only: Option<BTreeSet<u8>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria = [
        Criterion { id: 1, name: "DID arithmetic exactness", budget: Duration::from_secs(1), run: did_exactness },
        Criterion { id: 2, name: "partition oracle equivalence", budget: Duration::from_secs(30), run: partition_oracle },
        Criterion { id: 3, name: "mutual-exclusion quality", budget: Duration::from_secs(60), run: mutual_exclusion_quality },
        Criterion { id: 4, name: "cannibalization reduction", budget: Duration::from_secs(300), run: cannibalization_reduction },
        Criterion { id: 5, name: "matching-method ordering", budget: Duration::from_secs(600), run: matching_ordering },
        Criterion { id: 6, name: "estimator bias dominance", budget: Duration::from_secs(600), run: bias_dominance },
        Criterion { id: 7, name: "null-effect soundness", budget: Duration::from_secs(300), run: null_soundness },
        Criterion { id: 8, name: "determinism and round-trip", budget: Duration::from_secs(120), run: determinism_and_round_trip },
    ];
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let start = Instant::now();
        let v = (c.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let passed = v.passed && in_time;
        failed += usize::from(!passed);
        let timing = format!("{:.1}s of {}s", elapsed.as_secs_f64(), c.budget.as_secs());
        let late = if in_time { "" } else { " [over time budget]" };
        println!(
            "{} criterion {}: {}: {} ({timing}){late}",
            if passed { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
