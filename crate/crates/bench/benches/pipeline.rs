use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use compiso_bench::{scenario, scenario_with_requests, targets_of, two_block};
use compiso_core::graph::{build_graph, node_metrics};
use compiso_core::market::{simulate, simulate_with, SimOptions, SinkingPlan};
use compiso_core::matching::match_all;
use compiso_core::partition::{kl_partition, BalanceConstraints};
use compiso_core::pipeline::{partition_seed, Method, PipelineOptions};

fn bench_simulate(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    for requests in [10_000u32, 40_000] {
        let (config, plan) = scenario_with_requests("high_interference", requests);
        let days = u64::from(config.days_pre + config.days_post);
        group.throughput(Throughput::Elements(u64::from(requests) * days));
        group.bench_with_input(BenchmarkId::from_parameter(requests), &config, |b, cfg| {
            b.iter(|| simulate(black_box(cfg), &SinkingPlan::full_market(), Some(&plan)).unwrap())
        });
    }
    group.finish();
}

fn bench_kl(c: &mut Criterion) {
    let mut group = c.benchmark_group("kl_partition");
    group.sample_size(10);
    let constraints = BalanceConstraints::default();
    for block in [25usize, 100, 250] {
        let graph = two_block(block);
        group.bench_with_input(BenchmarkId::new("two_block", 2 * block), &graph, |b, g| {
            b.iter(|| kl_partition(black_box(g), &constraints, 7, 20).unwrap())
        });
    }
    let (config, _) = scenario_with_requests("scale_5k", 5_000);
    let window = config.pre_window();
    let history = simulate_with(&config, &SinkingPlan::full_market(), None, &SimOptions { request_log: Some(window) }).unwrap();
    let graph = build_graph(&history, &config.items, window).unwrap();
    group.bench_function(BenchmarkId::new("scale_5k", graph.node_count()), |b| {
        b.iter(|| kl_partition(black_box(&graph), &constraints, 7, 20).unwrap())
    });
    group.finish();
}

fn bench_match(c: &mut Criterion) {
    let (config, plan) = scenario("high_interference");
    let options = PipelineOptions::default();
    let window = config.pre_window();
    let history = simulate_with(&config, &SinkingPlan::full_market(), None, &SimOptions { request_log: Some(window) }).unwrap();
    let graph = build_graph(&history, &config.items, window).unwrap();
    let metrics = node_metrics(&history, &config.items, window).unwrap();
    let partition = compiso_core::partition::kl_partition_best_of(
        &graph,
        &options.constraints,
        partition_seed(config.rng_seed),
        options.kl_passes,
        options.kl_restarts,
    )
    .unwrap();
    let targets = targets_of(&plan);
    let mut group = c.benchmark_group("match_all");
    for method in [Method::CiCtcvr, Method::CiRandom] {
        let opts = method.match_options(&options.matching, 1);
        group.bench_function(method.label(), |b| {
            b.iter(|| match_all(black_box(&targets), &partition, &metrics, &opts))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_simulate, bench_kl, bench_match);
criterion_main!(benches);
