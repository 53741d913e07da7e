use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use compiso_core::campaign::{run_campaign_to_disk, CampaignReport, CampaignSpec};
use compiso_core::estimator::EffectEstimate;
use compiso_core::graph::{self as graph_mod, node_metrics, normalized_cut_capacity, CompetitionGraph};
use compiso_core::io::{self, RunConfig};
use compiso_core::market::{simulate_with, SimOptions, SinkingPlan};
use compiso_core::partition::{kl_partition_best_of, validate_mutual_exclusion, Partition};
use compiso_core::pipeline::{partition_seed, placebo_estimate, Method, PipelineOptions, SimulationContext};
use compiso_core::scenarios::Scenario;
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::Global;

const CONFIG_FILE: &str = "config.json";
const CATALOG_FILE: &str = "catalog.jsonl";
const PANEL_DIR: &str = "panel";
const GRAPH_DIR: &str = "graph";
const PARTITION_FILE: &str = "partition.csv";
const MATCHES_FILE: &str = "matches.csv";
const ESTIMATES_FILE: &str = "estimates.json";

fn require(path: &Path, phase: &str, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::PhaseOrder(format!("{what} not found at {}; run `compiso {phase}` first", path.display())))
    }
}

/// Writes to stdout; a closed pipe is not an error.
fn say(text: &str) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn emit(g: &Global, phase: &str, diagnostics: &serde_json::Value) -> CliResult<()> {
    io::write_json(&g.output.join("diagnostics").join(format!("{phase}.json")), diagnostics)?;
    say(&serde_json::to_string_pretty(diagnostics)?)
}

fn apply_metric(options: &mut PipelineOptions, g: &Global) {
    if let Some(m) = g.metric {
        options.metric = m;
        options.matching.metric = m;
    }
}

/// Run config from `--config`, or the copy `simulate` left in the workdir.
fn load_config(g: &Global, phase: &str) -> CliResult<RunConfig> {
    let path = g.config.clone().unwrap_or_else(|| g.output.join(CONFIG_FILE));
    if g.config.is_none() {
        require(&path, "simulate", "run config")?;
    }
    let mut config = RunConfig::load(&path)?;
    apply_metric(&mut config.pipeline, g);
    if let Some(seed) = g.seed {
        if phase == "simulate" {
            config.market.rng_seed = seed;
        }
    }
    Ok(config)
}

fn scenario_config(name: &str, seed: u64) -> CliResult<RunConfig> {
    let path = Path::new(name);
    let scenario = if path.exists() { io::read_json::<Scenario>(path)? } else { Scenario::bundled(name)? };
    let (market, treatment) = scenario.instantiate(seed)?;
    Ok(RunConfig { market, treatment, sinking: None, pipeline: scenario.pipeline })
}

pub fn simulate(g: &Global, scenario: Option<&str>, untreated: bool) -> CliResult<()> {
    let mut config = match (&g.config, scenario) {
        (Some(_), Some(_)) => return Err(CliError::Usage("pass either --config or --scenario, not both".into())),
        (Some(_), None) => load_config(g, "simulate")?,
        (None, Some(name)) => scenario_config(name, g.seed.unwrap_or(0))?,
        (None, None) => return Err(CliError::Usage("simulate needs --config or --scenario".into())),
    };
    apply_metric(&mut config.pipeline, g);
    config.validate()?;
    let sinking = config.sinking.clone().unwrap_or_else(SinkingPlan::full_market);
    let treatment = (!untreated).then_some(&config.treatment);
    let window = config.pipeline.graph_window(&config.market);
    let panel = simulate_with(&config.market, &sinking, treatment, &SimOptions { request_log: Some(window) })?;

    fs::create_dir_all(&g.output)?;
    io::write_json(&g.output.join(CONFIG_FILE), &config)?;
    io::save_catalog(&g.output.join(CATALOG_FILE), &config.market.items)?;
    io::save_panel(&g.output.join(PANEL_DIR), &panel, &config.market, treatment)?;
    emit(
        g,
        "simulate",
        &json!({
            "phase": "simulate",
            "seed": config.market.rng_seed,
            "items": config.market.items.len(),
            "targets": config.treatment.target_items.len(),
            "days": panel.days,
            "buckets": panel.buckets(),
            "requests": panel.request_log.as_ref().map(|l| l.len()),
            "treated": treatment.is_some(),
        }),
    )
}

fn history_graph(g: &Global, panel_dir: Option<PathBuf>) -> CliResult<CompetitionGraph> {
    let config = load_config(g, "build-graph")?;
    let dir = panel_dir.unwrap_or_else(|| g.output.join(PANEL_DIR));
    require(&dir.join(io::PANEL_FILE), "simulate", "panel")?;
    let panel = io::load_panel(&dir)?;
    if panel.request_log.is_none() {
        return Err(CliError::PhaseOrder(format!("{} has no requests.csv; rerun `compiso simulate`", dir.display())));
    }
    let window = config.pipeline.graph_window(&config.market);
    Ok(graph_mod::build_graph(&panel, &config.market.items, window)?)
}

pub fn build_graph(g: &Global, panel_dir: Option<PathBuf>) -> CliResult<()> {
    let graph = history_graph(g, panel_dir)?;
    io::save_graph(&g.output.join(GRAPH_DIR), &graph)?;
    emit(
        g,
        "build-graph",
        &json!({
            "phase": "build-graph",
            "nodes": graph.node_count(),
            "edges": graph.edge_count(),
            "total_weight": graph.total_weight(),
        }),
    )
}

/// Partition options come from the run config when one exists; a bare
/// graph directory is partitioned with defaults.
fn partition_options(g: &Global) -> CliResult<(PipelineOptions, u64)> {
    let path = g.config.clone().unwrap_or_else(|| g.output.join(CONFIG_FILE));
    if path.exists() || g.config.is_some() {
        let config = load_config(g, "partition")?;
        Ok((config.pipeline, config.market.rng_seed))
    } else {
        Ok((PipelineOptions::default(), g.seed.unwrap_or(0)))
    }
}

pub fn partition(g: &Global, graph_dir: Option<PathBuf>, epsilon: Option<f64>) -> CliResult<()> {
    let dir = graph_dir.unwrap_or_else(|| g.output.join(GRAPH_DIR));
    require(&dir.join(io::EDGES_FILE), "build-graph", "competition graph")?;
    let graph = io::load_graph(&dir)?;
    let (options, seed) = partition_options(g)?;
    let partition =
        kl_partition_best_of(&graph, &options.constraints, partition_seed(seed), options.kl_passes, options.kl_restarts)?;
    fs::create_dir_all(&g.output)?;
    io::save_partition(&g.output.join(PARTITION_FILE), &partition)?;
    let epsilon = epsilon.unwrap_or(options.epsilon_mutual);
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(CliError::Validation(format!("epsilon must be in [0, 1], got {epsilon}")));
    }
    let report = validate_mutual_exclusion(&graph, &partition, epsilon)?;
    emit(
        g,
        "partition",
        &json!({
            "phase": "partition",
            "seed": seed,
            "side_a": partition.side_a.len(),
            "side_b": partition.side_b.len(),
            "cut_weight": partition.cut_weight,
            "balance": partition.balance_report,
            "mutual_exclusion": report,
        }),
    )
}

fn load_partition_for(g: &Global, graph: &CompetitionGraph, path: Option<PathBuf>) -> CliResult<Partition> {
    let path = path.unwrap_or_else(|| g.output.join(PARTITION_FILE));
    require(&path, "partition", "partition")?;
    Ok(io::load_partition(&path, graph)?)
}

fn load_graph_dir(g: &Global) -> CliResult<CompetitionGraph> {
    let dir = g.output.join(GRAPH_DIR);
    require(&dir.join(io::EDGES_FILE), "build-graph", "competition graph")?;
    Ok(io::load_graph(&dir)?)
}

fn gap_diagnostics(outcome: &compiso_core::matching::MatchOutcome) -> serde_json::Value {
    json!({
        "matched": outcome.matches.len(),
        "unmatched": outcome.unmatched,
        "aggregate_gap": outcome.aggregate_gap(),
        "mean_pre_gap_relative": outcome.mean_pre_gap_relative(),
    })
}

pub fn match_targets(g: &Global, method: Method, partition_path: Option<PathBuf>) -> CliResult<()> {
    let config = load_config(g, "match")?;
    let graph = load_graph_dir(g)?;
    let partition = if method.is_isolated() || partition_path.is_some() {
        Some(load_partition_for(g, &graph, partition_path)?)
    } else {
        None
    };
    let dir = g.output.join(PANEL_DIR);
    require(&dir.join(io::PANEL_FILE), "simulate", "panel")?;
    let panel = io::load_panel(&dir)?;
    let history = node_metrics(&panel, &config.market.items, config.market.pre_window())?;
    let options = method.match_options(&config.pipeline.matching, config.market.rng_seed);
    let targets = &config.treatment.target_items;
    let outcome = match (&partition, method.is_isolated()) {
        (Some(p), true) => compiso_core::matching::match_all(targets, p, &history, &options),
        _ => compiso_core::matching::match_all_unpartitioned(targets, &history, &options),
    };
    io::save_matches(&g.output.join(MATCHES_FILE), &outcome)?;
    let mut diag = gap_diagnostics(&outcome);
    diag["phase"] = json!("match");
    diag["method"] = json!(method);
    emit(g, "match", &diag)
}

#[derive(Debug, Serialize)]
struct MethodEstimate {
    estimate: EffectEstimate,
    placebo_tau_hat: Option<f64>,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
struct EstimateReport {
    seed: u64,
    metric: compiso_core::Metric,
    estimates: Vec<MethodEstimate>,
}

pub fn estimate(
    g: &Global,
    methods: &[Method],
    partition_path: Option<PathBuf>,
    matches_path: Option<PathBuf>,
) -> CliResult<()> {
    let config = load_config(g, "estimate")?;
    let graph = load_graph_dir(g)?;
    let needs_partition = methods.iter().any(|m| m.is_isolated());
    let partition = if needs_partition { Some(load_partition_for(g, &graph, partition_path)?) } else { None };
    let ctx = SimulationContext::new(&config.market, &config.treatment, &config.pipeline)?;
    let mut estimates = Vec::new();
    for &method in methods {
        let part = if method.is_isolated() { partition.clone() } else { None };
        let matches = if method == Method::CiCtcvr {
            let path = matches_path.clone().unwrap_or_else(|| g.output.join(MATCHES_FILE));
            require(&path, "match", "match sets")?;
            io::load_matches(&path, &ctx.history_metrics, config.pipeline.matching.metric)?
        } else {
            ctx.match_targets(method, part.as_ref())?
        };
        let design = ctx.design(method, part.as_ref(), &matches)?;
        let warnings = design.warnings.clone();
        let run = ctx.execute(method, part, matches, design)?;
        let placebo = placebo_estimate(&run, &config.market, config.pipeline.metric).ok();
        estimates.push(MethodEstimate { estimate: run.estimate, placebo_tau_hat: placebo, warnings });
    }
    let report = EstimateReport { seed: ctx.seed(), metric: config.pipeline.metric, estimates };
    io::write_json(&g.output.join(ESTIMATES_FILE), &report)?;
    let capacity = partition.as_ref().map(|p| normalized_cut_capacity(&graph, p)).transpose()?;
    emit(
        g,
        "estimate",
        &json!({
            "phase": "estimate",
            "cut_capacity": capacity,
            "report": report,
        }),
    )
}

pub fn campaign(g: &Global) -> CliResult<()> {
    let path = g.config.as_ref().ok_or_else(|| CliError::Usage("campaign needs --config <spec.json>".into()))?;
    if !path.exists() {
        return Err(CliError::Validation(format!("campaign spec {} does not exist", path.display())));
    }
    let mut spec = CampaignSpec::load(path)?;
    if g.output != Path::new("compiso-out") {
        spec.output_dir = g.output.clone();
    }
    if let Some(seed) = g.seed {
        spec.base_seed = seed;
    }
    if let Some(metric) = g.metric {
        spec.metric = metric;
    }
    if let Some(workers) = g.workers {
        spec.workers = workers;
    }
    let report = run_campaign_to_disk(&spec)?;
    print_table(&report)?;
    let failed = report.rows.iter().filter(|r| !r.ok).count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} rows failed; see rows.csv", report.rows.len());
    }
    Ok(())
}

fn print_table(report: &CampaignReport) -> CliResult<()> {
    let lines: Vec<String> = report.table().iter().map(|l| l.join("\t")).collect();
    say(&lines.join("\n"))
}

pub fn report(g: &Global, input: &Path) -> CliResult<()> {
    if !input.exists() {
        return Err(CliError::PhaseOrder(format!("{} not found; run `compiso campaign` first", input.display())));
    }
    let report: CampaignReport = io::read_json(input)?;
    report.verify()?;
    report.write(&g.output)?;
    print_table(&report)
}
