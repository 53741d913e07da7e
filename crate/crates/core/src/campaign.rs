//! Multi-seed campaigns: replicates × methods over one or more scenarios,
//! aggregated into mean ± standard deviation summaries.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, node_metrics, normalized_cut_capacity, CompetitionGraph, NodeMetrics};
use crate::io;
use crate::matching::{match_all, match_all_unpartitioned, MatchOutcome};
use crate::partition::{kl_partition_best_of, Partition};
use crate::pipeline::{Method, PipelineOptions, SimulationContext};
use crate::scenarios::Scenario;
use crate::types::{derive_seed, DayWindow, ItemId, Metric};

const PANEL_PARTITION_STREAM: u64 = 0x7061_6e6c;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Observed history panels evaluated without simulation. Only the matching
/// stage runs, so rows carry gaps but no effect estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSource {
    pub name: String,
    /// JSONL catalog.
    pub catalog: PathBuf,
    /// Directory holding `panel.csv`, `traffic.csv` and `requests.csv`.
    pub history: PathBuf,
    pub targets: Vec<ItemId>,
    #[serde(default)]
    pub pipeline: PipelineOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioSource {
    /// One of [`Scenario::BUNDLED`].
    Bundled(String),
    /// Path to a scenario JSON file.
    File(PathBuf),
    Inline(Box<Scenario>),
    Panels(PanelSource),
}

impl ScenarioSource {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            ScenarioSource::File(p) => join(p),
            ScenarioSource::Panels(src) => {
                join(&mut src.catalog);
                join(&mut src.history);
            }
            _ => {}
        }
    }
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_scenarios() -> Vec<ScenarioSource> {
    ["scale_1k", "scale_5k", "scale_20k"].map(|s| ScenarioSource::Bundled(s.into())).to_vec()
}

fn default_true() -> bool {
    true
}

fn default_output() -> PathBuf {
    PathBuf::from("campaign-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    /// Scenarios form the columns of the summary table.
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<ScenarioSource>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub replicates: u32,
    /// Replicate `r` runs with seed `base_seed + r`.
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    /// When false only the design stage runs (partition and matching).
    #[serde(default = "default_true")]
    pub estimate: bool,
    /// Overrides each scenario's price multiplier.
    #[serde(default)]
    pub price_multiplier: Option<f64>,
}

impl CampaignSpec {
    pub fn new(scenarios: Vec<ScenarioSource>, methods: Vec<Method>, replicates: u32) -> Self {
        CampaignSpec {
            scenarios,
            methods,
            replicates,
            base_seed: 0,
            metric: Metric::Orders,
            output_dir: default_output(),
            workers: 0,
            estimate: true,
            price_multiplier: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidConfig("replicates must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("methods must be nonempty".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::InvalidConfig("scenarios must be nonempty".into()));
        }
        let unique: BTreeSet<Method> = self.methods.iter().copied().collect();
        if unique.len() != self.methods.len() {
            return Err(Error::InvalidConfig("methods must not repeat".into()));
        }
        if let Some(m) = self.price_multiplier {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::InvalidConfig(format!("price_multiplier must be positive, got {m}")));
            }
        }
        Ok(())
    }

    /// Reads a spec; relative scenario paths resolve against its directory.
    pub fn load(path: &Path) -> Result<CampaignSpec> {
        let mut spec: CampaignSpec = io::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut spec.scenarios {
            s.resolve(base);
        }
        spec.validate().map_err(|e| Error::Schema { path: path.display().to_string(), message: e.to_string() })?;
        Ok(spec)
    }
}

/// One (scenario, replicate, method) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub scale: String,
    pub replicate: u32,
    pub seed: u64,
    pub method: Method,
    pub ok: bool,
    pub error: Option<String>,
    /// Aggregate relative pre-period gap (percent) between targets and
    /// their match sets.
    pub pre_gap_relative: Option<f64>,
    /// Mean of the per-target relative gaps (percent).
    pub mean_target_gap_relative: Option<f64>,
    pub cut_capacity: Option<f64>,
    pub n_a: Option<usize>,
    pub n_b: Option<usize>,
    pub unmatched: Option<usize>,
    pub tau_hat: Option<f64>,
    pub oracle_delta_star: Option<f64>,
    pub abs_error: Option<f64>,
    pub rel_error: Option<f64>,
}

impl ReplicateRow {
    fn empty(scale: &str, replicate: u32, seed: u64, method: Method) -> Self {
        ReplicateRow {
            scale: scale.to_string(),
            replicate,
            seed,
            method,
            ok: true,
            error: None,
            pre_gap_relative: None,
            mean_target_gap_relative: None,
            cut_capacity: None,
            n_a: None,
            n_b: None,
            unmatched: None,
            tau_hat: None,
            oracle_delta_star: None,
            abs_error: None,
            rel_error: None,
        }
    }

    fn failed(scale: &str, replicate: u32, seed: u64, method: Method, err: &Error) -> Self {
        ReplicateRow { ok: false, error: Some(err.to_string()), ..Self::empty(scale, replicate, seed, method) }
    }
}

/// Mean and sample standard deviation over the rows where a value exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: Option<f64>,
    /// Zero by convention when `n == 1`.
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat { n, mean: None, std: None };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Stat { n, mean: Some(mean), std: Some(std) }
    }

    /// `mean ± std` with two decimals, or `n/a`.
    pub fn display(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
            _ => "n/a".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub scale: String,
    pub method: Method,
    pub replicates: usize,
    pub failed: usize,
    /// Fewer than two successful replicates; the std is not informative.
    pub degenerate: bool,
    pub pre_gap_relative: Stat,
    pub tau_hat: Stat,
    pub abs_error: Stat,
    pub rel_error: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub tool: String,
    pub version: String,
    pub base_seed: u64,
    pub replicates: u32,
    pub note: String,
}

impl Environment {
    fn stamp(spec: &CampaignSpec) -> Self {
        Environment {
            tool: "compiso".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            base_seed: spec.base_seed,
            replicates: spec.replicates,
            note: "simulated desk-scale market; scale_Nk scenarios target roughly N thousand daily orders".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub schema_version: u32,
    pub environment: Environment,
    pub spec: CampaignSpec,
    pub rows: Vec<ReplicateRow>,
    pub summaries: Vec<MethodSummary>,
    /// True when any row failed.
    pub partial: bool,
}

/// Summaries per (scale, method), in first-appearance order of the rows.
pub fn summarize(rows: &[ReplicateRow]) -> Vec<MethodSummary> {
    let mut keys: Vec<(&str, Method)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.scale.as_str(), r.method)) {
            keys.push((r.scale.as_str(), r.method));
        }
    }
    keys.into_iter()
        .map(|(scale, method)| {
            let group: Vec<&ReplicateRow> = rows.iter().filter(|r| r.scale == scale && r.method == method).collect();
            let ok: Vec<&ReplicateRow> = group.iter().copied().filter(|r| r.ok).collect();
            let stat = |f: fn(&ReplicateRow) -> Option<f64>| Stat::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                scale: scale.to_string(),
                method,
                replicates: group.len(),
                failed: group.len() - ok.len(),
                degenerate: ok.len() < 2,
                pre_gap_relative: stat(|r| r.pre_gap_relative),
                tau_hat: stat(|r| r.tau_hat),
                abs_error: stat(|r| r.abs_error),
                rel_error: stat(|r| r.rel_error),
            }
        })
        .collect()
}

impl CampaignReport {
    pub fn from_rows(spec: &CampaignSpec, rows: Vec<ReplicateRow>) -> Self {
        CampaignReport {
            schema_version: REPORT_SCHEMA_VERSION,
            environment: Environment::stamp(spec),
            spec: spec.clone(),
            partial: rows.iter().any(|r| !r.ok),
            summaries: summarize(&rows),
            rows,
        }
    }

    /// Checks that the stored summaries equal a recomputation from the rows.
    pub fn verify(&self) -> Result<()> {
        if summarize(&self.rows) != self.summaries {
            return Err(Error::InvalidInput("report summaries do not match its rows".into()));
        }
        Ok(())
    }

    pub fn summary(&self, scale: &str, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.scale == scale && s.method == method)
    }

    pub fn scales(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.summaries {
            if !out.contains(&s.scale) {
                out.push(s.scale.clone());
            }
        }
        out
    }

    fn methods(&self) -> Vec<Method> {
        let mut out = Vec::new();
        for s in &self.summaries {
            if !out.contains(&s.method) {
                out.push(s.method);
            }
        }
        out
    }

    /// Methods × scales matrix of `mean ± std` pre-period gap (percent).
    pub fn table(&self) -> Vec<Vec<String>> {
        let scales = self.scales();
        let mut header = vec!["method".to_string()];
        header.extend(scales.iter().map(|s| format!("{s} pre-period gap (%)")));
        let mut out = vec![header];
        for method in self.methods() {
            let mut line = vec![method.label().to_string()];
            for scale in &scales {
                line.push(self.summary(scale, method).map_or("n/a".into(), |s| s.pre_gap_relative.display()));
            }
            out.push(line);
        }
        out
    }

    /// Writes `report.json`, `rows.csv`, `summary.csv`, `table.csv`,
    /// `gap_plot.csv` and `bias_plot.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        io::write_json(&dir.join("report.json"), self)?;

        let mut w = csv::Writer::from_path(dir.join("rows.csv"))?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;

        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        let mut header = vec!["scale", "method", "replicates", "failed", "degenerate"];
        let fields = ["pre_gap_relative", "tau_hat", "abs_error", "rel_error"];
        let names: Vec<String> = fields.iter().flat_map(|f| ["n", "mean", "std"].map(|s| format!("{f}_{s}"))).collect();
        header.extend(names.iter().map(String::as_str));
        w.write_record(&header)?;
        for s in &self.summaries {
            let mut rec = vec![s.scale.clone(), s.method.label().into(), s.replicates.to_string(), s.failed.to_string(), s.degenerate.to_string()];
            for stat in [s.pre_gap_relative, s.tau_hat, s.abs_error, s.rel_error] {
                rec.extend([stat.n.to_string(), fmt(stat.mean), fmt(stat.std)]);
            }
            w.write_record(&rec)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("table.csv"))?;
        for line in self.table() {
            w.write_record(&line)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("gap_plot.csv"))?;
        w.write_record(["scale", "method", "n", "mean_gap_pct", "std_gap_pct"])?;
        for s in &self.summaries {
            let g = s.pre_gap_relative;
            w.write_record([s.scale.clone(), s.method.label().into(), g.n.to_string(), fmt(g.mean), fmt(g.std)])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("bias_plot.csv"))?;
        w.write_record(["scale", "method", "replicate", "tau_hat", "oracle_delta_star", "error"])?;
        for r in self.rows.iter().filter(|r| r.tau_hat.is_some()) {
            let err = r.tau_hat.zip(r.oracle_delta_star).map(|(t, d)| t - d);
            w.write_record([
                r.scale.clone(),
                r.method.label().into(),
                r.replicate.to_string(),
                fmt(r.tau_hat),
                fmt(r.oracle_delta_star),
                fmt(err),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

enum Prepared {
    Simulated(Scenario),
    Panels(PanelData),
}

struct PanelData {
    name: String,
    targets: BTreeSet<ItemId>,
    options: PipelineOptions,
    graph: CompetitionGraph,
    history: std::collections::BTreeMap<ItemId, NodeMetrics>,
}

impl Prepared {
    fn name(&self) -> &str {
        match self {
            Prepared::Simulated(s) => &s.name,
            Prepared::Panels(p) => &p.name,
        }
    }
}

fn prepare(source: &ScenarioSource, metric: Metric) -> Result<Prepared> {
    let with_metric = |mut options: PipelineOptions| {
        options.metric = metric;
        options.matching.metric = metric;
        options
    };
    match source {
        ScenarioSource::Bundled(name) => Scenario::bundled(name).map(Prepared::Simulated),
        ScenarioSource::File(path) => io::read_json::<Scenario>(path).map(Prepared::Simulated),
        ScenarioSource::Inline(s) => Ok(Prepared::Simulated((**s).clone())),
        ScenarioSource::Panels(src) => {
            let catalog = io::load_catalog(&src.catalog)?;
            let panel = io::load_panel(&src.history)?;
            let window = DayWindow::new(0, panel.days);
            let graph = build_graph(&panel, &catalog, window)?;
            let history = node_metrics(&panel, &catalog, window)?;
            let targets: BTreeSet<ItemId> = src.targets.iter().cloned().collect();
            if targets.is_empty() {
                return Err(Error::InvalidConfig(format!("panel source `{}` has no targets", src.name)));
            }
            if let Some(t) = targets.iter().find(|t| !history.contains_key(*t)) {
                return Err(Error::UnknownItem(t.clone()));
            }
            Ok(Prepared::Panels(PanelData {
                name: src.name.clone(),
                targets,
                options: with_metric(src.pipeline.clone()),
                graph,
                history,
            }))
        }
    }
    .map(|p| match p {
        Prepared::Simulated(mut s) => {
            s.pipeline = with_metric(s.pipeline);
            Prepared::Simulated(s)
        }
        other => other,
    })
}

fn gap_fields(row: &mut ReplicateRow, matches: &MatchOutcome) {
    row.pre_gap_relative = matches.aggregate_gap().relative;
    row.mean_target_gap_relative = matches.mean_pre_gap_relative();
    row.unmatched = Some(matches.unmatched.len());
}

fn simulated_rows(spec: &CampaignSpec, scenario: &Scenario, replicate: u32) -> Vec<ReplicateRow> {
    let seed = spec.base_seed + u64::from(replicate);
    let name = scenario.name.as_str();
    let ctx = scenario.instantiate(seed).and_then(|(config, mut treatment)| {
        if let Some(m) = spec.price_multiplier {
            treatment.price_multiplier = m;
        }
        SimulationContext::new(&config, &treatment, &scenario.pipeline)
    });
    let ctx = match ctx {
        Ok(ctx) => ctx,
        Err(e) => return spec.methods.iter().map(|m| ReplicateRow::failed(name, replicate, seed, *m, &e)).collect(),
    };
    spec.methods
        .iter()
        .map(|&method| {
            let result = if spec.estimate {
                ctx.run(method).map(|run| {
                    let e = run.estimate;
                    let mut row = ReplicateRow::empty(name, replicate, seed, method);
                    gap_fields(&mut row, &run.matches);
                    row.cut_capacity = e.design.cut_capacity;
                    row.n_a = Some(e.design.n_a);
                    row.n_b = Some(e.design.n_b);
                    row.tau_hat = Some(e.tau_hat);
                    row.oracle_delta_star = e.oracle_delta_star;
                    row.abs_error = e.abs_error;
                    row.rel_error = e.rel_error;
                    row
                })
            } else {
                let partition = if method.is_isolated() { ctx.partition().map(Some) } else { Ok(None) };
                partition.and_then(|p| {
                    let matches = ctx.match_targets(method, p)?;
                    let mut row = ReplicateRow::empty(name, replicate, seed, method);
                    gap_fields(&mut row, &matches);
                    row.cut_capacity = p.map(|p| normalized_cut_capacity(&ctx.graph, p)).transpose()?;
                    Ok(row)
                })
            };
            result.unwrap_or_else(|e| ReplicateRow::failed(name, replicate, seed, method, &e))
        })
        .collect()
}

fn panel_rows(spec: &CampaignSpec, data: &PanelData, replicate: u32) -> Vec<ReplicateRow> {
    let seed = spec.base_seed + u64::from(replicate);
    let o = &data.options;
    let partition: std::result::Result<Partition, String> = if spec.methods.iter().any(|m| m.is_isolated()) {
        kl_partition_best_of(&data.graph, &o.constraints, derive_seed(seed, &[PANEL_PARTITION_STREAM]), o.kl_passes, o.kl_restarts)
            .map_err(|e| e.to_string())
    } else {
        Err("unused".into())
    };
    spec.methods
        .iter()
        .map(|&method| {
            let options = method.match_options(&o.matching, seed);
            let result = if method.is_isolated() {
                partition.as_ref().map_err(|m| Error::InfeasibleConstraints(m.clone())).and_then(|p| {
                    let matches = match_all(&data.targets, p, &data.history, &options);
                    let mut row = ReplicateRow::empty(&data.name, replicate, seed, method);
                    gap_fields(&mut row, &matches);
                    row.cut_capacity = Some(normalized_cut_capacity(&data.graph, p)?);
                    Ok(row)
                })
            } else {
                let matches = match_all_unpartitioned(&data.targets, &data.history, &options);
                let mut row = ReplicateRow::empty(&data.name, replicate, seed, method);
                gap_fields(&mut row, &matches);
                Ok(row)
            };
            result.unwrap_or_else(|e| ReplicateRow::failed(&data.name, replicate, seed, method, &e))
        })
        .collect()
}

/// Runs every replicate, writes one JSON file of rows per replicate under
/// `replicates/` when `write` is set, and merges them into a report.
fn run_inner(spec: &CampaignSpec, write: bool) -> Result<CampaignReport> {
    spec.validate()?;
    let mut prepared = Vec::new();
    for source in &spec.scenarios {
        prepared.push(prepare(source, spec.metric)?);
    }
    let names: BTreeSet<&str> = prepared.iter().map(Prepared::name).collect();
    if names.len() != prepared.len() {
        return Err(Error::InvalidConfig("scenario names must be distinct".into()));
    }
    let jobs: Vec<(usize, u32)> =
        (0..prepared.len()).flat_map(|s| (0..spec.replicates).map(move |r| (s, r))).collect();
    let replicate_dir = spec.output_dir.join("replicates");
    if write {
        fs::create_dir_all(&replicate_dir)?;
    }
    let work = || -> Result<Vec<Vec<ReplicateRow>>> {
        jobs.par_iter()
            .map(|&(s, r)| {
                let rows = match &prepared[s] {
                    Prepared::Simulated(scenario) => simulated_rows(spec, scenario, r),
                    Prepared::Panels(data) => panel_rows(spec, data, r),
                };
                if write {
                    io::write_json(&replicate_dir.join(format!("{}-{r:04}.json", prepared[s].name())), &rows)?;
                }
                Ok(rows)
            })
            .collect()
    };
    let per_job = if spec.workers == 0 {
        work()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start {} workers: {e}", spec.workers)))?
            .install(work)?
    };
    Ok(CampaignReport::from_rows(spec, per_job.into_iter().flatten().collect()))
}

/// Runs the campaign in memory.
pub fn run_campaign(spec: &CampaignSpec) -> Result<CampaignReport> {
    run_inner(spec, false)
}

/// Runs the campaign and writes per-replicate files plus the merged report
/// into `spec.output_dir`.
pub fn run_campaign_to_disk(spec: &CampaignSpec) -> Result<CampaignReport> {
    let report = run_inner(spec, true)?;
    report.write(&spec.output_dir)?;
    Ok(report)
}
