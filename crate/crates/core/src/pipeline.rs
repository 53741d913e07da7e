//! End-to-end orchestration on simulated data: history run, competition
//! graph, partition, matching, design, experiment run, DID and oracle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    build_design, build_unisolated_design, did_estimate, measure_design_spillover, measure_did_inputs, DesignSummary,
    DidInputs, EffectEstimate, ExperimentDesign,
};
use crate::graph::{build_graph, node_metrics, normalized_cut_capacity, CompetitionGraph, NodeMetrics};
use crate::market::{oracle_from_panels, simulate, simulate_with, DailyPanel, MarketConfig, SimOptions, SinkingPlan, TreatmentPlan};
use crate::matching::{match_all, match_all_unpartitioned, MatchOptions, MatchOutcome, Ranking, StratumScheme};
use crate::partition::{kl_partition_best_of, BalanceConstraints, Partition};
use crate::types::{derive_seed, DayWindow, ItemId, Metric};

const PARTITION_STREAM: u64 = 0x7061_7274;
const MATCH_STREAM: u64 = 0x6d61_7463;
const SPLIT_STREAM: u64 = 0x7370_6c74;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CiCtcvr,
    CiStratifiedRandom,
    CiRandom,
    Naive,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::CiCtcvr, Method::CiStratifiedRandom, Method::CiRandom, Method::Naive];

    pub fn label(self) -> &'static str {
        match self {
            Method::CiCtcvr => "ci_ctcvr",
            Method::CiStratifiedRandom => "ci_stratified_random",
            Method::CiRandom => "ci_random",
            Method::Naive => "naive",
        }
    }

    /// Whether the method partitions the graph and sinks across buckets.
    pub fn is_isolated(self) -> bool {
        self != Method::Naive
    }

    /// `base` with the stratum scheme and ranking this method uses.
    pub fn match_options(self, base: &MatchOptions, seed: u64) -> MatchOptions {
        let (scheme, ranking) = match self {
            Method::CiCtcvr => (StratumScheme::Full, Ranking::Ctcvr),
            Method::CiStratifiedRandom => (StratumScheme::Full, Ranking::Random),
            Method::CiRandom => (StratumScheme::Pooled, Ranking::Random),
            Method::Naive => (StratumScheme::CategoryOnly, Ranking::Random),
        };
        MatchOptions { scheme, ranking, seed: derive_seed(seed, &[MATCH_STREAM, self as u64]), ..base.clone() }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}` (expected ci_ctcvr, ci_stratified_random, ci_random or naive)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    CiRandom,
    CiStratifiedRandom,
}

impl From<AblationVariant> for Method {
    fn from(v: AblationVariant) -> Method {
        match v {
            AblationVariant::CiRandom => Method::CiRandom,
            AblationVariant::CiStratifiedRandom => Method::CiStratifiedRandom,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub metric: Metric,
    pub constraints: BalanceConstraints,
    pub kl_passes: usize,
    pub kl_restarts: usize,
    /// Trailing pre-period days used for the graph; all of them when absent.
    pub graph_days: Option<u32>,
    /// Ranking and scheme are overridden per method.
    pub matching: MatchOptions,
    pub attach_oracle: bool,
    pub epsilon_mutual: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            metric: Metric::Orders,
            constraints: BalanceConstraints::default(),
            kl_passes: 20,
            kl_restarts: 4,
            graph_days: None,
            matching: MatchOptions::default(),
            attach_oracle: true,
            epsilon_mutual: 0.001,
        }
    }
}

impl PipelineOptions {
    pub fn validate(&self) -> Result<()> {
        self.constraints.validate()?;
        self.matching.stratification.validate()?;
        if self.matching.k_max == 0 {
            return Err(Error::InvalidConfig("matching.k_max must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon_mutual) {
            return Err(Error::InvalidConfig("epsilon_mutual must be in [0, 1]".into()));
        }
        if self.graph_days == Some(0) {
            return Err(Error::InvalidConfig("graph_days must be >= 1".into()));
        }
        Ok(())
    }

    pub fn graph_window(&self, config: &MarketConfig) -> DayWindow {
        let days = self.graph_days.unwrap_or(config.days_pre).min(config.days_pre);
        DayWindow::new(config.days_pre - days, config.days_pre)
    }
}

/// KL seed the pipeline uses for a replicate seed.
pub fn partition_seed(seed: u64) -> u64 {
    derive_seed(seed, &[PARTITION_STREAM])
}

/// Seeded split of `targets` into (A, B); A gets the extra item when the
/// count is odd.
pub fn naive_split(targets: &BTreeSet<ItemId>, seed: u64) -> (BTreeSet<ItemId>, BTreeSet<ItemId>) {
    let mut order: Vec<&ItemId> = targets.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SPLIT_STREAM])));
    let half = order.len().div_ceil(2);
    (
        order[..half].iter().map(|id| (*id).clone()).collect(),
        order[half..].iter().map(|id| (*id).clone()).collect(),
    )
}

/// Output of one method on one seed, with every intermediate artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub method: Method,
    pub partition: Option<Partition>,
    pub matches: MatchOutcome,
    pub design: ExperimentDesign,
    pub inputs: DidInputs,
    pub experiment: DailyPanel,
    pub estimate: EffectEstimate,
}

/// Shared state for running several methods on one seed. The untreated
/// full-market run doubles as the pre-period history and as the untreated
/// oracle twin.
pub struct SimulationContext {
    pub config: MarketConfig,
    pub treatment: TreatmentPlan,
    pub options: PipelineOptions,
    pub history: DailyPanel,
    /// Per-item aggregates over the whole pre-period.
    pub history_metrics: BTreeMap<ItemId, NodeMetrics>,
    pub graph: CompetitionGraph,
    partition: OnceLock<std::result::Result<Partition, String>>,
    oracles: Mutex<BTreeMap<BTreeSet<ItemId>, f64>>,
}

impl SimulationContext {
    pub fn new(config: &MarketConfig, treatment: &TreatmentPlan, options: &PipelineOptions) -> Result<Self> {
        config.validate()?;
        treatment.validate(&config.item_ids())?;
        options.validate()?;
        if treatment.target_items.is_empty() {
            return Err(Error::InvalidConfig("treatment.target_items must be nonempty".into()));
        }
        let window = options.graph_window(config);
        let history = simulate_with(config, &SinkingPlan::full_market(), None, &SimOptions { request_log: Some(window) })?;
        let graph = build_graph(&history, &config.items, window)?;
        let history_metrics = node_metrics(&history, &config.items, config.pre_window())?;
        Ok(SimulationContext {
            config: config.clone(),
            treatment: treatment.clone(),
            options: options.clone(),
            history,
            history_metrics,
            graph,
            partition: OnceLock::new(),
            oracles: Mutex::new(BTreeMap::new()),
        })
    }

    /// Same history, graph and partition under another treatment plan. The
    /// oracle cache starts empty.
    pub fn with_treatment(&self, treatment: &TreatmentPlan) -> Result<Self> {
        treatment.validate(&self.config.item_ids())?;
        if treatment.target_items.is_empty() {
            return Err(Error::InvalidConfig("treatment.target_items must be nonempty".into()));
        }
        Ok(SimulationContext {
            config: self.config.clone(),
            treatment: treatment.clone(),
            options: self.options.clone(),
            history: self.history.clone(),
            history_metrics: self.history_metrics.clone(),
            graph: self.graph.clone(),
            partition: self.partition.clone(),
            oracles: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.rng_seed
    }

    pub fn targets(&self) -> &BTreeSet<ItemId> {
        &self.treatment.target_items
    }

    /// KL partition of the history graph, computed once.
    pub fn partition(&self) -> Result<&Partition> {
        let cached = self.partition.get_or_init(|| {
            kl_partition_best_of(
                &self.graph,
                &self.options.constraints,
                partition_seed(self.seed()),
                self.options.kl_passes,
                self.options.kl_restarts,
            )
            .map_err(|e| e.to_string())
        });
        cached.as_ref().map_err(|msg| Error::InfeasibleConstraints(msg.clone()))
    }

    /// Δ* for treating `group_a` alone, cached per group.
    pub fn oracle(&self, group_a: &BTreeSet<ItemId>) -> Result<f64> {
        if let Some(v) = self.oracles.lock().expect("oracle cache poisoned").get(group_a) {
            return Ok(*v);
        }
        let plan = self.treatment.restricted_to(group_a);
        let treated = simulate(&self.config, &SinkingPlan::full_market(), Some(&plan))?;
        let delta = oracle_from_panels(&self.config, &self.history, &treated, self.options.metric);
        self.oracles.lock().expect("oracle cache poisoned").insert(group_a.clone(), delta);
        Ok(delta)
    }

    /// Match sets for `method`. Isolated methods match from the opposite
    /// side of `partition`; the naive method ignores it.
    pub fn match_targets(&self, method: Method, partition: Option<&Partition>) -> Result<MatchOutcome> {
        let options = method.match_options(&self.options.matching, self.seed());
        if method.is_isolated() {
            let partition = partition.ok_or_else(|| Error::InvalidPartition("isolated methods need a partition".into()))?;
            Ok(match_all(self.targets(), partition, &self.history_metrics, &options))
        } else {
            Ok(match_all_unpartitioned(self.targets(), &self.history_metrics, &options))
        }
    }

    pub fn design(&self, method: Method, partition: Option<&Partition>, matches: &MatchOutcome) -> Result<ExperimentDesign> {
        if method.is_isolated() {
            let partition = partition.ok_or_else(|| Error::InvalidPartition("isolated methods need a partition".into()))?;
            build_design(self.targets(), partition, &matches.matches)
        } else {
            let (a, b) = naive_split(self.targets(), self.seed());
            build_unisolated_design(a, b, &matches.matches)
        }
    }

    /// Runs the experiment for a ready design and estimates the effect.
    pub fn execute(
        &self,
        method: Method,
        partition: Option<Partition>,
        matches: MatchOutcome,
        design: ExperimentDesign,
    ) -> Result<PipelineRun> {
        let config = &self.config;
        let plan = self.treatment.restricted_to(&design.group_a);
        let experiment = simulate(config, &design.sinking, Some(&plan))?;
        let inputs = measure_did_inputs(&experiment, &design, self.options.metric, config.pre_window(), config.post_window())?;
        let scale = f64::from(config.requests_per_day) * f64::from(config.days_post);
        let tau_hat = did_estimate(&inputs)? * scale;
        let oracle = if self.options.attach_oracle { Some(self.oracle(&design.group_a)?) } else { None };
        let summary = self.summarize(partition.as_ref(), &matches, &design)?;
        let estimate = EffectEstimate::new(method.label(), self.seed(), tau_hat, oracle, summary);
        Ok(PipelineRun { method, partition, matches, design, inputs, experiment, estimate })
    }

    pub fn run(&self, method: Method) -> Result<PipelineRun> {
        let partition = if method.is_isolated() { Some(self.partition()?.clone()) } else { None };
        let matches = self.match_targets(method, partition.as_ref())?;
        let design = self.design(method, partition.as_ref(), &matches)?;
        self.execute(method, partition, matches, design)
    }

    fn summarize(&self, partition: Option<&Partition>, matches: &MatchOutcome, design: &ExperimentDesign) -> Result<DesignSummary> {
        let n = matches.matches.len();
        Ok(DesignSummary {
            n_a: design.group_a.len(),
            n_b: design.group_b.len(),
            n_c_a: design.c_a.len(),
            n_c_b: design.c_b.len(),
            cut_capacity: partition.map(|p| normalized_cut_capacity(&self.graph, p)).transpose()?,
            mean_pre_gap: (n > 0).then(|| matches.matches.values().map(|m| m.pre_gap).sum::<f64>() / n as f64),
            mean_pre_gap_relative: matches.mean_pre_gap_relative(),
            aggregate_pre_gap_relative: matches.aggregate_gap().relative,
            unmatched: matches.unmatched.len(),
        })
    }
}

/// DID of a run's design entirely inside the pre-period: first half of T0
/// as "pre", second half as "post". Scaled like the main estimate, to the
/// second half's length.
pub fn placebo_estimate(run: &PipelineRun, config: &MarketConfig, metric: Metric) -> Result<f64> {
    if config.days_pre < 2 {
        return Err(Error::InvalidConfig("the placebo needs days_pre >= 2".into()));
    }
    let half = config.days_pre / 2;
    let (pre, post) = (DayWindow::new(0, half), DayWindow::new(half, config.days_pre));
    let inputs = measure_did_inputs(&run.experiment, &run.design, metric, pre, post)?;
    Ok(did_estimate(&inputs)? * f64::from(config.requests_per_day) * f64::from(post.len()))
}

/// Exposure spillover (percent) on the homogeneous items of a run's design.
pub fn design_spillover(run: &PipelineRun, config: &MarketConfig) -> Result<f64> {
    measure_design_spillover(config, &run.design)
}

pub fn run_method(method: Method, config: &MarketConfig, treatment: &TreatmentPlan, options: &PipelineOptions) -> Result<PipelineRun> {
    SimulationContext::new(config, treatment, options)?.run(method)
}

pub fn run_ci_psm_did(config: &MarketConfig, treatment: &TreatmentPlan, options: &PipelineOptions) -> Result<EffectEstimate> {
    run_method(Method::CiCtcvr, config, treatment, options).map(|r| r.estimate)
}

pub fn run_naive_psm_did(config: &MarketConfig, treatment: &TreatmentPlan, options: &PipelineOptions) -> Result<EffectEstimate> {
    run_method(Method::Naive, config, treatment, options).map(|r| r.estimate)
}

pub fn run_ablation(
    variant: AblationVariant,
    config: &MarketConfig,
    treatment: &TreatmentPlan,
    options: &PipelineOptions,
) -> Result<EffectEstimate> {
    run_method(variant.into(), config, treatment, options).map(|r| r.estimate)
}
