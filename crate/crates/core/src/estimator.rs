//! Experiment grouping, two-sided sinking measurement and the
//! difference-in-differences estimate.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{measure_cannibalization, simulate, DailyPanel, MarketConfig, SinkingPlan};
use crate::matching::MatchSet;
use crate::partition::{Partition, Side};
use crate::types::{DayWindow, ItemId, Metric};

/// Treatment group A, control group B, their homogeneous sets, and where
/// each side is observed.
///
/// `c_a` holds the matches of B's targets and is observed alongside A;
/// `c_b` holds the matches of A's targets and is observed alongside B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDesign {
    pub group_a: BTreeSet<ItemId>,
    pub group_b: BTreeSet<ItemId>,
    pub c_a: BTreeSet<ItemId>,
    pub c_b: BTreeSet<ItemId>,
    pub sinking: SinkingPlan,
    /// Bucket in which `A ∪ C_A` is measured.
    pub bucket_a: String,
    /// Bucket in which `B ∪ C_B` is measured.
    pub bucket_b: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ExperimentDesign {
    pub fn measured_a(&self) -> BTreeSet<ItemId> {
        self.group_a.union(&self.c_a).cloned().collect()
    }

    pub fn measured_b(&self) -> BTreeSet<ItemId> {
        self.group_b.union(&self.c_b).cloned().collect()
    }
}

fn union_of_matches<'a>(targets: impl Iterator<Item = &'a ItemId>, matches: &BTreeMap<ItemId, MatchSet>) -> BTreeSet<ItemId> {
    targets.filter_map(|t| matches.get(t)).flat_map(|m| m.members.iter().cloned()).collect()
}

fn warn_if_empty(design: &mut ExperimentDesign) {
    if design.c_a.is_empty() {
        design.warnings.push("C_A is empty: no side-B target was matched".into());
    }
    if design.c_b.is_empty() {
        design.warnings.push("C_B is empty: no side-A target was matched".into());
    }
}

/// Groups targets by partition side and sets up two 50/50 buckets: the
/// control bucket sinks A, the treatment bucket sinks B.
pub fn build_design(
    targets: &BTreeSet<ItemId>,
    partition: &Partition,
    matches: &BTreeMap<ItemId, MatchSet>,
) -> Result<ExperimentDesign> {
    let group_a: BTreeSet<ItemId> = targets.intersection(&partition.side_a).cloned().collect();
    let group_b: BTreeSet<ItemId> = targets.intersection(&partition.side_b).cloned().collect();
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::DegenerateDesign(format!(
            "targets split {} / {} across the partition; both groups must be nonempty",
            group_a.len(),
            group_b.len()
        )));
    }
    let c_a = union_of_matches(group_b.iter(), matches);
    let c_b = union_of_matches(group_a.iter(), matches);
    for (set, side, name) in [(&c_a, Side::A, "C_A"), (&c_b, Side::B, "C_B")] {
        if let Some(id) = set.iter().find(|id| partition.side_of(id) != Some(side)) {
            return Err(Error::InvalidInput(format!("{name} member {id} is not on side {side:?}")));
        }
    }
    let sinking = SinkingPlan::two_sided(group_a.clone(), group_b.clone());
    let mut design = ExperimentDesign {
        group_a,
        group_b,
        c_a,
        c_b,
        sinking,
        bucket_a: SinkingPlan::TREATMENT.into(),
        bucket_b: SinkingPlan::CONTROL.into(),
        warnings: Vec::new(),
    };
    warn_if_empty(&mut design);
    Ok(design)
}

/// Design with no isolation: both groups are observed in one full-market
/// bucket and nothing is sunk.
pub fn build_unisolated_design(
    group_a: BTreeSet<ItemId>,
    group_b: BTreeSet<ItemId>,
    matches: &BTreeMap<ItemId, MatchSet>,
) -> Result<ExperimentDesign> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::DegenerateDesign("both groups must be nonempty".into()));
    }
    if let Some(id) = group_a.intersection(&group_b).next() {
        return Err(Error::InvalidInput(format!("{id} is in both groups")));
    }
    let mut design = ExperimentDesign {
        c_a: union_of_matches(group_b.iter(), matches),
        c_b: union_of_matches(group_a.iter(), matches),
        group_a,
        group_b,
        sinking: SinkingPlan::full_market(),
        bucket_a: SinkingPlan::FULL_MARKET.into(),
        bucket_b: SinkingPlan::FULL_MARKET.into(),
        warnings: Vec::new(),
    };
    warn_if_empty(&mut design);
    Ok(design)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DidInputs {
    pub y_pre_a: f64,
    pub y_pre_b: f64,
    pub y_post_a: f64,
    pub y_post_b: f64,
}

/// `(y_post_a - y_post_b) - (y_pre_a - y_pre_b)`.
pub fn did_estimate(inputs: &DidInputs) -> Result<f64> {
    let DidInputs { y_pre_a, y_pre_b, y_post_a, y_post_b } = *inputs;
    if ![y_pre_a, y_pre_b, y_post_a, y_post_b].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite DID input {inputs:?}")));
    }
    Ok((y_post_a - y_post_b) - (y_pre_a - y_pre_b))
}

/// Metric of `items` in `bucket` over `window`, per request routed to that
/// bucket.
pub fn per_request_metric(
    panel: &DailyPanel,
    metric: Metric,
    window: DayWindow,
    bucket: &str,
    items: &BTreeSet<ItemId>,
) -> Result<f64> {
    let requests = panel.requests(window, Some(bucket));
    if requests == 0 {
        return Err(Error::UndefinedRate(format!("bucket `{bucket}` received no requests in {window}")));
    }
    Ok(panel.metric_total(metric, window, Some(bucket), Some(items)) / requests as f64)
}

/// The four per-request DID inputs for `design` measured on `panel`.
pub fn measure_did_inputs(
    panel: &DailyPanel,
    design: &ExperimentDesign,
    metric: Metric,
    pre: DayWindow,
    post: DayWindow,
) -> Result<DidInputs> {
    let a = design.measured_a();
    let b = design.measured_b();
    Ok(DidInputs {
        y_pre_a: per_request_metric(panel, metric, pre, &design.bucket_a, &a)?,
        y_pre_b: per_request_metric(panel, metric, pre, &design.bucket_b, &b)?,
        y_post_a: per_request_metric(panel, metric, post, &design.bucket_a, &a)?,
        y_post_b: per_request_metric(panel, metric, post, &design.bucket_b, &b)?,
    })
}

/// Estimate from an externally supplied experiment panel: per-request DID
/// scaled to `scale_requests` requests. No oracle can be attached.
pub fn estimate_from_panel(
    panel: &DailyPanel,
    design: &ExperimentDesign,
    metric: Metric,
    pre: DayWindow,
    post: DayWindow,
    scale_requests: f64,
) -> Result<f64> {
    let inputs = measure_did_inputs(panel, design, metric, pre, post)?;
    Ok(did_estimate(&inputs)? * scale_requests)
}

/// Exposure change (percent) of the homogeneous items when the opposite
/// target group is sunk: `C_B` in the bucket sinking A and `C_A` in the
/// bucket sinking B, against the same requests with nothing sunk.
pub fn measure_design_spillover(config: &MarketConfig, design: &ExperimentDesign) -> Result<f64> {
    let plan = SinkingPlan::two_sided(design.group_a.clone(), design.group_b.clone());
    let sunk = simulate(config, &plan, None)?;
    let reference = simulate(config, &plan.without_sinking(), None)?;
    let watched_rows = |panel: &DailyPanel| DailyPanel {
        days: panel.days,
        rows: panel
            .rows
            .iter()
            .filter(|r| {
                (r.bucket == SinkingPlan::CONTROL && design.c_b.contains(&r.item_id))
                    || (r.bucket == SinkingPlan::TREATMENT && design.c_a.contains(&r.item_id))
            })
            .cloned()
            .collect(),
        traffic: Vec::new(),
        request_log: None,
    };
    let watched: BTreeSet<ItemId> = design.c_a.union(&design.c_b).cloned().collect();
    measure_cannibalization(&watched_rows(&sunk), &watched_rows(&reference), &watched)
}

/// Sizes and quality diagnostics of a design.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DesignSummary {
    pub n_a: usize,
    pub n_b: usize,
    pub n_c_a: usize,
    pub n_c_b: usize,
    pub cut_capacity: Option<f64>,
    pub mean_pre_gap: Option<f64>,
    pub mean_pre_gap_relative: Option<f64>,
    pub aggregate_pre_gap_relative: Option<f64>,
    pub unmatched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub method: String,
    pub seed: u64,
    pub tau_hat: f64,
    pub oracle_delta_star: Option<f64>,
    pub abs_error: Option<f64>,
    /// Percent of |Δ*|; absent when there is no oracle or Δ* is 0.
    pub rel_error: Option<f64>,
    pub design: DesignSummary,
}

impl EffectEstimate {
    pub fn new(method: impl Into<String>, seed: u64, tau_hat: f64, oracle: Option<f64>, design: DesignSummary) -> Self {
        let abs_error = oracle.map(|d| (tau_hat - d).abs());
        let rel_error = oracle
            .zip(abs_error)
            .and_then(|(d, e)| (d != 0.0).then(|| e / d.abs() * 100.0));
        EffectEstimate { method: method.into(), seed, tau_hat, oracle_delta_star: oracle, abs_error, rel_error, design }
    }
}
