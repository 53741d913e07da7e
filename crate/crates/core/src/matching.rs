//! Stratified CTCVR matching of target items to homogeneous items.
//!
//! Candidates are first restricted to the target's stratum (category,
//! exposure bucket, transaction decile, price decile), then ranked by how
//! close their conversion rate is to the target's. The match set is the
//! ranked prefix whose mean pre-period outcome is closest to the target's.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeMetrics;
use crate::partition::{Partition, Side};
use crate::types::{derive_seed, stable_hash, ItemId, Metric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StratificationConfig {
    /// PV thresholds: `pv <= first` is the lowest bucket, `pv >= last` the
    /// highest, values strictly between consecutive edges fall in between.
    pub pv_bucket_edges: Vec<u64>,
    pub transaction_decile_count: usize,
    pub price_decile_count: usize,
    /// Number of taxonomy levels compared (1..=3).
    pub category_depth: usize,
    /// Outcome used for the transaction-level bins.
    pub transaction_metric: Metric,
}

impl Default for StratificationConfig {
    fn default() -> Self {
        StratificationConfig {
            pv_bucket_edges: vec![100, 1000],
            transaction_decile_count: 10,
            price_decile_count: 10,
            category_depth: 2,
            transaction_metric: Metric::Orders,
        }
    }
}

impl StratificationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pv_bucket_edges.is_empty() {
            return Err(Error::InvalidConfig("pv_bucket_edges must be nonempty".into()));
        }
        if self.pv_bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("pv_bucket_edges must be strictly increasing".into()));
        }
        if self.transaction_decile_count < 2 || self.price_decile_count < 2 {
            return Err(Error::InvalidConfig("decile counts must be >= 2".into()));
        }
        if !(1..=3).contains(&self.category_depth) {
            return Err(Error::InvalidConfig("category_depth must be 1, 2 or 3".into()));
        }
        Ok(())
    }

    pub fn pv_bucket(&self, pv: u64) -> u8 {
        let last = *self.pv_bucket_edges.last().expect("validated nonempty");
        if pv >= last {
            self.pv_bucket_edges.len() as u8
        } else {
            self.pv_bucket_edges.iter().filter(|&&e| e < pv).count() as u8
        }
    }
}

/// Which dimensions define a stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumScheme {
    /// Category, PV bucket, transaction bin and price bin.
    #[default]
    Full,
    /// Category only.
    CategoryOnly,
    /// One stratum holding everything.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StratumKey {
    pub category_path: Vec<String>,
    pub pv_bucket: u8,
    pub transaction_bin: u16,
    pub price_bin: u16,
}

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|pv{}|tx{}|price{}",
            self.category_path.join("/"),
            self.pv_bucket,
            self.transaction_bin,
            self.price_bin
        )
    }
}

/// Rank-based quantile bins: an item's bin is `floor(rank * bins / n)` where
/// rank counts strictly smaller values, so equal values share a bin.
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<u16> {
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    values
        .iter()
        .map(|v| {
            let rank = sorted.partition_point(|x| x.total_cmp(v).is_lt());
            (rank * bins / n.max(1)) as u16
        })
        .collect()
}

/// Stratum of every item; quantile bins are computed over `items` itself.
pub fn assign_strata(
    items: &BTreeMap<ItemId, NodeMetrics>,
    config: &StratificationConfig,
    scheme: StratumScheme,
) -> Result<BTreeMap<ItemId, StratumKey>> {
    config.validate()?;
    let tx: Vec<f64> = items.values().map(|m| m.metric(config.transaction_metric)).collect();
    let price: Vec<f64> = items.values().map(|m| m.price).collect();
    let tx_bins = quantile_bins(&tx, config.transaction_decile_count);
    let price_bins = quantile_bins(&price, config.price_decile_count);
    Ok(items
        .iter()
        .enumerate()
        .map(|(i, (id, m))| {
            let key = match scheme {
                StratumScheme::Full => StratumKey {
                    category_path: m.category_path.prefix(config.category_depth).to_vec(),
                    pv_bucket: config.pv_bucket(m.pv),
                    transaction_bin: tx_bins[i],
                    price_bin: price_bins[i],
                },
                StratumScheme::CategoryOnly => StratumKey {
                    category_path: m.category_path.prefix(config.category_depth).to_vec(),
                    pv_bucket: 0,
                    transaction_bin: 0,
                    price_bin: 0,
                },
                StratumScheme::Pooled => StratumKey {
                    category_path: Vec::new(),
                    pv_bucket: 0,
                    transaction_bin: 0,
                    price_bin: 0,
                },
            };
            (id.clone(), key)
        })
        .collect())
}

/// Groups items by their full stratum key.
pub fn stratify(
    items: &BTreeMap<ItemId, NodeMetrics>,
    config: &StratificationConfig,
) -> Result<BTreeMap<StratumKey, BTreeSet<ItemId>>> {
    let mut strata: BTreeMap<StratumKey, BTreeSet<ItemId>> = BTreeMap::new();
    for (id, key) in assign_strata(items, config, StratumScheme::Full)? {
        strata.entry(key).or_default().insert(id);
    }
    Ok(strata)
}

/// Transactions per impression, optionally Laplace-smoothed.
pub fn ctcvr(pv: u64, transactions: u64, smoothing: bool) -> Result<f64> {
    if smoothing {
        return Ok((transactions as f64 + 1.0) / (pv as f64 + 2.0));
    }
    if pv == 0 {
        return Err(Error::UndefinedRate("ctcvr with zero impressions".into()));
    }
    Ok(transactions as f64 / pv as f64)
}

/// How candidates inside the stratum are ordered before prefix selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    #[default]
    Ctcvr,
    /// Uniformly random order, seeded per target.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchOptions {
    pub k_max: usize,
    pub metric: Metric,
    pub smoothing: bool,
    pub stratification: StratificationConfig,
    pub scheme: StratumScheme,
    pub ranking: Ranking,
    pub seed: u64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            k_max: 10,
            metric: Metric::Orders,
            smoothing: false,
            stratification: StratificationConfig::default(),
            scheme: StratumScheme::Full,
            ranking: Ranking::Ctcvr,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub target: ItemId,
    /// Chosen members in rank order.
    pub members: Vec<ItemId>,
    pub k: usize,
    pub pre_gap: f64,
    /// `pre_gap / target_total * 100`; absent when the target's total is 0.
    pub pre_gap_relative: Option<f64>,
    pub target_total: f64,
    pub member_mean: f64,
}

/// Absolute distance between the target total and the mean of the first `k`
/// candidate totals, for every `k` in `1..=totals.len()`.
pub fn prefix_gaps(target_total: f64, totals: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    totals
        .iter()
        .enumerate()
        .map(|(i, t)| {
            acc += t;
            (target_total - acc / (i + 1) as f64).abs()
        })
        .collect()
}

/// Matches one target against `pool`. The pool is expected to be the
/// opposite partition side; quantile bins are computed over pool ∪ {target}.
pub fn match_item(
    target: &ItemId,
    pool: &BTreeSet<ItemId>,
    history: &BTreeMap<ItemId, NodeMetrics>,
    options: &MatchOptions,
) -> Result<MatchSet> {
    if options.k_max == 0 {
        return Err(Error::InvalidConfig("k_max must be >= 1".into()));
    }
    let target_metrics = history.get(target).ok_or_else(|| Error::UnknownItem(target.clone()))?;
    let mut population: BTreeMap<ItemId, NodeMetrics> = BTreeMap::new();
    for id in pool.iter().filter(|id| *id != target) {
        let m = history.get(id).ok_or_else(|| Error::UnknownItem(id.clone()))?;
        population.insert(id.clone(), m.clone());
    }
    population.insert(target.clone(), target_metrics.clone());

    let keys = assign_strata(&population, &options.stratification, options.scheme)?;
    let target_key = &keys[target];
    let stratum: Vec<&ItemId> = keys
        .iter()
        .filter(|(id, key)| *id != target && *key == target_key)
        .map(|(id, _)| id)
        .collect();
    if stratum.is_empty() {
        return Err(Error::NoCandidates(target.clone()));
    }

    let ranked: Vec<&ItemId> = match options.ranking {
        Ranking::Ctcvr => {
            let rate = |m: &NodeMetrics| ctcvr(m.pv, m.orders, options.smoothing).ok();
            let target_rate = rate(target_metrics).ok_or_else(|| Error::NoCandidates(target.clone()))?;
            let mut scored: Vec<(f64, &ItemId)> = stratum
                .iter()
                .filter_map(|id| rate(&population[*id]).map(|r| ((r - target_rate).abs(), *id)))
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            scored.into_iter().map(|(_, id)| id).collect()
        }
        Ranking::Random => {
            let mut shuffled = stratum;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(options.seed, &[stable_hash(target.as_str())]));
            shuffled.shuffle(&mut rng);
            shuffled
        }
    };
    if ranked.is_empty() {
        return Err(Error::NoCandidates(target.clone()));
    }

    let target_total = target_metrics.metric(options.metric);
    let depth = ranked.len().min(options.k_max);
    let totals: Vec<f64> = ranked[..depth].iter().map(|id| population[*id].metric(options.metric)).collect();
    let gaps = prefix_gaps(target_total, &totals);
    let mut best_k = 1;
    for (i, &g) in gaps.iter().enumerate() {
        if g < gaps[best_k - 1] {
            best_k = i + 1;
        }
    }
    let pre_gap = gaps[best_k - 1];
    Ok(MatchSet {
        target: target.clone(),
        members: ranked[..best_k].iter().map(|id| (*id).clone()).collect(),
        k: best_k,
        pre_gap,
        pre_gap_relative: (target_total > 0.0).then(|| pre_gap / target_total * 100.0),
        target_total,
        member_mean: totals[..best_k].iter().sum::<f64>() / best_k as f64,
    })
}

/// Per-target match sets plus the targets that could not be matched.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub matches: BTreeMap<ItemId, MatchSet>,
    /// Target → reason it has no match set.
    pub unmatched: BTreeMap<ItemId, String>,
}

impl MatchOutcome {
    /// Gap between the summed target totals and the summed match-set means,
    /// over matched targets.
    pub fn aggregate_gap(&self) -> AggregateGap {
        let target_total: f64 = self.matches.values().map(|m| m.target_total).sum();
        let matched_total: f64 = self.matches.values().map(|m| m.member_mean).sum();
        let gap = (target_total - matched_total).abs();
        AggregateGap {
            target_total,
            matched_total,
            gap,
            relative: (target_total > 0.0).then(|| gap / target_total * 100.0),
        }
    }

    /// Mean of the per-target relative gaps that are defined.
    pub fn mean_pre_gap_relative(&self) -> Option<f64> {
        let vals: Vec<f64> = self.matches.values().filter_map(|m| m.pre_gap_relative).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateGap {
    pub target_total: f64,
    pub matched_total: f64,
    pub gap: f64,
    pub relative: Option<f64>,
}

/// Matches every target from the side opposite to its own. Targets are never
/// used as candidates.
pub fn match_all(
    targets: &BTreeSet<ItemId>,
    partition: &Partition,
    history: &BTreeMap<ItemId, NodeMetrics>,
    options: &MatchOptions,
) -> MatchOutcome {
    let pools = [Side::A, Side::B].map(|s| {
        partition.side(s).iter().filter(|id| !targets.contains(*id)).cloned().collect::<BTreeSet<_>>()
    });
    collect(targets.par_iter().map(|t| {
        let result = match partition.side_of(t) {
            None => Err(Error::InvalidPartition(format!("target {t} is not in the partition"))),
            Some(side) => {
                let pool = &pools[side.opposite() as usize];
                match_item(t, pool, history, options)
            }
        };
        (t.clone(), result)
    }))
}

/// Matches every target against all non-target items, with no partition.
pub fn match_all_unpartitioned(
    targets: &BTreeSet<ItemId>,
    history: &BTreeMap<ItemId, NodeMetrics>,
    options: &MatchOptions,
) -> MatchOutcome {
    let pool: BTreeSet<ItemId> = history.keys().filter(|id| !targets.contains(*id)).cloned().collect();
    collect(targets.par_iter().map(|t| (t.clone(), match_item(t, &pool, history, options))))
}

fn collect(results: impl ParallelIterator<Item = (ItemId, Result<MatchSet>)>) -> MatchOutcome {
    let results: Vec<(ItemId, Result<MatchSet>)> = results.collect();
    let mut outcome = MatchOutcome::default();
    for (target, r) in results {
        match r {
            Ok(m) => {
                outcome.matches.insert(target, m);
            }
            Err(e) => {
                outcome.unmatched.insert(target, e.to_string());
            }
        }
    }
    outcome
}
