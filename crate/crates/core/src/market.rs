//! Synthetic two-sided marketplace.
//!
//! Each simulated request picks a leaf category in proportion to its summed
//! demand weight, ranks the category's non-sunk items by noisy utility, shows
//! the top `visible_slots`, and draws at most one purchase from a multinomial
//! logit over the shown items plus an outside option. Items in the same leaf
//! therefore compete for the same requests, which is the only interference
//! channel in the model.
//!
//! Every day owns an RNG stream derived from `rng_seed`, and every request
//! consumes a fixed number of draws that depends only on the drawn category.
//! Two runs with the same config therefore see the same requests no matter
//! which sinking or treatment plan is applied (common random numbers).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{derive_seed, CategoryPath, DayWindow, ItemId, Metric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub item_id: ItemId,
    pub category_path: CategoryPath,
    /// Utility units.
    pub base_quality: f64,
    pub price: f64,
    /// Relative request affinity of the item's leaf category.
    pub base_demand_weight: f64,
}

impl ItemSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.price.is_finite() && self.price > 0.0) {
            return Err(Error::InvalidConfig(format!("item {}: price must be > 0", self.item_id)));
        }
        if !(self.base_demand_weight.is_finite() && self.base_demand_weight > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "item {}: base_demand_weight must be > 0",
                self.item_id
            )));
        }
        if !self.base_quality.is_finite() {
            return Err(Error::InvalidConfig(format!("item {}: base_quality must be finite", self.item_id)));
        }
        Ok(())
    }
}

fn default_ranking_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub items: Vec<ItemSpec>,
    pub requests_per_day: u32,
    pub days_pre: u32,
    pub days_post: u32,
    pub price_sensitivity_beta: f64,
    pub outside_option_utility: f64,
    pub visible_slots: u32,
    pub rng_seed: u64,
    /// Scale of the Gumbel perturbation added to utility when ranking the
    /// visible slots. Zero ranks purely by utility.
    #[serde(default = "default_ranking_noise")]
    pub ranking_noise: f64,
}

impl MarketConfig {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::InvalidConfig("items must be nonempty".into()));
        }
        if self.requests_per_day == 0 {
            return Err(Error::InvalidConfig("requests_per_day must be >= 1".into()));
        }
        if self.days_pre == 0 || self.days_post == 0 {
            return Err(Error::InvalidConfig("days_pre and days_post must be >= 1".into()));
        }
        if self.visible_slots == 0 {
            return Err(Error::InvalidConfig("visible_slots must be >= 1".into()));
        }
        if !(self.price_sensitivity_beta.is_finite() && self.price_sensitivity_beta >= 0.0) {
            return Err(Error::InvalidConfig("price_sensitivity_beta must be finite and >= 0".into()));
        }
        if self.outside_option_utility.is_nan() || self.outside_option_utility == f64::INFINITY {
            return Err(Error::InvalidConfig("outside_option_utility must be a real number".into()));
        }
        if !(self.ranking_noise.is_finite() && self.ranking_noise >= 0.0) {
            return Err(Error::InvalidConfig("ranking_noise must be finite and >= 0".into()));
        }
        let mut seen = BTreeSet::new();
        for item in &self.items {
            item.validate()?;
            if !seen.insert(&item.item_id) {
                return Err(Error::InvalidConfig(format!("duplicate item_id {}", item.item_id)));
            }
        }
        Ok(())
    }

    pub fn total_days(&self) -> u32 {
        self.days_pre + self.days_post
    }

    /// The pre-intervention window `[0, days_pre)`.
    pub fn pre_window(&self) -> DayWindow {
        DayWindow::new(0, self.days_pre)
    }

    /// The evaluation window `[days_pre, days_pre + days_post)`.
    pub fn post_window(&self) -> DayWindow {
        DayWindow::new(self.days_pre, self.total_days())
    }

    pub fn item_ids(&self) -> BTreeSet<ItemId> {
        self.items.iter().map(|i| i.item_id.clone()).collect()
    }

    pub fn catalog(&self) -> BTreeMap<ItemId, &ItemSpec> {
        self.items.iter().map(|i| (i.item_id.clone(), i)).collect()
    }

    pub fn with_seed(&self, seed: u64) -> MarketConfig {
        MarketConfig { rng_seed: seed, ..self.clone() }
    }
}

/// Price of `item` on `day` under an optional treatment.
pub fn effective_price(item: &ItemSpec, day: u32, days_pre: u32, treatment: Option<&TreatmentPlan>) -> f64 {
    match treatment {
        Some(t) if day >= days_pre && t.target_items.contains(&item.item_id) => item.price * t.price_multiplier,
        _ => item.price,
    }
}

/// Price reduction applied to `target_items` from day `days_pre` onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentPlan {
    pub target_items: BTreeSet<ItemId>,
    pub price_multiplier: f64,
}

impl TreatmentPlan {
    pub fn new(target_items: impl IntoIterator<Item = ItemId>, price_multiplier: f64) -> Self {
        TreatmentPlan { target_items: target_items.into_iter().collect(), price_multiplier }
    }

    pub fn validate(&self, catalog: &BTreeSet<ItemId>) -> Result<()> {
        if !(self.price_multiplier > 0.0 && self.price_multiplier <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "price_multiplier must be in (0, 1], got {}",
                self.price_multiplier
            )));
        }
        if let Some(unknown) = self.target_items.iter().find(|id| !catalog.contains(*id)) {
            return Err(Error::UnknownItem(unknown.clone()));
        }
        Ok(())
    }

    /// Same multiplier, targets intersected with `keep`.
    pub fn restricted_to(&self, keep: &BTreeSet<ItemId>) -> TreatmentPlan {
        TreatmentPlan {
            target_items: self.target_items.intersection(keep).cloned().collect(),
            price_multiplier: self.price_multiplier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketShare {
    pub label: String,
    pub share: f64,
}

/// Request-stream split into buckets, each with its own set of items removed
/// from visibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkingPlan {
    pub bucket_assignments: Vec<BucketShare>,
    #[serde(default)]
    pub sunk_sets: BTreeMap<String, BTreeSet<ItemId>>,
}

impl SinkingPlan {
    pub const FULL_MARKET: &'static str = "all";
    pub const CONTROL: &'static str = "control";
    pub const TREATMENT: &'static str = "treatment";

    /// One bucket holding all traffic, nothing sunk.
    pub fn full_market() -> Self {
        SinkingPlan {
            bucket_assignments: vec![BucketShare { label: Self::FULL_MARKET.into(), share: 1.0 }],
            sunk_sets: BTreeMap::new(),
        }
    }

    /// Two 50/50 buckets: `control` hides `sunk_in_control`, `treatment`
    /// hides `sunk_in_treatment`.
    pub fn two_sided(sunk_in_control: BTreeSet<ItemId>, sunk_in_treatment: BTreeSet<ItemId>) -> Self {
        SinkingPlan {
            bucket_assignments: vec![
                BucketShare { label: Self::CONTROL.into(), share: 0.5 },
                BucketShare { label: Self::TREATMENT.into(), share: 0.5 },
            ],
            sunk_sets: BTreeMap::from([
                (Self::CONTROL.to_string(), sunk_in_control),
                (Self::TREATMENT.to_string(), sunk_in_treatment),
            ]),
        }
    }

    /// Same traffic split with nothing sunk; the reference arm for exposure
    /// comparisons.
    pub fn without_sinking(&self) -> Self {
        SinkingPlan { bucket_assignments: self.bucket_assignments.clone(), sunk_sets: BTreeMap::new() }
    }

    pub fn sunk(&self, bucket: &str) -> Option<&BTreeSet<ItemId>> {
        self.sunk_sets.get(bucket)
    }

    pub fn validate(&self, catalog: &BTreeSet<ItemId>) -> Result<()> {
        if self.bucket_assignments.is_empty() {
            return Err(Error::InvalidConfig("sinking plan needs at least one bucket".into()));
        }
        let mut labels = BTreeSet::new();
        let mut total = 0.0;
        for b in &self.bucket_assignments {
            if !(b.share.is_finite() && b.share > 0.0) {
                return Err(Error::InvalidConfig(format!("bucket `{}` share must be > 0", b.label)));
            }
            if !labels.insert(b.label.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate bucket label `{}`", b.label)));
            }
            total += b.share;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("bucket shares sum to {total}, expected 1")));
        }
        for (label, sunk) in &self.sunk_sets {
            if !labels.contains(label.as_str()) {
                return Err(Error::InvalidConfig(format!("sunk set for unknown bucket `{label}`")));
            }
            if let Some(unknown) = sunk.iter().find(|id| !catalog.contains(*id)) {
                return Err(Error::UnknownItem(unknown.clone()));
            }
        }
        Ok(())
    }
}

impl Default for SinkingPlan {
    fn default() -> Self {
        Self::full_market()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub day: u32,
    pub bucket: String,
    pub item_id: ItemId,
    pub impressions: u64,
    pub transactions: u64,
    pub gmv: f64,
}

/// Number of requests routed to a bucket on a day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficRow {
    pub day: u32,
    pub bucket: String,
    pub requests: u64,
}

/// Request-level exposure log. Items and bucket labels are interned; each
/// request's shown items occupy a contiguous slice of `shown`. Equality
/// compares the logged requests, not the interning order.
#[derive(Debug, Clone, Default)]
pub struct RequestLog {
    pub items: Vec<ItemId>,
    pub buckets: Vec<String>,
    pub entries: Vec<RequestEntry>,
    pub shown: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestEntry {
    pub day: u32,
    pub bucket: u16,
    pub request_id: u64,
    pub purchased: Option<u32>,
    pub start: u32,
    pub len: u32,
}

/// Borrowed view of one logged request.
#[derive(Debug, Clone, Copy)]
pub struct LoggedRequest<'a> {
    pub day: u32,
    pub bucket: &'a str,
    pub request_id: u64,
    pub shown: &'a [u32],
    pub purchased: Option<&'a ItemId>,
    log: &'a RequestLog,
}

impl<'a> LoggedRequest<'a> {
    pub fn shown_ids(&self) -> impl Iterator<Item = &'a ItemId> + 'a {
        let log = self.log;
        self.shown.iter().map(move |&i| &log.items[i as usize])
    }
}

impl PartialEq for RequestLog {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.requests().zip(other.requests()).all(|(a, b)| {
                a.day == b.day
                    && a.bucket == b.bucket
                    && a.request_id == b.request_id
                    && a.purchased == b.purchased
                    && a.shown_ids().eq(b.shown_ids())
            })
    }
}

impl Eq for RequestLog {}

impl RequestLog {
    pub fn new(items: Vec<ItemId>, buckets: Vec<String>) -> Self {
        RequestLog { items, buckets, entries: Vec::new(), shown: Vec::new() }
    }

    pub fn push(&mut self, day: u32, bucket: u16, request_id: u64, shown: &[u32], purchased: Option<u32>) {
        self.entries.push(RequestEntry {
            day,
            bucket,
            request_id,
            purchased,
            start: self.shown.len() as u32,
            len: shown.len() as u32,
        });
        self.shown.extend_from_slice(shown);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn requests(&self) -> impl Iterator<Item = LoggedRequest<'_>> + '_ {
        self.entries.iter().map(move |e| LoggedRequest {
            day: e.day,
            bucket: &self.buckets[e.bucket as usize],
            request_id: e.request_id,
            shown: &self.shown[e.start as usize..(e.start + e.len) as usize],
            purchased: e.purchased.map(|i| &self.items[i as usize]),
            log: self,
        })
    }
}

/// Per-day, per-bucket, per-item outcomes. Items with no impressions in a
/// bucket on a day have no row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DailyPanel {
    pub days: u32,
    pub rows: Vec<PanelRow>,
    pub traffic: Vec<TrafficRow>,
    /// Request-level exposures, present only when requested at simulation
    /// time (needed to build a competition graph).
    pub request_log: Option<RequestLog>,
}

impl DailyPanel {
    pub fn buckets(&self) -> BTreeSet<&str> {
        self.traffic.iter().map(|t| t.bucket.as_str()).chain(self.rows.iter().map(|r| r.bucket.as_str())).collect()
    }

    /// Rows of a single bucket, traffic included; the request log is dropped.
    pub fn filter_bucket(&self, bucket: &str) -> DailyPanel {
        DailyPanel {
            days: self.days,
            rows: self.rows.iter().filter(|r| r.bucket == bucket).cloned().collect(),
            traffic: self.traffic.iter().filter(|t| t.bucket == bucket).cloned().collect(),
            request_log: None,
        }
    }

    /// Sum of `metric` over rows in `window`, optionally restricted to one
    /// bucket and to a set of items.
    pub fn metric_total(
        &self,
        metric: Metric,
        window: DayWindow,
        bucket: Option<&str>,
        items: Option<&BTreeSet<ItemId>>,
    ) -> f64 {
        self.rows
            .iter()
            .filter(|r| window.contains(r.day))
            .filter(|r| bucket.is_none_or(|b| r.bucket == b))
            .filter(|r| items.is_none_or(|set| set.contains(&r.item_id)))
            .map(|r| match metric {
                Metric::Orders => r.transactions as f64,
                Metric::Gmv => r.gmv,
            })
            .sum()
    }

    pub fn impressions(&self, window: DayWindow, bucket: Option<&str>, items: &BTreeSet<ItemId>) -> u64 {
        self.rows
            .iter()
            .filter(|r| window.contains(r.day))
            .filter(|r| bucket.is_none_or(|b| r.bucket == b))
            .filter(|r| items.contains(&r.item_id))
            .map(|r| r.impressions)
            .sum()
    }

    pub fn requests(&self, window: DayWindow, bucket: Option<&str>) -> u64 {
        self.traffic
            .iter()
            .filter(|t| window.contains(t.day))
            .filter(|t| bucket.is_none_or(|b| t.bucket == b))
            .map(|t| t.requests)
            .sum()
    }

    /// Checks the row-level invariants: day range, transactions bounded by
    /// impressions, nonnegative GMV.
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if r.day >= self.days {
                return Err(Error::InvalidInput(format!("row day {} outside [0, {})", r.day, self.days)));
            }
            if r.transactions > r.impressions {
                return Err(Error::InvalidInput(format!(
                    "day {} item {}: transactions {} exceed impressions {}",
                    r.day, r.item_id, r.transactions, r.impressions
                )));
            }
            if !(r.gmv.is_finite() && r.gmv >= 0.0) {
                return Err(Error::InvalidInput(format!("day {} item {}: gmv must be >= 0", r.day, r.item_id)));
            }
        }
        Ok(())
    }
}

/// Extra outputs of a simulation run.
#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Days for which request-level exposures are logged.
    pub request_log: Option<DayWindow>,
}

/// Simulate with default options (no request log).
pub fn simulate(config: &MarketConfig, sinking: &SinkingPlan, treatment: Option<&TreatmentPlan>) -> Result<DailyPanel> {
    simulate_with(config, sinking, treatment, &SimOptions::default())
}

pub fn simulate_with(
    config: &MarketConfig,
    sinking: &SinkingPlan,
    treatment: Option<&TreatmentPlan>,
    options: &SimOptions,
) -> Result<DailyPanel> {
    config.validate()?;
    let ids = config.item_ids();
    sinking.validate(&ids)?;
    if let Some(t) = treatment {
        t.validate(&ids)?;
    }
    let market = CompiledMarket::new(config, sinking, treatment);
    Ok(market.run(config, options))
}

struct CompiledMarket {
    /// Catalog sorted by item id.
    items: Vec<ItemSpec>,
    /// Item indices per leaf, ascending.
    leaves: Vec<Vec<usize>>,
    leaf_cum_weight: Vec<f64>,
    bucket_labels: Vec<String>,
    bucket_cum_share: Vec<f64>,
    /// `sunk[b][i]`: item `i` hidden in bucket `b`.
    sunk: Vec<Vec<bool>>,
    price_pre: Vec<f64>,
    price_post: Vec<f64>,
    utility_pre: Vec<f64>,
    utility_post: Vec<f64>,
}

impl CompiledMarket {
    fn new(config: &MarketConfig, sinking: &SinkingPlan, treatment: Option<&TreatmentPlan>) -> Self {
        let mut items = config.items.clone();
        items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        let index: HashMap<&ItemId, usize> = items.iter().enumerate().map(|(i, s)| (&s.item_id, i)).collect();

        let mut by_leaf: BTreeMap<&CategoryPath, Vec<usize>> = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            by_leaf.entry(&item.category_path).or_default().push(i);
        }
        let leaves: Vec<Vec<usize>> = by_leaf.into_values().collect();
        let mut acc = 0.0;
        let leaf_cum_weight = leaves
            .iter()
            .map(|members| {
                acc += members.iter().map(|&i| items[i].base_demand_weight).sum::<f64>();
                acc
            })
            .collect();

        let bucket_labels: Vec<String> = sinking.bucket_assignments.iter().map(|b| b.label.clone()).collect();
        let mut acc = 0.0;
        let mut bucket_cum_share: Vec<f64> = sinking
            .bucket_assignments
            .iter()
            .map(|b| {
                acc += b.share;
                acc
            })
            .collect();
        // Shares are validated to sum to 1 up to rounding.
        if let Some(last) = bucket_cum_share.last_mut() {
            *last = f64::INFINITY;
        }
        let sunk = bucket_labels
            .iter()
            .map(|label| {
                let mut hidden = vec![false; items.len()];
                if let Some(set) = sinking.sunk(label) {
                    for id in set {
                        hidden[index[id]] = true;
                    }
                }
                hidden
            })
            .collect();

        let price_pre: Vec<f64> = items.iter().map(|s| s.price).collect();
        let mut price_post = price_pre.clone();
        if let Some(t) = treatment {
            for id in &t.target_items {
                price_post[index[id]] *= t.price_multiplier;
            }
        }
        let beta = config.price_sensitivity_beta;
        let utility = |prices: &[f64]| -> Vec<f64> {
            items.iter().zip(prices).map(|(s, p)| s.base_quality - beta * p).collect()
        };
        let utility_pre = utility(&price_pre);
        let utility_post = utility(&price_post);

        CompiledMarket {
            items,
            leaves,
            leaf_cum_weight,
            bucket_labels,
            bucket_cum_share,
            sunk,
            price_pre,
            price_post,
            utility_pre,
            utility_post,
        }
    }

    fn run(&self, config: &MarketConfig, options: &SimOptions) -> DailyPanel {
        let n = self.items.len();
        let n_buckets = self.bucket_labels.len();
        let total_weight = *self.leaf_cum_weight.last().expect("nonempty catalog");
        let slots = config.visible_slots as usize;
        let outside = config.outside_option_utility;

        let mut panel = DailyPanel { days: config.total_days(), ..Default::default() };
        let mut log = options.request_log.map(|_| {
            RequestLog::new(self.items.iter().map(|s| s.item_id.clone()).collect(), self.bucket_labels.clone())
        });
        let mut shown_u32: Vec<u32> = Vec::new();

        let mut impressions = vec![0u64; n_buckets * n];
        let mut transactions = vec![0u64; n_buckets * n];
        let mut requests = vec![0u64; n_buckets];
        let mut scored: Vec<(f64, usize)> = Vec::new();
        let mut shown: Vec<usize> = Vec::new();

        for day in 0..config.total_days() {
            let (price, utility) = if day < config.days_pre {
                (&self.price_pre, &self.utility_pre)
            } else {
                (&self.price_post, &self.utility_post)
            };
            let logging = options.request_log.is_some_and(|w| w.contains(day));
            impressions.iter_mut().for_each(|v| *v = 0);
            transactions.iter_mut().for_each(|v| *v = 0);
            requests.iter_mut().for_each(|v| *v = 0);

            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.rng_seed, &[u64::from(day)]));
            for r in 0..config.requests_per_day {
                // Fixed draw order: bucket, category, one ranking draw per
                // leaf member, choice.
                let u_bucket: f64 = rng.random();
                let u_leaf: f64 = rng.random::<f64>() * total_weight;
                let bucket = self.bucket_cum_share.partition_point(|&c| c <= u_bucket).min(n_buckets - 1);
                let leaf = self.leaf_cum_weight.partition_point(|&c| c <= u_leaf).min(self.leaves.len() - 1);
                requests[bucket] += 1;

                scored.clear();
                for &i in &self.leaves[leaf] {
                    let u: f64 = rng.random();
                    let gumbel = -(-(u.max(f64::MIN_POSITIVE)).ln()).ln();
                    if !self.sunk[bucket][i] {
                        scored.push((utility[i] + config.ranking_noise * gumbel, i));
                    }
                }
                let u_choice: f64 = rng.random();

                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                shown.clear();
                shown.extend(scored.iter().take(slots).map(|&(_, i)| i));
                shown.sort_unstable();

                let purchased = choose(&shown, utility, outside, u_choice);
                for &i in &shown {
                    impressions[bucket * n + i] += 1;
                }
                if let Some(i) = purchased {
                    transactions[bucket * n + i] += 1;
                }
                if logging {
                    if let Some(log) = log.as_mut() {
                        shown_u32.clear();
                        shown_u32.extend(shown.iter().map(|&i| i as u32));
                        let request_id = u64::from(day) * u64::from(config.requests_per_day) + u64::from(r);
                        log.push(day, bucket as u16, request_id, &shown_u32, purchased.map(|i| i as u32));
                    }
                }
            }

            for (b, label) in self.bucket_labels.iter().enumerate() {
                panel.traffic.push(TrafficRow { day, bucket: label.clone(), requests: requests[b] });
                for i in 0..n {
                    let imp = impressions[b * n + i];
                    if imp == 0 {
                        continue;
                    }
                    let tx = transactions[b * n + i];
                    panel.rows.push(PanelRow {
                        day,
                        bucket: label.clone(),
                        item_id: self.items[i].item_id.clone(),
                        impressions: imp,
                        transactions: tx,
                        gmv: tx as f64 * price[i],
                    });
                }
            }
        }
        panel.request_log = log;
        panel
    }
}

/// Inverse-CDF multinomial logit draw over `shown` (ascending item order)
/// followed by the outside option.
fn choose(shown: &[usize], utility: &[f64], outside: f64, u: f64) -> Option<usize> {
    if shown.is_empty() {
        return None;
    }
    let max_u = shown.iter().map(|&i| utility[i]).fold(outside, f64::max);
    let weight = |v: f64| (v - max_u).exp();
    let total: f64 = shown.iter().map(|&i| weight(utility[i])).sum::<f64>() + weight(outside);
    let target = u * total;
    let mut acc = 0.0;
    for &i in shown {
        acc += weight(utility[i]);
        if target < acc {
            return Some(i);
        }
    }
    None
}

/// Platform-wide effect of `treatment` over the post window, from twin
/// full-market runs that share every request draw.
pub fn oracle_perfect_ab(config: &MarketConfig, treatment: &TreatmentPlan, metric: Metric) -> Result<f64> {
    let plan = SinkingPlan::full_market();
    let untreated = simulate(config, &plan, None)?;
    let treated = simulate(config, &plan, Some(treatment))?;
    Ok(oracle_from_panels(config, &untreated, &treated, metric))
}

/// Δ* from already simulated untreated/treated full-market panels.
pub fn oracle_from_panels(config: &MarketConfig, untreated: &DailyPanel, treated: &DailyPanel, metric: Metric) -> f64 {
    let post = config.post_window();
    treated.metric_total(metric, post, None, None) - untreated.metric_total(metric, post, None, None)
}

/// Relative change (percent) in impressions of `watched` items between a
/// panel where competitors were sunk and a reference panel over the same
/// requests. Pass bucket-filtered panels to compare a single bucket.
pub fn measure_cannibalization(
    panel_sunk: &DailyPanel,
    panel_reference: &DailyPanel,
    watched: &BTreeSet<ItemId>,
) -> Result<f64> {
    if panel_sunk.days != panel_reference.days {
        return Err(Error::PanelMismatch(format!(
            "day ranges differ: {} vs {}",
            panel_sunk.days, panel_reference.days
        )));
    }
    let window = DayWindow::new(0, panel_sunk.days);
    let reference = panel_reference.impressions(window, None, watched);
    if reference == 0 {
        return Err(Error::UndefinedRate("watched items have zero reference impressions".into()));
    }
    let sunk = panel_sunk.impressions(window, None, watched);
    Ok((sunk as f64 - reference as f64) / reference as f64 * 100.0)
}

/// Shape of a generated catalog. Leaf `j` belongs to group
/// `j / leaves_per_group` and department `j / (leaves_per_group * groups_per_department)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogGenerator {
    pub leaves_per_group: usize,
    pub groups_per_department: usize,
    pub median_price: f64,
    pub log_price_sd: f64,
    pub quality_mean: f64,
    pub quality_sd: f64,
    pub log_demand_sd: f64,
}

impl Default for CatalogGenerator {
    fn default() -> Self {
        CatalogGenerator {
            leaves_per_group: 2,
            groups_per_department: 4,
            median_price: 50.0,
            log_price_sd: 0.4,
            quality_mean: 0.0,
            quality_sd: 0.5,
            log_demand_sd: 0.5,
        }
    }
}

impl CatalogGenerator {
    /// Items are assigned to leaves round-robin; prices are log-normal around
    /// `median_price`, qualities normal, demand weights log-normal around 1.
    pub fn generate(&self, n_items: usize, n_categories: usize, seed: u64) -> Result<Vec<ItemSpec>> {
        if n_items == 0 || n_categories == 0 {
            return Err(Error::InvalidConfig("n_items and n_categories must be >= 1".into()));
        }
        if n_items < n_categories {
            return Err(Error::InvalidConfig(format!(
                "n_items ({n_items}) must be >= n_categories ({n_categories})"
            )));
        }
        if self.leaves_per_group == 0 || self.groups_per_department == 0 {
            return Err(Error::InvalidConfig("leaves_per_group and groups_per_department must be >= 1".into()));
        }
        let price = LogNormal::new(self.median_price.ln(), self.log_price_sd)
            .map_err(|e| Error::InvalidConfig(format!("price distribution: {e}")))?;
        let quality = Normal::new(self.quality_mean, self.quality_sd)
            .map_err(|e| Error::InvalidConfig(format!("quality distribution: {e}")))?;
        let demand = LogNormal::new(0.0, self.log_demand_sd)
            .map_err(|e| Error::InvalidConfig(format!("demand distribution: {e}")))?;

        let width = n_items.to_string().len().max(5);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xca7a_1060]));
        (0..n_items)
            .map(|i| {
                let leaf = i % n_categories;
                let group = leaf / self.leaves_per_group;
                let dept = group / self.groups_per_department;
                Ok(ItemSpec {
                    item_id: ItemId(format!("item-{i:0width$}")),
                    category_path: CategoryPath::new(
                        format!("dept-{dept:03}"),
                        format!("group-{group:04}"),
                        format!("leaf-{leaf:05}"),
                    )?,
                    base_quality: quality.sample(&mut rng),
                    price: price.sample(&mut rng),
                    base_demand_weight: demand.sample(&mut rng),
                })
            })
            .collect()
    }
}

/// Catalog with the default generator shape.
pub fn generate_catalog(n_items: usize, n_categories: usize, seed: u64) -> Result<Vec<ItemSpec>> {
    CatalogGenerator::default().generate(n_items, n_categories, seed)
}
