//! Bundled simulation scenarios, target selection and graph fixtures.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CompetitionGraph, NodeMetrics};
use crate::market::{CatalogGenerator, ItemSpec, MarketConfig, TreatmentPlan};
use crate::matching::{MatchOptions, StratificationConfig};
use crate::partition::BalanceConstraints;
use crate::pipeline::PipelineOptions;
use crate::types::{derive_seed, CategoryPath, ItemId};

const CATALOG_STREAM: u64 = 0x6361_7461;
const TARGET_STREAM: u64 = 0x7467_7473;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogSpec {
    pub n_items: usize,
    pub n_categories: usize,
    #[serde(default)]
    pub generator: CatalogGenerator,
    /// Fixed catalog seed; when absent the catalog is redrawn per replicate.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Targets are every `item_fraction` share (at least one item) of a random
/// `leaf_fraction` share of leaf categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSelection {
    pub leaf_fraction: f64,
    pub item_fraction: f64,
}

impl TargetSelection {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("leaf_fraction", self.leaf_fraction), ("item_fraction", self.item_fraction)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

pub fn select_targets(items: &[ItemSpec], selection: &TargetSelection, seed: u64) -> Result<BTreeSet<ItemId>> {
    selection.validate()?;
    let mut leaves: BTreeMap<&CategoryPath, Vec<&ItemId>> = BTreeMap::new();
    for item in items {
        leaves.entry(&item.category_path).or_default().push(&item.item_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TARGET_STREAM]));
    let mut keys: Vec<&CategoryPath> = leaves.keys().copied().collect();
    keys.shuffle(&mut rng);
    let n_leaves = ((keys.len() as f64 * selection.leaf_fraction).round() as usize).clamp(1, keys.len());
    let mut targets = BTreeSet::new();
    for key in &keys[..n_leaves] {
        let mut members = leaves[key].clone();
        members.shuffle(&mut rng);
        let take = ((members.len() as f64 * selection.item_fraction).round() as usize).clamp(1, members.len());
        targets.extend(members[..take].iter().map(|id| (*id).clone()));
    }
    Ok(targets)
}

/// A market shape plus how to draw its catalog and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub catalog: CatalogSpec,
    pub requests_per_day: u32,
    pub days_pre: u32,
    pub days_post: u32,
    pub price_sensitivity_beta: f64,
    pub outside_option_utility: f64,
    pub visible_slots: u32,
    #[serde(default = "one")]
    pub ranking_noise: f64,
    pub targets: TargetSelection,
    pub price_multiplier: f64,
    #[serde(default)]
    pub pipeline: PipelineOptions,
}

fn one() -> f64 {
    1.0
}

impl Scenario {
    /// Market and treatment for one replicate seed.
    pub fn instantiate(&self, seed: u64) -> Result<(MarketConfig, TreatmentPlan)> {
        let catalog_seed = self.catalog.seed.unwrap_or_else(|| derive_seed(seed, &[CATALOG_STREAM]));
        let items = self.catalog.generator.generate(self.catalog.n_items, self.catalog.n_categories, catalog_seed)?;
        let targets = select_targets(&items, &self.targets, catalog_seed)?;
        let config = MarketConfig {
            items,
            requests_per_day: self.requests_per_day,
            days_pre: self.days_pre,
            days_post: self.days_post,
            price_sensitivity_beta: self.price_sensitivity_beta,
            outside_option_utility: self.outside_option_utility,
            visible_slots: self.visible_slots,
            rng_seed: seed,
            ranking_noise: self.ranking_noise,
        };
        config.validate()?;
        let treatment = TreatmentPlan { target_items: targets, price_multiplier: self.price_multiplier };
        treatment.validate(&config.item_ids())?;
        Ok((config, treatment))
    }

    pub fn with_multiplier(&self, price_multiplier: f64) -> Scenario {
        Scenario { price_multiplier, ..self.clone() }
    }

    /// Bundled scenario by name: `high_interference`, `scale_1k`, `scale_5k`
    /// or `scale_20k`.
    pub fn bundled(name: &str) -> Result<Scenario> {
        match name {
            "high_interference" => Ok(high_interference()),
            "scale_1k" => Ok(scale(1_000)),
            "scale_5k" => Ok(scale(5_000)),
            "scale_20k" => Ok(scale(20_000)),
            other => Err(Error::InvalidConfig(format!(
                "unknown scenario `{other}` (expected high_interference, scale_1k, scale_5k or scale_20k)"
            ))),
        }
    }

    pub const BUNDLED: [&'static str; 4] = ["high_interference", "scale_1k", "scale_5k", "scale_20k"];
}

fn desk_pipeline() -> PipelineOptions {
    PipelineOptions {
        constraints: BalanceConstraints::default(),
        matching: MatchOptions {
            stratification: StratificationConfig {
                category_depth: 1,
                transaction_decile_count: 10,
                price_decile_count: 2,
                ..Default::default()
            },
            ..Default::default()
        },
        ..Default::default()
    }
}

fn generator() -> CatalogGenerator {
    CatalogGenerator {
        leaves_per_group: 6,
        groups_per_department: 4,
        log_price_sd: 0.2,
        quality_sd: 0.3,
        log_demand_sd: 0.25,
        ..Default::default()
    }
}

/// Leaves of ten items with four visible slots; targets fill nine tenths of
/// a third of the leaves, so the remaining leaf-mates compete directly with
/// them.
pub fn high_interference() -> Scenario {
    Scenario {
        name: "high_interference".into(),
        catalog: CatalogSpec { n_items: 600, n_categories: 60, generator: generator(), seed: None },
        requests_per_day: 80_000,
        days_pre: 7,
        days_post: 7,
        price_sensitivity_beta: 0.07,
        outside_option_utility: 1.0,
        visible_slots: 4,
        ranking_noise: 1.0,
        targets: TargetSelection { leaf_fraction: 0.3, item_fraction: 0.9 },
        price_multiplier: 0.8,
        pipeline: desk_pipeline(),
    }
}

/// Roughly `daily_orders` simulated orders per day (about one request in
/// five converts); catalog and traffic grow together.
pub fn scale(daily_orders: u32) -> Scenario {
    let n_items = (daily_orders as usize / 10).clamp(200, 2_000);
    Scenario {
        name: format!("scale_{}k", daily_orders / 1000),
        catalog: CatalogSpec { n_items, n_categories: n_items / 10, generator: generator(), seed: None },
        requests_per_day: daily_orders * 5,
        price_sensitivity_beta: 0.04,
        ..high_interference()
    }
}

/// Two dense communities of `block` nodes each joined by a few light
/// bridge edges. Intra-block edges appear with probability 0.6.
pub fn two_block_graph(block: usize, bridges: usize, seed: u64) -> CompetitionGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ItemId> = (0..2 * block).map(|i| ItemId(format!("n{i:03}"))).collect();
    let nodes = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let metrics = NodeMetrics {
                pv: 1000,
                orders: 50,
                gmv: 2500.0,
                price: 50.0,
                category_path: CategoryPath::new("fixture", format!("block-{}", i / block), "all")
                    .expect("static path is valid"),
            };
            (id.clone(), metrics)
        })
        .collect();
    let mut graph = CompetitionGraph::new(nodes);
    for b in 0..2 {
        let members = &ids[b * block..(b + 1) * block];
        for (i, u) in members.iter().enumerate() {
            for v in &members[i + 1..] {
                if rng.random::<f64>() < 0.6 {
                    let w = rng.random_range(5.0..15.0_f64).round();
                    graph.add_weight(u, v, w).expect("fixture edges are valid");
                }
            }
        }
    }
    let (left, right) = ids.split_at(block);
    for _ in 0..bridges {
        let u = left.choose(&mut rng).expect("nonempty block");
        let v = right.choose(&mut rng).expect("nonempty block");
        graph.add_weight(u, v, 1.0).expect("fixture edges are valid");
    }
    graph
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_instantiate() {
        for name in Scenario::BUNDLED {
            let s = Scenario::bundled(name).unwrap();
            let (cfg, plan) = s.instantiate(1).unwrap();
            assert_eq!(cfg.items.len(), s.catalog.n_items);
            assert!(!plan.target_items.is_empty());
        }
        assert!(Scenario::bundled("nope").is_err());
    }

    #[test]
    fn targets_cover_requested_leaf_share() {
        let items = crate::market::generate_catalog(100, 10, 3).unwrap();
        let sel = TargetSelection { leaf_fraction: 0.3, item_fraction: 0.5 };
        let t = select_targets(&items, &sel, 9).unwrap();
        assert_eq!(t.len(), 15);
        let leaves: BTreeSet<_> = items.iter().filter(|i| t.contains(&i.item_id)).map(|i| &i.category_path).collect();
        assert_eq!(leaves.len(), 3);
        assert_eq!(select_targets(&items, &sel, 9).unwrap(), t);
        assert!(select_targets(&items, &TargetSelection { leaf_fraction: 0.0, item_fraction: 1.0 }, 1).is_err());
    }

    #[test]
    fn two_block_graph_shape() {
        let g = two_block_graph(10, 3, 1);
        assert_eq!(g.node_count(), 20);
        let left: BTreeSet<ItemId> = (0..10).map(|i| ItemId(format!("n{i:03}"))).collect();
        assert!(g.cut_weight(&left) <= 3.0);
        assert!(g.total_weight() > 100.0);
    }
}
