//! Shared inputs for the criterion benches.

use std::collections::BTreeSet;

use compiso_core::graph::CompetitionGraph;
use compiso_core::market::{MarketConfig, TreatmentPlan};
use compiso_core::scenarios::Scenario;
use compiso_core::ItemId;

/// Market and treatment of a bundled scenario at seed 1.
pub fn scenario(name: &str) -> (MarketConfig, TreatmentPlan) {
    Scenario::bundled(name).and_then(|s| s.instantiate(1)).expect("bundled scenario")
}

/// The same market with fewer requests per day, for quicker iterations.
pub fn scenario_with_requests(name: &str, requests_per_day: u32) -> (MarketConfig, TreatmentPlan) {
    let (mut config, plan) = scenario(name);
    config.requests_per_day = requests_per_day;
    (config, plan)
}

pub fn targets_of(plan: &TreatmentPlan) -> BTreeSet<ItemId> {
    plan.target_items.clone()
}

pub fn two_block(block: usize) -> CompetitionGraph {
    compiso_core::scenarios::two_block_graph(block, block / 5, 3)
}
