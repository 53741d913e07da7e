//! Competitive-isolation experiment design and DID estimation for two-sided
//! marketplaces, with a synthetic marketplace simulator.

pub mod error;
pub mod campaign;
pub mod estimator;
pub mod graph;
pub mod io;
pub mod market;
pub mod matching;
pub mod partition;
pub mod pipeline;
pub mod scenarios;
pub mod types;

pub use error::{Error, Result};
pub use types::{derive_seed, stable_hash, CategoryPath, DayWindow, ItemId, Metric};
