//! Deterministic simulator of a token-curated data market coupled to a
//! trusted computation market.
//!
//! Contributors submit datasets to a token-voted association; accepted
//! contributions land in an on-chain registry and earn shares that pay
//! dividends whenever a training job uses the data. Jobs are scheduled by a
//! trusted coordinator onto untrusted workers under triple modular
//! redundancy, a per-worker data exposure cap and optional model splitting,
//! all over a discrete-event network simulation with fault injection.

pub mod cli;
pub mod compute_market;
pub mod coordinator;
pub mod data_market;
pub mod fraction;
pub mod ledger;
pub mod model_split;
pub mod simnet;
pub mod verification;
