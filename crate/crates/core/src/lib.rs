//! Impression allocation between guaranteed-delivery contracts and real-time
//! bidding.
//!
//! Each contract bids `λ_j q_ij + α_j` against the second RTB price. The
//! offsets α can be fixed at the optimum of the allocation LP ([`lp`]), paced
//! by classical controllers ([`baselines`]), or adjusted step by step by a
//! learned multi-agent policy ([`marlia`]).

pub mod baselines;
pub mod harness;
pub mod lp;
pub mod market;
pub mod marlia;
pub mod rng;
pub mod traffic;

pub use market::{Contract, Impression, Market, OutcomeReport, Target};
