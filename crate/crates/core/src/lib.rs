//! Sequential entity linking with a learned mention order.
//!
//! A policy network picks, at each step, which of the earliest unresolved
//! mentions to link next; a candidate selector then links it using the
//! entities already resolved.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod local_attn;
pub mod model;
pub mod nn;
pub mod policy;
pub mod rewards;
pub mod rollout;
pub mod selector;
pub mod sweep;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/rewards.md")]
    mod rewards {}
    #[doc = include_str!("../../../book/src/ordering.md")]
    mod ordering {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/checks.md")]
    mod checks {}
}
