//! Hybrid token/segment mixture-of-experts language model:
//! a small dense transformer, upcycling into a hybrid layer with
//! shared-expert token routing plus expert-choice segment routing,
//! training with a load-balance term, and routing analytics.

pub mod analytics;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dense;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod run;
pub mod segment_moe;
pub mod token_moe;
pub mod training;
pub mod upcycle;

pub use checkpoint::{Checkpoint, MoeConfig};
pub use dense::{init_dense, DenseConfig};
pub use error::{Error, Result};
pub use segment_moe::SegmentMoEConfig;
pub use token_moe::{GatingMode, TokenMoEConfig};
