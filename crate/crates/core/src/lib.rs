//! Knowledge graph embeddings (DistMult / ComplEx) with one regularizer
//! strength per entity and per relation, tuned by variational EM.
//!
//! The pipeline runs in three phases: MAP pre-training with
//! frequency-proportional strengths ([`trainer`]), variational EM over the
//! strengths ([`var_em`]), and MAP re-training with the tuned strengths,
//! followed by filtered link-prediction evaluation ([`eval`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod export;
pub mod model;
pub mod pipeline;
pub mod trainer;
pub mod var_em;

pub use error::{Error, Result};
pub use exec::Execution;
