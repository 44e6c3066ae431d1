//! Offline transfer learning for ads allocation across feed entrances.
//!
//! A data-rich source entrance and a data-poor target entrance are modelled
//! as MDPs over screens of `K` slots. Distributional N-step-return models
//! (deep-kernel sparse variational GPs) are trained on each entrance's
//! logged data; the KL divergence between their predictions gives a
//! per-sample similarity weight that gates which source samples are
//! transferred, how tightly the target agent's TD max is constrained to the
//! source agent's preferred actions, and how strongly it imitates the source
//! agent's Q-values.

pub mod agent;
pub mod config;
pub mod dataset;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod nsr;
pub mod rng;
pub mod similarity;
pub mod trainer;

pub use error::{Error, Result};
