//! Privacy-aware personalized ranking.
//!
//! A pairwise-ranking recommender is trained jointly against an internal
//! attribute-inference attacker: the attacker learns to predict private
//! user attributes (gender, age bucket, occupation) from item lists, and
//! the recommender is optimized to rank well while degrading that
//! attacker. The crate also ships the evaluation harness: data loading
//! and splitting for the MovieLens-100K layout, an external feed-forward
//! adversary, perturbation baselines, ranking metrics, and a CLI.

pub mod adversary;
pub mod advtrain;
pub mod attacker;
pub mod baselines;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nnkernel;
pub mod recommender;

pub use error::{RapError, Result};
