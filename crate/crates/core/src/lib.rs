//! Offline preference-based reinforcement learning on tabular MDPs with
//! hindsight preference learning: a future-segment VAE, future-conditioned
//! Bradley-Terry reward learning, prior-marginalised reward labelling and
//! implicit Q-learning, plus the Markovian-reward baselines and experiment
//! recipes that compare them.

pub mod config;
pub mod datasets;
pub mod envs;
pub mod error;
pub mod experiments;
pub mod hindsight_vae;
pub mod io;
pub mod numcore;
pub mod pipeline;
pub mod preference;
pub mod rl;
pub mod seeds;
pub mod stats;

pub use error::{Error, Result};
