//! Minimal differentiable substrate shared by every learnable model: dense
//! matrices, a reverse-mode tape, MLPs, the anti-causal attention encoder,
//! categorical utilities, Adam, finite-difference gradient checks and the
//! checkpoint format.

mod attention;
mod categorical;
pub mod checkpoint;
mod gradcheck;
mod matrix;
mod mlp;
mod params;
mod tape;

pub use attention::{AnticausalEncoder, EncoderConfig, WindowBatch};
pub use categorical::{argmax, categorical_kl, gumbel, sample_index, CategoricalDist};
pub use gradcheck::{grad_check, ArrayReport, GradCheckReport};
pub use matrix::Matrix;
pub use mlp::{Activation, Dense, LayerSpec, Mlp};
pub use params::{adam_update, Adam, ParamId, ParamStore};
pub use tape::{log_sum_exp, sigmoid, softplus, Tape, Var};
