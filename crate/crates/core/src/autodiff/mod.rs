//! Differentiable operators and layers shared by every learned module.

pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;

pub use gradcheck::{GradCheck, GradCheckReport};
pub use nn::{Activation, AttentionOutput, KeyLayout, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use params::{Bound, Init, ParamId, ParamStore};
pub use tape::{Gradients, Mat, Tape, Var};
