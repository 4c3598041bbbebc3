//! Minimal differentiable numeric core.
//!
//! Layers are plain structs over [`Parameter`]s. Each `forward` returns the
//! output together with a context holding exactly the activations its
//! `backward` needs; `backward` accumulates parameter gradients and returns
//! the gradient with respect to the layer input. Everything is `f64` so the
//! analytic gradients can be validated against central finite differences.
//!
//! There is no graph, no broadcasting beyond what each layer defines, and
//! every forward validates shapes with a typed error.

mod attention;
mod block;
mod ffn;
mod gradcheck;
#[cfg(test)]
mod gradtests;
mod linear;
mod norm;
mod ops;
mod param;
mod patch;

pub use attention::{AttentionMask, AttnCtx, MultiHeadAttention, BLOCKED_BIAS};
pub use block::{Block, BlockCtx};
pub use ffn::{Activation, FeedForward, FfnCtx};
pub use gradcheck::{check_against_finite_differences, collect_grads, GradCheckStats};
pub use linear::{Linear, LinearCtx};
pub use norm::{LayerNorm, LayerNormCtx};
pub use ops::{gelu, gelu_prime, sigmoid, softmax_rows, softmax_slice};
pub use param::Parameter;
pub use patch::{PatchCtx, PatchEmbed};
