//! Forward operations and their analytic backward passes.

mod act;
mod conv;
mod linear;
mod loss;
mod norm;

pub use act::{silu, silu_backward, softplus, softplus_backward};
pub use conv::{depthwise_conv1d_causal, depthwise_conv1d_causal_backward};
pub use linear::{linear, linear_backward};
pub use loss::{cross_entropy, cross_entropy_backward, l1_loss, l1_loss_backward};
pub use norm::{layer_norm, layer_norm_backward};
