//! Differentiable neural operators built on the tape primitives.

mod activation;
mod conv;
mod loss;
mod norm;
mod pool;
mod resample;

pub use activation::{leaky_relu, relu, sigmoid, sigmoid_scalar, softmax, softmax_values};
pub use conv::{conv, transpose_conv, ConvSpec};
pub use loss::{argmax_classes, cross_entropy};
pub use norm::{instance_norm, INSTANCE_NORM_EPS};
pub use pool::{pool, PoolKind};
pub use resample::{interpolate, rescale_levels};

use crate::error::Result;
use crate::tensor::Var;

/// Negative slope of the activation that follows every instance norm.
pub const ACTIVATION_SLOPE: f64 = 0.1;

/// Instance norm followed by a leaky ReLU: the unit after every conv.
pub fn norm_act(x: &Var) -> Result<Var> {
    leaky_relu(&instance_norm(x)?, ACTIVATION_SLOPE)
}
