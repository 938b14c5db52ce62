//! A small differentiable-network substrate.
//!
//! Layers own their parameters as `ndarray` arrays and implement explicit
//! `forward` / `backward` passes. Gradients are accumulated into a value of
//! the same layer type (see [`Module::zeros_like`]), so a whole network's
//! gradient has the network's own shape. Every layer is generic over
//! [`Scalar`] so the same code trains in `f32` and is gradient-checked in `f64`.

mod activation;
mod adam;
mod conv;
mod gradcheck;
mod norm;
mod transformer;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayBase, Data, Dimension};

pub use activation::{leaky_relu, leaky_relu_backward, softplus, softplus_backward};
pub use adam::{Adam, AdamConfig};
pub use conv::{Conv1d, ConvCache};
pub use gradcheck::{grad_check, relative_errors};
pub use norm::{InstanceNorm, LayerNorm, NormCache, NormMode};
pub use transformer::{TransformerCache, TransformerLayer};

use crate::error::{Error, Result};

/// Floating-point element type usable by every layer.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + num_traits::FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal to `S`.
#[inline]
pub fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("literal representable")
}

/// A named view of one parameter tensor.
#[derive(Debug)]
pub struct ParamView<'a, S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [S],
}

/// Anything holding trainable parameters.
///
/// `params` and `params_mut` must list tensors in the same order.
pub trait Module<S: Scalar>: Clone {
    fn params(&self) -> Vec<ParamView<'_, S>>;

    fn params_mut(&mut self) -> Vec<&mut [S]>;

    /// Same structure with every parameter set to zero; used as a gradient buffer.
    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for p in out.params_mut() {
            p.fill(S::zero());
        }
        out
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// `self += scale * other`, parameter by parameter.
    fn add_scaled(&mut self, other: &Self, scale: S) {
        let src: Vec<Vec<S>> = other.params().iter().map(|p| p.data.to_vec()).collect();
        for (dst, src) in self.params_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

pub(crate) fn view<'a, S, D: Dimension>(
    name: impl Into<String>,
    arr: &'a ArrayBase<impl Data<Elem = S>, D>,
) -> ParamView<'a, S> {
    ParamView {
        name: name.into(),
        shape: arr.shape().to_vec(),
        data: arr.as_slice().expect("parameters are contiguous"),
    }
}

pub(crate) fn prefixed<'a, S>(prefix: &str, views: Vec<ParamView<'a, S>>) -> Vec<ParamView<'a, S>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}

/// Fails with `NonFinite` if any element is NaN or infinite.
pub fn ensure_finite<S: Scalar, D: Dimension>(
    arr: &ArrayBase<impl Data<Elem = S>, D>,
    op: &str,
) -> Result<()> {
    if arr.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}
