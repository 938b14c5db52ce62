//! Instance normalization (per channel over time) and layer normalization
//! (per time step over features). Both normalize the rows of a 2-D array.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{ensure_finite, lit, view, Module, ParamView, Scalar};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Subtract the mean and divide by the standard deviation.
    Full,
    /// Subtract the mean only; keeps the level of each row.
    MeanOnly,
}

#[derive(Debug, Clone)]
pub struct NormCache<S> {
    xhat: Array2<S>,
    inv_std: Option<Array1<S>>,
}

fn normalize_rows<S: Scalar>(x: &Array2<S>, mode: NormMode) -> NormCache<S> {
    let n = lit::<S>(x.ncols() as f64);
    let mean = x.sum_axis(Axis(1)) / n;
    let mut xhat = x - &mean.view().insert_axis(Axis(1));
    let inv_std = match mode {
        NormMode::MeanOnly => None,
        NormMode::Full => {
            let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / n;
            let inv = var.mapv(|v| S::one() / (v + lit(NORM_EPS)).sqrt());
            xhat *= &inv.view().insert_axis(Axis(1));
            Some(inv)
        }
    };
    NormCache { xhat, inv_std }
}

/// Backward of row normalization given the gradient w.r.t. the normalized values.
fn normalize_rows_backward<S: Scalar>(cache: &NormCache<S>, dxhat: &Array2<S>) -> Array2<S> {
    let n = lit::<S>(dxhat.ncols() as f64);
    let mean_d = (dxhat.sum_axis(Axis(1)) / n).insert_axis(Axis(1));
    match &cache.inv_std {
        None => dxhat - &mean_d,
        Some(inv) => {
            let mean_dx = ((dxhat * &cache.xhat).sum_axis(Axis(1)) / n).insert_axis(Axis(1));
            let mut dx = dxhat - &mean_d - &(&cache.xhat * &mean_dx);
            dx *= &inv.view().insert_axis(Axis(1));
            dx
        }
    }
}

/// Instance normalization over a `channels x time` input with optional per-channel affine.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNorm<S> {
    pub mode: NormMode,
    pub gain: Option<Array1<S>>,
    pub bias: Option<Array1<S>>,
}

impl<S: Scalar> InstanceNorm<S> {
    pub fn new(channels: usize, mode: NormMode, affine: bool) -> Self {
        Self {
            mode,
            gain: affine.then(|| Array1::ones(channels)),
            bias: affine.then(|| Array1::zeros(channels)),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> Result<Array2<S>> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &Array2<S>) -> Result<(Array2<S>, NormCache<S>)> {
        if x.ncols() == 0 {
            return Err(Error::EmptyInput);
        }
        if let Some(g) = &self.gain {
            if g.len() != x.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "instance norm over {} channels got {}",
                    g.len(),
                    x.nrows()
                )));
            }
        }
        let cache = normalize_rows(x, self.mode);
        let mut y = cache.xhat.clone();
        if let (Some(g), Some(b)) = (&self.gain, &self.bias) {
            y *= &g.view().insert_axis(Axis(1));
            y += &b.view().insert_axis(Axis(1));
        }
        ensure_finite(&y, "instance_norm")?;
        Ok((y, cache))
    }

    pub fn backward(&self, cache: &NormCache<S>, dy: &Array2<S>, grad: &mut Self) -> Array2<S> {
        let dxhat = match (&self.gain, &mut grad.gain, &mut grad.bias) {
            (Some(g), Some(gg), Some(gb)) => {
                *gg += &(dy * &cache.xhat).sum_axis(Axis(1));
                *gb += &dy.sum_axis(Axis(1));
                dy * &g.view().insert_axis(Axis(1))
            }
            _ => dy.clone(),
        };
        normalize_rows_backward(cache, &dxhat)
    }
}

impl<S: Scalar> Module<S> for InstanceNorm<S> {
    fn params(&self) -> Vec<ParamView<'_, S>> {
        let mut out = Vec::new();
        if let (Some(g), Some(b)) = (&self.gain, &self.bias) {
            out.push(view("gain", g));
            out.push(view("bias", b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = Vec::new();
        if let (Some(g), Some(b)) = (&mut self.gain, &mut self.bias) {
            out.push(g.as_slice_mut().unwrap());
            out.push(b.as_slice_mut().unwrap());
        }
        out
    }
}

/// Layer normalization over a `time x features` input with per-feature affine.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<S> {
    pub gain: Array1<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(features: usize) -> Self {
        Self {
            gain: Array1::ones(features),
            bias: Array1::zeros(features),
        }
    }

    pub fn forward_train(&self, x: &Array2<S>) -> (Array2<S>, NormCache<S>) {
        let cache = normalize_rows(x, NormMode::Full);
        let y = &cache.xhat * &self.gain + &self.bias;
        (y, cache)
    }

    pub fn backward(&self, cache: &NormCache<S>, dy: &Array2<S>, grad: &mut Self) -> Array2<S> {
        grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        normalize_rows_backward(cache, &(dy * &self.gain))
    }
}

impl<S: Scalar> Module<S> for LayerNorm<S> {
    fn params(&self) -> Vec<ParamView<'_, S>> {
        vec![view("gain", &self.gain), view("bias", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut [S]> {
        vec![
            self.gain.as_slice_mut().unwrap(),
            self.bias.as_slice_mut().unwrap(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn constant_channels_normalize_to_zero() {
        let x = Array2::from_elem((2, 5), 3.0f32);
        for mode in [NormMode::Full, NormMode::MeanOnly] {
            let y = InstanceNorm::new(2, mode, false).forward(&x).unwrap();
            assert!(y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_moments() {
        let x = random(4, 16, 1);
        let full = InstanceNorm::new(4, NormMode::Full, false).forward(&x).unwrap();
        let mean_only = InstanceNorm::new(4, NormMode::MeanOnly, false).forward(&x).unwrap();
        for (f, m) in full.rows().into_iter().zip(mean_only.rows()) {
            let mean = f.mean().unwrap();
            let var = f.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
            assert!(m.mean().unwrap().abs() <= 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let x = random(3, 7, seed);
            let w = random(3, 7, seed + 100);
            for mode in [NormMode::Full, NormMode::MeanOnly] {
                let mut norm = InstanceNorm::<f64>::new(3, mode, true);
                norm.gain = Some(random(1, 3, seed + 7).row(0).to_owned());
                norm.bias = Some(random(1, 3, seed + 8).row(0).to_owned());
                let (_, cache) = norm.forward_train(&x).unwrap();
                let mut grad = norm.zeros_like();
                let dx = norm.backward(&cache, &w, &mut grad);
                let f = |v: &[f64]| {
                    let a = Array2::from_shape_vec((3, 7), v.to_vec()).unwrap();
                    (&norm.forward(&a).unwrap() * &w).sum()
                };
                let err = grad_check(f, dx.as_slice().unwrap(), x.as_slice().unwrap());
                assert!(err < 1e-4, "{mode:?} seed {seed}: {err}");

                let g0 = norm.gain.clone().unwrap();
                let fg = |v: &[f64]| {
                    let mut n = norm.clone();
                    n.gain = Some(Array1::from(v.to_vec()));
                    (&n.forward(&x).unwrap() * &w).sum()
                };
                let err = grad_check(fg, grad.gain.as_ref().unwrap().as_slice().unwrap(), g0.as_slice().unwrap());
                assert!(err < 1e-4);
            }
        }
    }

    #[test]
    fn layer_norm_gradient() {
        for seed in 0..20 {
            let x = random(4, 6, seed);
            let w = random(4, 6, seed + 50);
            let mut ln = LayerNorm::<f64>::new(6);
            ln.gain = random(1, 6, seed + 3).row(0).to_owned();
            let (_, cache) = ln.forward_train(&x);
            let mut grad = ln.zeros_like();
            let dx = ln.backward(&cache, &w, &mut grad);
            let f = |v: &[f64]| {
                let a = Array2::from_shape_vec((4, 6), v.to_vec()).unwrap();
                (&ln.forward_train(&a).0 * &w).sum()
            };
            assert!(grad_check(f, dx.as_slice().unwrap(), x.as_slice().unwrap()) < 1e-4);
        }
    }
}
