use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;

use super::{ensure_finite, lit, view, Module, ParamView, Scalar};
use crate::error::{Error, Result};

/// Stride-1 1-D convolution (cross-correlation) with zero "same" padding.
///
/// Input and output are `channels x time`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<S> {
    /// `[out, in, kernel]`
    pub weight: Array3<S>,
    pub bias: Array1<S>,
}

/// Unfolded input columns kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<S> {
    cols: Array2<S>,
}

impl<S: Scalar> Conv1d<S> {
    /// Fan-in scaled uniform init in `±1/sqrt(in * kernel)`.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        let weight = Array3::from_shape_simple_fn((out_channels, in_channels, kernel), || {
            lit(rng.random_range(-bound..bound))
        });
        let bias = Array1::from_shape_simple_fn(out_channels, || lit(rng.random_range(-bound..bound)));
        Self { weight, bias }
    }

    pub fn from_parts(weight: Array3<S>, bias: Array1<S>) -> Result<Self> {
        if weight.dim().0 != bias.len() {
            return Err(Error::ShapeMismatch(format!(
                "conv weight has {} filters but bias has {}",
                weight.dim().0,
                bias.len()
            )));
        }
        if weight.dim().2 % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("kernel size {} is not odd", weight.dim().2)));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, S> {
        let (o, i, k) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, i * k)).unwrap()
    }

    fn unfold(&self, x: &Array2<S>) -> Array2<S> {
        let (cin, t) = x.dim();
        let k = self.kernel();
        let pad = (k / 2) as isize;
        let mut cols = Array2::zeros((cin * k, t));
        for ci in 0..cin {
            let src = x.row(ci);
            for j in 0..k {
                let shift = j as isize - pad;
                // cols[ci*k + j, t] = x[ci, t + shift]
                let (dst_lo, src_lo) = if shift < 0 { ((-shift) as usize, 0) } else { (0, shift as usize) };
                if dst_lo >= t || src_lo >= t {
                    continue;
                }
                let n = t - dst_lo.max(src_lo);
                cols.slice_mut(s![ci * k + j, dst_lo..dst_lo + n])
                    .assign(&src.slice(s![src_lo..src_lo + n]));
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array2<S>) -> Result<Array2<S>> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &Array2<S>) -> Result<(Array2<S>, ConvCache<S>)> {
        if x.nrows() != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                x.nrows()
            )));
        }
        let cols = self.unfold(x);
        let mut y = self.weight_matrix().dot(&cols);
        y += &self.bias.view().insert_axis(Axis(1));
        ensure_finite(&y, "conv1d")?;
        Ok((y, ConvCache { cols }))
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, cache: &ConvCache<S>, dy: &Array2<S>, grad: &mut Self) -> Array2<S> {
        let (o, cin, k) = self.weight.dim();
        let t = dy.ncols();
        let dw = dy.dot(&cache.cols.t());
        {
            let mut gw = grad.weight.view_mut().into_shape_with_order((o, cin * k)).unwrap();
            gw += &dw;
        }
        grad.bias += &dy.sum_axis(Axis(1));
        let dcols = self.weight_matrix().t().dot(dy);
        let pad = (k / 2) as isize;
        let mut dx = Array2::zeros((cin, t));
        for ci in 0..cin {
            for j in 0..k {
                let shift = j as isize - pad;
                let (dst_lo, src_lo) = if shift < 0 { ((-shift) as usize, 0) } else { (0, shift as usize) };
                if dst_lo >= t || src_lo >= t {
                    continue;
                }
                let n = t - dst_lo.max(src_lo);
                let mut target = dx.slice_mut(s![ci, src_lo..src_lo + n]);
                target += &dcols.slice(s![ci * k + j, dst_lo..dst_lo + n]);
            }
        }
        dx
    }
}

impl<S: Scalar> Module<S> for Conv1d<S> {
    fn params(&self) -> Vec<ParamView<'_, S>> {
        vec![view("weight", &self.weight), view("bias", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut [S]> {
        vec![
            self.weight.as_slice_mut().unwrap(),
            self.bias.as_slice_mut().unwrap(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct triple loop with explicit zero padding.
    fn naive_conv(conv: &Conv1d<f64>, x: &Array2<f64>) -> Array2<f64> {
        let (o, cin, k) = conv.weight.dim();
        let t = x.ncols() as isize;
        let pad = (k / 2) as isize;
        let mut y = Array2::zeros((o, t as usize));
        for co in 0..o {
            for tt in 0..t {
                let mut acc = conv.bias[co];
                for ci in 0..cin {
                    for j in 0..k {
                        let src = tt + j as isize - pad;
                        if (0..t).contains(&src) {
                            acc += conv.weight[[co, ci, j]] * x[[ci, src as usize]];
                        }
                    }
                }
                y[[co, tt as usize]] = acc;
            }
        }
        y
    }

    fn random_input(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_copies_input() {
        let conv = Conv1d::from_parts(Array3::ones((1, 1, 1)), Array1::zeros(1)).unwrap();
        let x = Array2::from_shape_vec((1, 4), vec![1.0f32, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv1d::<f32>::new(3, 2, 5, &mut rng);
        let y = conv.forward(&Array2::zeros((3, 6))).unwrap();
        for (row, &b) in y.rows().into_iter().zip(&conv.bias) {
            assert!(row.iter().all(|&v| v == b));
        }
    }

    #[test]
    fn even_kernels_and_bad_channels_rejected() {
        assert!(Conv1d::<f32>::from_parts(Array3::zeros((1, 1, 2)), Array1::zeros(1)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv1d::<f32>::new(3, 2, 3, &mut rng);
        assert!(matches!(conv.forward(&Array2::zeros((4, 5))), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn matches_naive_loop_and_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let conv = Conv1d::<f64>::new(3, 4, 3, &mut rng);
            let x = random_input(3, 8, &mut rng);
            let fast = conv.forward(&x).unwrap();
            let slow = naive_conv(&conv, &x);
            assert!((&fast - &slow).iter().all(|d| d.abs() < 1e-6));

            // scalar objective: weighted sum of outputs
            let weights = random_input(4, 8, &mut rng);
            let (_, cache) = conv.forward_train(&x).unwrap();
            let mut grad = conv.zeros_like();
            let dx = conv.backward(&cache, &weights, &mut grad);
            let f = |v: &[f64]| {
                let xi = Array2::from_shape_vec((3, 8), v.to_vec()).unwrap();
                (&conv.forward(&xi).unwrap() * &weights).sum()
            };
            let err = grad_check(f, dx.as_slice().unwrap(), x.as_slice().unwrap());
            assert!(err < 1e-4, "seed {seed}: {err}");

            // parameter gradient
            let wflat = conv.weight.as_slice().unwrap().to_vec();
            let fw = |v: &[f64]| {
                let mut c = conv.clone();
                c.weight.as_slice_mut().unwrap().copy_from_slice(v);
                (&c.forward(&x).unwrap() * &weights).sum()
            };
            let err = grad_check(fw, grad.weight.as_slice().unwrap(), &wflat);
            assert!(err < 1e-4, "seed {seed}: weight {err}");
        }
    }
}
