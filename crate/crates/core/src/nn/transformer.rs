//! Pre-norm transformer encoder layer over a `time x features` sequence.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::norm::{LayerNorm, NormCache};
use super::{ensure_finite, leaky_relu, leaky_relu_backward, lit, prefixed, view, Module, ParamView, Scalar};
use crate::error::{Error, Result};

/// `y = x1 + FFN(LN2(x1))` with `x1 = x + MHSA(LN1(x))`; no causal mask.
///
/// Projection weights are stored `[in, out]` and applied as `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer<S> {
    pub heads: usize,
    pub slope: S,
    pub ln1: LayerNorm<S>,
    pub wq: Array2<S>,
    pub bq: Array1<S>,
    pub wk: Array2<S>,
    pub bk: Array1<S>,
    pub wv: Array2<S>,
    pub bv: Array1<S>,
    pub wo: Array2<S>,
    pub bo: Array1<S>,
    pub ln2: LayerNorm<S>,
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    pub w2: Array2<S>,
    pub b2: Array1<S>,
}

#[derive(Debug, Clone)]
pub struct TransformerCache<S> {
    ln1: NormCache<S>,
    h1: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    /// Per-head attention weights, `time x time`, rows sum to one.
    attn: Vec<Array2<S>>,
    o: Array2<S>,
    ln2: NormCache<S>,
    h2: Array2<S>,
    u: Array2<S>,
    a: Array2<S>,
}

impl<S> TransformerCache<S> {
    pub fn attention(&self) -> &[Array2<S>] {
        &self.attn
    }
}

fn scaled_normal<S: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<S> {
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).unwrap();
    Array2::from_shape_simple_fn((rows, cols), || lit(normal.sample(rng)))
}

fn softmax_rows<S: Scalar>(scores: &mut Array2<S>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(S::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl<S: Scalar> TransformerLayer<S> {
    pub fn new(dim: usize, heads: usize, ff_dim: usize, slope: S, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::HeadDivisibility { dim, heads });
        }
        Ok(Self {
            heads,
            slope,
            ln1: LayerNorm::new(dim),
            wq: scaled_normal(dim, dim, rng),
            bq: Array1::zeros(dim),
            wk: scaled_normal(dim, dim, rng),
            bk: Array1::zeros(dim),
            wv: scaled_normal(dim, dim, rng),
            bv: Array1::zeros(dim),
            wo: scaled_normal(dim, dim, rng),
            bo: Array1::zeros(dim),
            ln2: LayerNorm::new(dim),
            w1: scaled_normal(dim, ff_dim, rng),
            b1: Array1::zeros(ff_dim),
            w2: scaled_normal(ff_dim, dim, rng),
            b2: Array1::zeros(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn forward(&self, x: &Array2<S>) -> Result<Array2<S>> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &Array2<S>) -> Result<(Array2<S>, TransformerCache<S>)> {
        let d = self.dim();
        if x.ncols() != d {
            return Err(Error::ShapeMismatch(format!("transformer expects {d} features, got {}", x.ncols())));
        }
        let dh = d / self.heads;
        let scale = lit::<S>(1.0 / (dh as f64).sqrt());

        let (h1, ln1) = self.ln1.forward_train(x);
        let q = h1.dot(&self.wq) + &self.bq;
        let k = h1.dot(&self.wk) + &self.bk;
        let v = h1.dot(&self.wv) + &self.bv;
        let mut o = Array2::zeros(x.raw_dim());
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            attn.push(scores);
        }
        let x1 = x + &(o.dot(&self.wo) + &self.bo);
        let (h2, ln2) = self.ln2.forward_train(&x1);
        let u = h2.dot(&self.w1) + &self.b1;
        let a = leaky_relu(&u, self.slope);
        let y = &x1 + &(a.dot(&self.w2) + &self.b2);
        ensure_finite(&y, "transformer_encoder_layer")?;
        Ok((
            y,
            TransformerCache { ln1, h1, q, k, v, attn, o, ln2, h2, u, a },
        ))
    }

    pub fn backward(&self, cache: &TransformerCache<S>, dy: &Array2<S>, grad: &mut Self) -> Array2<S> {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = lit::<S>(1.0 / (dh as f64).sqrt());

        // feed-forward branch
        grad.w2 += &cache.a.t().dot(dy);
        grad.b2 += &dy.sum_axis(Axis(0));
        let da = dy.dot(&self.w2.t());
        let du = leaky_relu_backward(&cache.u, &da, self.slope);
        grad.w1 += &cache.h2.t().dot(&du);
        grad.b1 += &du.sum_axis(Axis(0));
        let dh2 = du.dot(&self.w1.t());
        let dx1 = dy + &self.ln2.backward(&cache.ln2, &dh2, &mut grad.ln2);

        // attention branch
        grad.wo += &cache.o.t().dot(&dx1);
        grad.bo += &dx1.sum_axis(Axis(0));
        let d_o = dx1.dot(&self.wo.t());
        let mut dq = Array2::zeros(d_o.raw_dim());
        let mut dk = Array2::zeros(d_o.raw_dim());
        let mut dv = Array2::zeros(d_o.raw_dim());
        for (h, attn) in cache.attn.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let doh = d_o.slice(cols);
            let dattn = doh.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&attn.t().dot(&doh));
            let row_dot = (&dattn * attn).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dscores = (&dattn - &row_dot) * attn * scale;
            dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
        }
        grad.wq += &cache.h1.t().dot(&dq);
        grad.bq += &dq.sum_axis(Axis(0));
        grad.wk += &cache.h1.t().dot(&dk);
        grad.bk += &dk.sum_axis(Axis(0));
        grad.wv += &cache.h1.t().dot(&dv);
        grad.bv += &dv.sum_axis(Axis(0));
        let dh1 = dq.dot(&self.wq.t()) + dk.dot(&self.wk.t()) + dv.dot(&self.wv.t());
        dx1 + self.ln1.backward(&cache.ln1, &dh1, &mut grad.ln1)
    }
}

impl<S: Scalar> Module<S> for TransformerLayer<S> {
    fn params(&self) -> Vec<ParamView<'_, S>> {
        let mut out = prefixed("ln1", self.ln1.params());
        out.extend([
            view("wq", &self.wq),
            view("bq", &self.bq),
            view("wk", &self.wk),
            view("bk", &self.bk),
            view("wv", &self.wv),
            view("bv", &self.bv),
            view("wo", &self.wo),
            view("bo", &self.bo),
        ]);
        out.extend(prefixed("ln2", self.ln2.params()));
        out.extend([
            view("w1", &self.w1),
            view("b1", &self.b1),
            view("w2", &self.w2),
            view("b2", &self.b2),
        ]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = self.ln1.params_mut();
        out.extend([
            self.wq.as_slice_mut().unwrap(),
            self.bq.as_slice_mut().unwrap(),
            self.wk.as_slice_mut().unwrap(),
            self.bk.as_slice_mut().unwrap(),
            self.wv.as_slice_mut().unwrap(),
            self.bv.as_slice_mut().unwrap(),
            self.wo.as_slice_mut().unwrap(),
            self.bo.as_slice_mut().unwrap(),
        ]);
        out.extend(self.ln2.params_mut());
        out.extend([
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]);
        out
    }
}
