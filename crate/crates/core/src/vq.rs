//! Vector quantization: codebook storage, k-means initialization,
//! nearest-code search under L2 and cosine criteria, EMA re-estimation and
//! the straight-through / commitment pieces of the training objective.
//!
//! Embeddings passed to this module are row-major `frames x dim`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{lit, Scalar};

pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_LAPLACE_EPS: f64 = 1e-5;

/// Nearest-code criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMetric {
    /// Smallest Euclidean distance.
    L2,
    /// Smallest Euclidean distance between unit-normalized vectors.
    Cos,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<S> {
    /// `V x d` code vectors.
    pub vectors: Array2<S>,
    /// EMA of per-code assignment counts.
    pub ema_counts: Array1<S>,
    /// EMA of per-code sums of assigned embeddings, `V x d`.
    pub ema_sums: Array2<S>,
    pub decay: f64,
    pub laplace_eps: f64,
    /// False until the codebook has been fitted to data.
    pub initialized: bool,
}

/// Result of a nearest-code lookup for one embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantized {
    pub index: usize,
    /// Squared distance under the chosen criterion.
    pub distance: f64,
    /// Set when a cosine query has zero norm; the index is then 0.
    pub degenerate: bool,
}

impl<S: Scalar> Codebook<S> {
    /// Zero codebook awaiting initialization.
    pub fn zeros(size: usize, dim: usize) -> Self {
        Self {
            vectors: Array2::zeros((size, dim)),
            ema_counts: Array1::zeros(size),
            ema_sums: Array2::zeros((size, dim)),
            decay: DEFAULT_DECAY,
            laplace_eps: DEFAULT_LAPLACE_EPS,
            initialized: false,
        }
    }

    /// Codebook with the given vectors and unit counts.
    pub fn from_vectors(vectors: Array2<S>) -> Result<Self> {
        if vectors.nrows() < 2 {
            return Err(Error::InvalidConfig("codebook needs at least 2 codes".into()));
        }
        let size = vectors.nrows();
        Ok(Self {
            ema_sums: vectors.clone(),
            vectors,
            ema_counts: Array1::ones(size),
            decay: DEFAULT_DECAY,
            laplace_eps: DEFAULT_LAPLACE_EPS,
            initialized: true,
        })
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn code(&self, index: usize) -> ArrayView1<'_, S> {
        self.vectors.row(index)
    }

    /// Codeword rows for the given indices, as `d x T` (one column per frame).
    pub fn gather(&self, indices: &[usize]) -> Array2<S> {
        self.vectors.select(Axis(0), indices).reversed_axes().as_standard_layout().to_owned()
    }

    /// Unit-normalized copy of the code vectors (zero rows stay zero).
    pub fn normalized(&self) -> Array2<S> {
        let mut out = self.vectors.clone();
        for mut row in out.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > S::zero() {
                row.mapv_inplace(|v| v / norm);
            }
        }
        out
    }

    /// Nearest code for every column of a `d x T` embedding matrix.
    pub fn quantize_frames(&self, z: &Array2<S>, metric: QuantMetric) -> Result<Vec<Quantized>> {
        if z.nrows() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "embedding dim {} vs codebook dim {}",
                z.nrows(),
                self.dim()
            )));
        }
        let normalized = matches!(metric, QuantMetric::Cos).then(|| self.normalized());
        Ok(z.columns()
            .into_iter()
            .map(|col| match &normalized {
                None => nearest(col, self.vectors.view()),
                Some(unit) => nearest_unit(col, unit.view()),
            })
            .collect())
    }
}

fn squared_distance<S: Scalar>(a: ArrayView1<'_, S>, b: ArrayView1<'_, S>) -> S {
    a.iter().zip(b.iter()).fold(S::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// Lowest-index argmin of squared L2 distance.
fn nearest<S: Scalar>(z: ArrayView1<'_, S>, codes: ArrayView2<'_, S>) -> Quantized {
    let mut best = Quantized {
        index: 0,
        distance: f64::INFINITY,
        degenerate: false,
    };
    for (v, code) in codes.rows().into_iter().enumerate() {
        let d = squared_distance(z, code).to_f64().unwrap();
        if d < best.distance {
            best.index = v;
            best.distance = d;
        }
    }
    best
}

fn nearest_unit<S: Scalar>(z: ArrayView1<'_, S>, unit_codes: ArrayView2<'_, S>) -> Quantized {
    let norm = z.dot(&z).sqrt();
    if norm <= S::zero() {
        return Quantized {
            index: 0,
            distance: 1.0,
            degenerate: true,
        };
    }
    let unit = z.mapv(|v| v / norm);
    nearest(unit.view(), unit_codes)
}

/// Index of the code with the smallest L2 distance to `z` (ties to the lowest index).
pub fn quantize_l2<S: Scalar>(z: ArrayView1<'_, S>, codebook: &Codebook<S>) -> (usize, Array1<S>) {
    let q = nearest(z, codebook.vectors.view());
    (q.index, codebook.code(q.index).to_owned())
}

/// Index of the code with the highest cosine similarity to `z`.
///
/// Returns the un-normalized codeword. A zero query maps to index 0 with
/// `degenerate` set.
pub fn quantize_cos<S: Scalar>(z: ArrayView1<'_, S>, codebook: &Codebook<S>) -> (Quantized, Array1<S>) {
    let q = nearest_unit(z, codebook.normalized().view());
    (q, codebook.code(q.index).to_owned())
}

/// Lloyd's algorithm output.
#[derive(Debug, Clone)]
pub struct KMeans<S> {
    pub centroids: Array2<S>,
    pub assignments: Vec<usize>,
    pub counts: Vec<usize>,
    /// Sum of squared distances to the nearest centroid, before the first
    /// update and after each iteration.
    pub objective: Vec<f64>,
}

fn assign<S: Scalar>(points: &Array2<S>, centroids: &Array2<S>) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let assignments = points
        .rows()
        .into_iter()
        .map(|p| {
            let q = nearest(p, centroids.view());
            total += q.distance;
            q.index
        })
        .collect();
    (assignments, total)
}

/// k-means with k-means++ seeding followed by `iters` Lloyd iterations.
///
/// Clusters that lose all their points keep their previous centroid.
pub fn kmeans<S: Scalar>(points: &Array2<S>, k: usize, iters: usize, rng: &mut impl Rng) -> Result<KMeans<S>> {
    let n = points.nrows();
    if n < k || k == 0 {
        return Err(Error::TooFewSamples { need: k.max(1), got: n });
    }
    let dim = points.ncols();
    let mut centroids = Array2::zeros((k, dim));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut dist: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| squared_distance(p, centroids.row(0)).to_f64().unwrap())
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // guard against round-off landing on an already-chosen point
            if dist[chosen] <= 0.0 {
                chosen = dist.iter().position(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            let d = squared_distance(p, centroids.row(c)).to_f64().unwrap();
            if d < dist[i] {
                dist[i] = d;
            }
        }
    }

    let (mut assignments, obj) = assign(points, &centroids);
    let mut objective = vec![obj];
    for _ in 0..iters {
        let mut sums = Array2::<S>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (p, &a) in points.rows().into_iter().zip(&assignments) {
            let mut row = sums.row_mut(a);
            row += &p;
            counts[a] += 1;
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = &sums.row(c) / lit::<S>(count as f64);
                centroids.row_mut(c).assign(&mean);
            }
        }
        let (next, obj) = assign(points, &centroids);
        assignments = next;
        objective.push(obj);
    }
    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    Ok(KMeans {
        centroids,
        assignments,
        counts,
        objective,
    })
}

/// Fits a fresh codebook to `embeddings` (`N x d`) by k-means.
///
/// EMA counts start at the cluster sizes and EMA sums at the cluster sums.
pub fn kmeans_init<S: Scalar>(
    embeddings: &Array2<S>,
    size: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> Result<Codebook<S>> {
    let km = kmeans(embeddings, size, iters, rng)?;
    let mut codebook = Codebook::zeros(size, embeddings.ncols());
    let mut sums = Array2::<S>::zeros((size, embeddings.ncols()));
    for (p, &a) in embeddings.rows().into_iter().zip(&km.assignments) {
        let mut row = sums.row_mut(a);
        row += &p;
    }
    codebook.ema_counts = km.counts.iter().map(|&c| lit::<S>(c as f64)).collect();
    codebook.ema_sums = sums;
    codebook.vectors = km.centroids;
    codebook.initialized = true;
    Ok(codebook)
}

/// One exponential-moving-average re-estimation step.
///
/// `embeddings` are `N x d` rows with `assignments[i]` the code chosen for row `i`.
pub fn ema_update<S: Scalar>(codebook: &mut Codebook<S>, assignments: &[usize], embeddings: &Array2<S>) -> Result<()> {
    let size = codebook.size();
    if assignments.len() != embeddings.nrows() {
        return Err(Error::LengthMismatch {
            left: assignments.len(),
            right: embeddings.nrows(),
        });
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= size) {
        return Err(Error::IndexOutOfRange { index: bad, size });
    }
    let gamma = lit::<S>(codebook.decay);
    let rest = S::one() - gamma;
    let mut counts = Array1::<S>::zeros(size);
    let mut sums = Array2::<S>::zeros((size, codebook.dim()));
    for (row, &a) in embeddings.rows().into_iter().zip(assignments) {
        counts[a] += S::one();
        let mut s = sums.row_mut(a);
        s += &row;
    }
    codebook.ema_counts = &codebook.ema_counts * gamma + &(counts * rest);
    codebook.ema_sums = &codebook.ema_sums * gamma + &(sums * rest);

    let eps = lit::<S>(codebook.laplace_eps);
    let total: S = codebook.ema_counts.sum();
    let denom = total + lit::<S>(size as f64) * eps;
    for v in 0..size {
        let smoothed = (codebook.ema_counts[v] + eps) / denom * total;
        let row = &codebook.ema_sums.row(v) / smoothed;
        codebook.vectors.row_mut(v).assign(&row);
    }
    Ok(())
}

/// Forward value of the straight-through estimator: exactly `zq`.
///
/// In the backward pass the output gradient is routed unchanged to `z`
/// and nothing reaches `zq` (see [`straight_through_backward`]).
pub fn straight_through<S: Scalar>(z: &Array2<S>, zq: &Array2<S>) -> Result<Array2<S>> {
    if z.dim() != zq.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", z.dim(), zq.dim())));
    }
    Ok(zq.clone())
}

/// Gradients `(d/dz, d/dzq)` of the straight-through output.
pub fn straight_through_backward<S: Scalar>(dy: &Array2<S>) -> (Array2<S>, Array2<S>) {
    (dy.clone(), Array2::zeros(dy.raw_dim()))
}

/// `beta * mean_t ||z_t - sg(zq_t)||^2` over the columns of `d x T` inputs,
/// with its gradient w.r.t. `z`.
pub fn commitment_loss<S: Scalar>(z: &Array2<S>, zq: &Array2<S>, beta: f64) -> Result<(f64, Array2<S>)> {
    if z.dim() != zq.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", z.dim(), zq.dim())));
    }
    let frames = z.ncols().max(1) as f64;
    let diff = z - zq;
    let loss = beta * diff.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>() / frames;
    let grad = diff * lit::<S>(2.0 * beta / frames);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookUsage {
    pub used_fraction: f64,
    pub perplexity: f64,
}

/// Fraction of codes used and the perplexity of the empirical index distribution.
pub fn codebook_usage(assignments: &[usize], size: usize) -> CodebookUsage {
    let mut counts = vec![0usize; size];
    for &a in assignments {
        if a < size {
            counts[a] += 1;
        }
    }
    let n = assignments.len() as f64;
    let used = counts.iter().filter(|&&c| c > 0).count();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    CodebookUsage {
        used_fraction: used as f64 / size.max(1) as f64,
        perplexity: if assignments.is_empty() { 0.0 } else { entropy.exp() },
    }
}
