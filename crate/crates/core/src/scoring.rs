//! Utterance-level VQScores and the frame-level quality trace.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dsp::{features, read_wav, StftConfig};
use crate::error::{Error, Result};
use crate::model::VqVaeModel;

/// Ceiling of the frame-level quality ratio (reached on perfect reconstruction).
pub const FRAME_QUALITY_MAX: f64 = 1e4;
const FRAME_QUALITY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    Cos,
    L2,
}

/// Where the distance is measured: code space (`Z` vs `Z_q`) or signal space (`X` vs `X̂`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSpace {
    Z,
    X,
}

/// A frame-averaged score and how many frames were left out of it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameAverage {
    pub value: f64,
    /// Frames skipped because a cosine was undefined (zero norm).
    pub skipped: usize,
}

fn norm(v: ArrayView1<'_, f32>) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

/// Mean over columns of `cos(a_t, b_t)` or `||a_t - b_t||`.
pub fn frame_average(a: &Array2<f32>, b: &Array2<f32>, metric: ScoreMetric) -> Result<FrameAverage> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.ncols() == 0 {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (ca, cb) in a.columns().into_iter().zip(b.columns()) {
        match metric {
            ScoreMetric::Cos => {
                let (na, nb) = (norm(ca), norm(cb));
                if na == 0.0 || nb == 0.0 {
                    continue;
                }
                let dot: f64 = ca.iter().zip(cb.iter()).map(|(&x, &y)| x as f64 * y as f64).sum();
                total += (dot / (na * nb)).clamp(-1.0, 1.0);
            }
            ScoreMetric::L2 => {
                total += ca
                    .iter()
                    .zip(cb.iter())
                    .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        used += 1;
    }
    Ok(FrameAverage {
        value: if used == 0 { 0.0 } else { total / used as f64 },
        skipped: a.ncols() - used,
    })
}

/// Per-frame `||X_t|| / (||X_t - X̂_t|| + 1e-8)`, clamped to `[0, 1e4]`.
pub fn frame_quality(x: &Array2<f32>, x_hat: &Array2<f32>) -> Result<Vec<f64>> {
    if x.dim() != x_hat.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.dim(), x_hat.dim())));
    }
    Ok(x.columns()
        .into_iter()
        .zip(x_hat.columns())
        .map(|(c, r)| {
            let residual: f64 = c
                .iter()
                .zip(r.iter())
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            (norm(c) / (residual + FRAME_QUALITY_EPS)).clamp(0.0, FRAME_QUALITY_MAX)
        })
        .collect())
}

fn ensure_trained(model: &VqVaeModel<f32>) -> Result<()> {
    if model.codebook.initialized {
        Ok(())
    } else {
        Err(Error::UntrainedModel)
    }
}

/// One VQScore variant of spectrogram `x` under `model`.
pub fn vqscore(x: &Array2<f32>, model: &VqVaeModel<f32>, metric: ScoreMetric, space: ScoreSpace) -> Result<f64> {
    ensure_trained(model)?;
    let out = model.forward(x)?;
    let avg = match space {
        ScoreSpace::Z => frame_average(&out.z, &out.zq, metric)?,
        ScoreSpace::X => frame_average(x, &out.x_hat, metric)?,
    };
    Ok(avg.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub id: String,
    pub vqscore_cos_z: f64,
    pub vqscore_cos_x: f64,
    pub vqscore_l2_z: f64,
    pub vqscore_l2_x: f64,
    pub frame_quality: Vec<f64>,
    pub num_frames: usize,
    /// Frames excluded from the cosine averages (zero-norm embeddings or input frames).
    pub skipped_frames: usize,
}

/// All four variants plus the frame trace from a single forward pass.
pub fn score_spectrogram(id: &str, x: &Array2<f32>, model: &VqVaeModel<f32>) -> Result<ScoreReport> {
    ensure_trained(model)?;
    let out = model.forward(x)?;
    let cos_z = frame_average(&out.z, &out.zq, ScoreMetric::Cos)?;
    let cos_x = frame_average(x, &out.x_hat, ScoreMetric::Cos)?;
    Ok(ScoreReport {
        id: id.to_string(),
        vqscore_cos_z: cos_z.value,
        vqscore_cos_x: cos_x.value,
        vqscore_l2_z: frame_average(&out.z, &out.zq, ScoreMetric::L2)?.value,
        vqscore_l2_x: frame_average(x, &out.x_hat, ScoreMetric::L2)?.value,
        frame_quality: frame_quality(x, &out.x_hat)?,
        num_frames: x.ncols(),
        skipped_frames: cos_z.skipped.max(cos_x.skipped),
    })
}

/// Reads a wav file and scores it; the report id is the file stem.
pub fn score_wav(path: impl AsRef<Path>, model: &VqVaeModel<f32>, stft: &StftConfig) -> Result<ScoreReport> {
    let path = path.as_ref();
    let clip = read_wav(path)?;
    let spec = features(&clip, stft)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    score_spectrogram(&id, &spec.values, model)
}
