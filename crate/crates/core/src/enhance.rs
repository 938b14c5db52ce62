//! Magnitude-domain speech enhancement with noisy-phase resynthesis.

use std::path::Path;

use ndarray::Array2;

use crate::dsp::{features_to_magnitude, istft, magnitude, read_wav, stft, AudioClip, ComplexSpectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::model::VqVaeModel;

/// Anything that maps input features to reconstructed features of the same shape.
pub trait Reconstructor: Sync {
    fn reconstruct(&self, x: &Array2<f32>) -> Result<Array2<f32>>;
}

impl Reconstructor for VqVaeModel<f32> {
    fn reconstruct(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        if !self.codebook.initialized {
            return Err(Error::UntrainedModel);
        }
        Ok(self.forward(x)?.x_hat)
    }
}

/// Passes features through unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityReconstructor;

impl Reconstructor for IdentityReconstructor {
    fn reconstruct(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        Ok(x.clone())
    }
}

/// Enhances `noisy` and mixes with the input: `alpha * enhanced + (1 - alpha) * noisy`.
///
/// The output covers only the fully overlapped interior of the STFT, so it
/// is shorter than the input.
pub fn enhance_clip(noisy: &AudioClip, model: &impl Reconstructor, cfg: &StftConfig, alpha: f32) -> Result<AudioClip> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let spec = stft(noisy, cfg)?;
    let mut x = magnitude(&spec).values;
    if cfg.log1p {
        x.mapv_inplace(f32::ln_1p);
    }
    let x_hat = model.reconstruct(&x)?;
    if x_hat.dim() != x.dim() {
        return Err(Error::ShapeMismatch(format!("reconstruction {:?} vs input {:?}", x_hat.dim(), x.dim())));
    }
    let mag = features_to_magnitude(&x_hat, cfg);
    let (cos, sin) = spec.phasors();
    let enhanced = istft(
        &ComplexSpectrogram {
            re: &mag * &cos,
            im: &mag * &sin,
        },
        cfg,
        noisy.sample_rate,
    )?;
    let range = cfg.interior(x.ncols());
    let samples = enhanced.samples[range.clone()]
        .iter()
        .zip(&noisy.samples[range])
        .map(|(&e, &n)| alpha * e + (1.0 - alpha) * n)
        .collect();
    AudioClip::new(samples, noisy.sample_rate)
}

pub fn enhance_wav(path: impl AsRef<Path>, model: &impl Reconstructor, cfg: &StftConfig, alpha: f32) -> Result<AudioClip> {
    enhance_clip(&read_wav(path)?, model, cfg, alpha)
}

pub const SEG_SNR_MIN_DB: f64 = -10.0;
pub const SEG_SNR_MAX_DB: f64 = 35.0;
const ACTIVE_FLOOR_DBFS: f64 = -60.0;

/// Mean over active reference frames of the clamped per-frame SNR, in dB.
///
/// Frames are non-overlapping blocks of `frame_len` samples; a trailing
/// partial block is ignored. A frame is active when its mean-square level
/// exceeds -60 dBFS.
pub fn segmental_snr(reference: &[f32], processed: &[f32], frame_len: usize) -> Result<f64> {
    if reference.len() != processed.len() {
        return Err(Error::LengthMismatch {
            left: reference.len(),
            right: processed.len(),
        });
    }
    if frame_len == 0 {
        return Err(Error::InvalidConfig("frame length must be positive".into()));
    }
    let mut total = 0.0;
    let mut active = 0usize;
    for (r, p) in reference.chunks_exact(frame_len).zip(processed.chunks_exact(frame_len)) {
        let sig: f64 = r.iter().map(|&v| (v as f64).powi(2)).sum();
        if 10.0 * (sig / frame_len as f64).log10() <= ACTIVE_FLOOR_DBFS {
            continue;
        }
        let err: f64 = r.iter().zip(p).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        let snr = if err > 0.0 {
            10.0 * (sig / err).log10()
        } else {
            SEG_SNR_MAX_DB
        };
        total += snr.clamp(SEG_SNR_MIN_DB, SEG_SNR_MAX_DB);
        active += 1;
    }
    if active == 0 {
        return Err(Error::DegenerateSample("no active reference frames".into()));
    }
    Ok(total / active as f64)
}
