//! Audio clips, spectral analysis/synthesis, SNR-controlled mixing and
//! frame-level SNR ground truth.

mod stft;
mod wav;

use ndarray::{Array2, ArrayView1};
use rand::Rng;

pub use stft::{istft, magnitude, stft, StftConfig};
pub use wav::{decode_wav, encode_wav, read_wav, to_i16, write_wav};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16000;

/// Frame SNR clamp, in dB.
pub const FRAME_SNR_CLAMP_DB: f64 = 40.0;
const FRAME_SNR_EPS: f64 = 1e-12;

/// Mono audio with samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        if sample_rate == 0 {
            return Err(Error::UnsupportedFormat("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio clip".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        (self.energy() / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

pub(crate) fn energy(samples: &[f32]) -> f64 {
    samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
}

/// F x T non-negative magnitudes, one column per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f32>,
}

impl Spectrogram {
    pub fn num_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f32> {
        self.values.column(t)
    }
}

/// Real and imaginary STFT planes, F x T each.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub re: Array2<f32>,
    pub im: Array2<f32>,
}

impl ComplexSpectrogram {
    /// Per-bin phase as unit phasors `(cos, sin)`; zero bins get phase 0.
    pub fn phasors(&self) -> (Array2<f32>, Array2<f32>) {
        let mag = magnitude(self).values;
        let cos = ndarray::Zip::from(&self.re)
            .and(&mag)
            .map_collect(|&r, &m| if m > 0.0 { r / m } else { 1.0 });
        let sin = ndarray::Zip::from(&self.im)
            .and(&mag)
            .map_collect(|&i, &m| if m > 0.0 { i / m } else { 0.0 });
        (cos, sin)
    }
}

/// Model input features: magnitude spectrogram, optionally log-compressed.
pub fn features(clip: &AudioClip, cfg: &StftConfig) -> Result<Spectrogram> {
    let mut spec = magnitude(&stft(clip, cfg)?);
    if cfg.log1p {
        spec.values.mapv_inplace(f32::ln_1p);
    }
    Ok(spec)
}

/// Inverse of the feature compression in [`features`].
pub fn features_to_magnitude(values: &Array2<f32>, cfg: &StftConfig) -> Array2<f32> {
    if cfg.log1p {
        values.mapv(|v| v.exp_m1().max(0.0))
    } else {
        values.clone()
    }
}

/// Mixes `noise` into `clean` so that the clean-to-noise energy ratio is `snr_db`.
///
/// The noise is looped or cropped to the clean length starting from an
/// offset drawn from `seed`. Returns `(noisy, scaled_noise)`.
pub fn mix_at_snr(
    clean: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    seed: u64,
) -> Result<(AudioClip, AudioClip)> {
    let clean_energy = clean.energy();
    if clean_energy <= 0.0 {
        return Err(Error::SilentClean);
    }
    if noise.energy() <= 0.0 {
        return Err(Error::SilentNoise);
    }
    let offset = crate::rng::rng_for(seed, 0).random_range(0..noise.len());
    let aligned: Vec<f32> = (0..clean.len())
        .map(|i| noise.samples[(offset + i) % noise.len()])
        .collect();
    let noise_energy = energy(&aligned);
    if noise_energy <= 0.0 {
        return Err(Error::SilentNoise);
    }
    let scale = (clean_energy / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f32> = aligned.iter().map(|&n| (n as f64 * scale) as f32).collect();
    let noisy = clean
        .samples
        .iter()
        .zip(&scaled)
        .map(|(&c, &n)| c + n)
        .collect();
    Ok((
        AudioClip::new(noisy, clean.sample_rate)?,
        AudioClip::new(scaled, clean.sample_rate)?,
    ))
}

/// SNR in dB implied by a clean signal and the noise added to it.
pub fn measured_snr_db(clean: &[f32], noise: &[f32]) -> f64 {
    10.0 * (energy(clean) / energy(noise)).log10()
}

/// Per-frame SNR of `noisy` against `clean`, clamped to ±40 dB.
pub fn frame_snr(clean: &Spectrogram, noisy: &Spectrogram) -> Result<Vec<f64>> {
    if clean.values.dim() != noisy.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "clean {:?} vs noisy {:?}",
            clean.values.dim(),
            noisy.values.dim()
        )));
    }
    Ok(clean
        .values
        .columns()
        .into_iter()
        .zip(noisy.values.columns())
        .map(|(c, n)| {
            let (sig, err) = c.iter().zip(n.iter()).fold((0.0f64, 0.0f64), |(s, e), (&c, &n)| {
                let d = c as f64 - n as f64;
                (s + (c as f64).powi(2), e + d * d)
            });
            if sig <= 0.0 {
                return -FRAME_SNR_CLAMP_DB;
            }
            (10.0 * (sig / (err + FRAME_SNR_EPS)).log10())
                .clamp(-FRAME_SNR_CLAMP_DB, FRAME_SNR_CLAMP_DB)
        })
        .collect())
}
