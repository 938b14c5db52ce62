//! Short-time Fourier analysis and overlap-add synthesis.
//!
//! Frames are taken without padding, so frame `t` covers samples
//! `[t * hop, t * hop + win_length)` and every frame is fully valid.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{AudioClip, ComplexSpectrogram, Spectrogram};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_length: usize,
    pub hop: usize,
    /// Use `ln(1 + |X|)` features instead of linear magnitude.
    pub log1p: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            win_length: 512,
            hop: 256,
            log1p: false,
        }
    }
}

impl StftConfig {
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames for a clip of `len` samples, or `None` if the clip is too short.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        (len >= self.win_length).then(|| 1 + (len - self.win_length) / self.hop)
    }

    /// Sample range reconstructed with full window overlap for `frames` frames.
    pub fn interior(&self, frames: usize) -> std::ops::Range<usize> {
        let start = self.win_length - self.hop;
        let end = (frames * self.hop).max(start);
        start..end
    }

    /// Periodic Hann window of `win_length` samples.
    pub fn window(&self) -> Vec<f64> {
        let n = self.win_length as f64;
        (0..self.win_length)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect()
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_length || self.win_length > self.fft_size {
            return Err(Error::InvalidStft(format!(
                "need 0 < hop ({}) <= win_length ({}) <= fft_size ({})",
                self.hop, self.win_length, self.fft_size
            )));
        }
        Ok(())
    }

    /// Checks that shifted copies of the window sum to a constant.
    pub fn check_cola(&self) -> Result<()> {
        self.check_shape()?;
        let w = self.window();
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| w.iter().skip(n).step_by(self.hop).sum())
            .collect();
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        let min = sums.iter().cloned().fold(f64::MAX, f64::min);
        if min <= 0.0 || (max - min) / max > 1e-9 {
            return Err(Error::NonColaConfig(format!(
                "hann window of {} samples at hop {} sums to [{min:.6}, {max:.6}]",
                self.win_length, self.hop
            )));
        }
        Ok(())
    }
}

/// Windowed DFT of every full frame.
pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.check_shape()?;
    let frames = cfg.num_frames(clip.samples.len()).ok_or(Error::ClipTooShort {
        len: clip.samples.len(),
        need: cfg.win_length,
    })?;
    let bins = cfg.num_bins();
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut re = Array2::<f32>::zeros((bins, frames));
    let mut im = Array2::<f32>::zeros((bins, frames));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..frames {
        buf.fill(Complex::new(0.0, 0.0));
        let frame = &clip.samples[t * cfg.hop..t * cfg.hop + cfg.win_length];
        for (b, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            b.re = s as f64 * w;
        }
        fft.process(&mut buf);
        for f in 0..bins {
            re[[f, t]] = buf[f].re as f32;
            im[[f, t]] = buf[f].im as f32;
        }
    }
    Ok(ComplexSpectrogram { re, im })
}

/// Elementwise modulus.
pub fn magnitude(spec: &ComplexSpectrogram) -> Spectrogram {
    let values = ndarray::Zip::from(&spec.re)
        .and(&spec.im)
        .map_collect(|&r, &i| (r as f64).hypot(i as f64) as f32);
    Spectrogram { values }
}

/// Overlap-add resynthesis with window-squared normalization.
///
/// The returned clip spans `(T - 1) * hop + win_length` samples; only
/// [`StftConfig::interior`] is reconstructed with full overlap.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig, sample_rate: u32) -> Result<AudioClip> {
    cfg.check_cola()?;
    let (bins, frames) = spec.re.dim();
    if bins != cfg.num_bins() || spec.im.dim() != (bins, frames) {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {bins} bins, config expects {}",
            cfg.num_bins()
        )));
    }
    if frames == 0 {
        return Err(Error::EmptyInput);
    }
    let n = cfg.fft_size;
    let window = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let len = (frames - 1) * cfg.hop + cfg.win_length;
    let mut acc = vec![0.0f64; len];
    let mut norm = vec![0.0f64; len];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        for k in 0..n {
            let (src, conj) = if k < bins { (k, false) } else { (n - k, true) };
            let v = Complex::new(spec.re[[src, t]] as f64, spec.im[[src, t]] as f64);
            buf[k] = if conj { v.conj() } else { v };
        }
        // DC and Nyquist of a real signal carry no imaginary part
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        let offset = t * cfg.hop;
        for (i, &w) in window.iter().enumerate() {
            acc[offset + i] += buf[i].re / n as f64 * w;
            norm[offset + i] += w * w;
        }
    }
    let samples = acc
        .iter()
        .zip(&norm)
        .map(|(&a, &w)| if w > 1e-10 { (a / w) as f32 } else { 0.0 })
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N^2) DFT of one windowed frame.
    fn naive_dft_magnitude(frame: &[f32], window: &[f64], n: usize) -> Vec<f64> {
        (0..n / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (i, (&x, &w)) in frame.iter().zip(window).enumerate() {
                    let phase = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    re += x as f64 * w * phase.cos();
                    im += x as f64 * w * phase.sin();
                }
                re.hypot(im)
            })
            .collect()
    }

    fn noise_clip(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), 16000).unwrap()
    }

    fn sine(freq: f64, len: usize) -> AudioClip {
        let samples = (0..len)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()) as f32)
            .collect();
        AudioClip::new(samples, 16000).unwrap()
    }

    #[test]
    fn frame_count_has_no_padding() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.num_frames(511), None);
        assert_eq!(cfg.num_frames(512), Some(1));
        assert_eq!(cfg.num_frames(16000), Some(1 + (16000 - 512) / 256));
        let spec = stft(&noise_clip(16000, 1), &cfg).unwrap();
        assert_eq!(spec.re.dim(), (257, 61));
    }

    #[test]
    fn bin_aligned_sine_peaks_at_its_bin() {
        let cfg = StftConfig::default();
        let mag = magnitude(&stft(&sine(1000.0, 16000), &cfg).unwrap());
        let mean = mag.values.mean_axis(ndarray::Axis(1)).unwrap();
        let argmax = mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 32);
        // energy concentrated near the sine's bin (the Hann main lobe spans bins 31..=33)
        let energy: f64 = mag.values.iter().map(|&v| (v as f64).powi(2)).sum();
        let near: f64 = mag
            .values
            .slice(ndarray::s![31..=33, ..])
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum();
        assert!(near / energy > 0.9);
    }

    #[test]
    fn matches_naive_dft() {
        let cfg = StftConfig::default();
        let clip = noise_clip(4000, 3);
        let mag = magnitude(&stft(&clip, &cfg).unwrap());
        let window = cfg.window();
        for t in [0, 3, 7, 10, 13] {
            let frame = &clip.samples[t * cfg.hop..t * cfg.hop + cfg.win_length];
            let oracle = naive_dft_magnitude(frame, &window, cfg.fft_size);
            let peak = oracle.iter().cloned().fold(0.0, f64::max);
            for (f, &o) in oracle.iter().enumerate() {
                let got = mag.values[[f, t]] as f64;
                assert!((got - o).abs() <= 1e-5 * peak.max(o), "bin {f} frame {t}: {got} vs {o}");
            }
        }
    }

    #[test]
    fn zeros_in_zeros_out() {
        let cfg = StftConfig::default();
        let spec = stft(&AudioClip::new(vec![0.0; 2048], 16000).unwrap(), &cfg).unwrap();
        assert!(spec.re.iter().chain(spec.im.iter()).all(|&v| v == 0.0));
        let back = istft(&spec, &cfg, 16000).unwrap();
        assert!(back.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_interior() {
        for cfg in [
            StftConfig::default(),
            StftConfig { fft_size: 256, win_length: 256, hop: 64, log1p: false },
            StftConfig { fft_size: 512, win_length: 400, hop: 200, log1p: false },
        ] {
            let clip = noise_clip(5000, 11);
            let spec = stft(&clip, &cfg).unwrap();
            let back = istft(&spec, &cfg, 16000).unwrap();
            let frames = spec.re.dim().1;
            for n in cfg.interior(frames) {
                let (a, b) = (clip.samples[n] as f64, back.samples[n] as f64);
                assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-1), "{n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn istft_is_linear() {
        let cfg = StftConfig::default();
        let spec = stft(&noise_clip(3000, 5), &cfg).unwrap();
        let doubled = ComplexSpectrogram {
            re: &spec.re * 2.0,
            im: &spec.im * 2.0,
        };
        let a = istft(&spec, &cfg, 16000).unwrap();
        let b = istft(&doubled, &cfg, 16000).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((2.0 * x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn magnitude_is_modulus() {
        let spec = ComplexSpectrogram {
            re: Array2::from_shape_vec((3, 1), vec![3.0, 0.0, 1.0]).unwrap(),
            im: Array2::from_shape_vec((3, 1), vec![4.0, 0.0, -1.0]).unwrap(),
        };
        let mag = magnitude(&spec).values;
        assert_eq!(mag[[0, 0]], 5.0);
        assert_eq!(mag[[1, 0]], 0.0);
        assert!((mag[[2, 0]] - std::f32::consts::SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn rejects_short_clips_and_non_cola() {
        let cfg = StftConfig::default();
        let short = AudioClip::new(vec![0.0; 100], 16000).unwrap();
        assert!(matches!(stft(&short, &cfg), Err(Error::ClipTooShort { .. })));
        let bad = StftConfig { hop: 512, ..cfg };
        assert!(matches!(bad.check_cola(), Err(Error::NonColaConfig(_))));
        let spec = stft(&noise_clip(2048, 1), &bad).unwrap();
        assert!(matches!(istft(&spec, &bad, 16000), Err(Error::NonColaConfig(_))));
    }
}
