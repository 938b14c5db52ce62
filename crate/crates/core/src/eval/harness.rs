use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pearson_lcc, welch_ttest, Correlation, WelchTest};
use crate::corpus::{Manifest, ManifestRow};
use crate::dsp::{features, frame_snr, AudioClip, Spectrogram, StftConfig, FRAME_SNR_CLAMP_DB};
use crate::enhance::{enhance_clip, segmental_snr, Reconstructor};
use crate::error::{Error, Result};
use crate::model::VqVaeModel;
use crate::scoring::{frame_quality, score_spectrogram};

/// SNR label given to clean clips.
pub const CLEAN_SNR_DB: f64 = FRAME_SNR_CLAMP_DB;

/// A spectrogram to score with its SNR label.
#[derive(Debug, Clone, PartialEq)]
pub struct QeItem {
    pub id: String,
    pub snr_db: f64,
    pub features: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QeClipRow {
    pub id: String,
    pub snr_db: f64,
    pub vqscore_cos_z: f64,
    pub vqscore_cos_x: f64,
    pub vqscore_l2_z: f64,
    pub vqscore_l2_x: f64,
    pub num_frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantLcc {
    pub cos_z: Correlation,
    pub cos_x: Correlation,
    pub l2_z: Correlation,
    pub l2_x: Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketMean {
    pub snr_db: f64,
    pub mean_cos_z: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QeReport {
    pub clips: Vec<QeClipRow>,
    pub lcc: VariantLcc,
    /// Ascending SNR; clean clips form the last bucket.
    pub buckets: Vec<BucketMean>,
}

impl QeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,snr_db,vqscore_cos_z,vqscore_cos_x,vqscore_l2_z,vqscore_l2_x\n");
        for r in &self.clips {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.id, r.snr_db, r.vqscore_cos_z, r.vqscore_cos_x, r.vqscore_l2_z, r.vqscore_l2_x
            ));
        }
        out
    }

    /// Whether bucket means strictly increase with SNR.
    pub fn strictly_increasing(&self) -> bool {
        self.buckets.windows(2).all(|w| w[1].mean_cos_z > w[0].mean_cos_z)
    }
}

/// All four VQScore variants per item, their correlation with SNR, and per-SNR means of (cos, z).
pub fn eval_qe_items(model: &VqVaeModel<f32>, items: &[QeItem]) -> Result<QeReport> {
    if items.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let clips = items
        .par_iter()
        .map(|item| {
            let r = score_spectrogram(&item.id, &item.features, model)?;
            Ok(QeClipRow {
                id: item.id.clone(),
                snr_db: item.snr_db,
                vqscore_cos_z: r.vqscore_cos_z,
                vqscore_cos_x: r.vqscore_cos_x,
                vqscore_l2_z: r.vqscore_l2_z,
                vqscore_l2_x: r.vqscore_l2_x,
                num_frames: r.num_frames,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let snr: Vec<f64> = clips.iter().map(|c| c.snr_db).collect();
    let col = |f: fn(&QeClipRow) -> f64| -> Result<Correlation> {
        let v: Vec<f64> = clips.iter().map(f).collect();
        pearson_lcc(&v, &snr)
    };
    let lcc = VariantLcc {
        cos_z: col(|c| c.vqscore_cos_z)?,
        cos_x: col(|c| c.vqscore_cos_x)?,
        l2_z: col(|c| c.vqscore_l2_z)?,
        l2_x: col(|c| c.vqscore_l2_x)?,
    };
    let mut levels: Vec<f64> = snr.clone();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let buckets = levels
        .into_iter()
        .map(|level| {
            let vals: Vec<f64> = clips.iter().filter(|c| c.snr_db == level).map(|c| c.vqscore_cos_z).collect();
            BucketMean {
                snr_db: level,
                mean_cos_z: vals.iter().sum::<f64>() / vals.len() as f64,
                count: vals.len(),
            }
        })
        .collect();
    Ok(QeReport { clips, lcc, buckets })
}

fn row_snr(row: &ManifestRow) -> f64 {
    match (&row.noisy_path, row.snr_db) {
        (Some(_), Some(s)) => s,
        _ => CLEAN_SNR_DB,
    }
}

/// Scores every row of a manifest: noisy rows at their SNR, clean-only rows at +40 dB.
pub fn eval_qe(model: &VqVaeModel<f32>, manifest: &Manifest, stft: &StftConfig) -> Result<QeReport> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let items = manifest
        .rows
        .par_iter()
        .map(|row| {
            let clip = match manifest.load_noisy(row)? {
                Some(noisy) => noisy,
                None => manifest.load_clean(row)?,
            };
            Ok(QeItem {
                id: row.id.clone(),
                snr_db: row_snr(row),
                features: features(&clip, stft)?.values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    eval_qe_items(model, &items)
}

/// Adds one clean-only row per distinct clean file referenced by `manifest`.
pub fn with_clean_references(manifest: &Manifest) -> Manifest {
    let mut out = manifest.clone();
    let mut seen = std::collections::BTreeSet::new();
    for row in &manifest.rows {
        if row.noisy_path.is_some() && seen.insert(row.clean_path.clone()) {
            let id = row
                .clean_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| row.id.clone());
            out.rows.push(ManifestRow {
                id,
                clean_path: row.clean_path.clone(),
                noisy_path: None,
                noise_kind: None,
                snr_db: None,
                seed: row.seed,
                duration_s: row.duration_s,
                gain: None,
            });
        }
    }
    out
}

/// A clean reference and the noisy clip derived from it, sample-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanNoisyPair {
    pub id: String,
    pub snr_db: Option<f64>,
    pub clean: AudioClip,
    pub noisy: AudioClip,
}

/// Loads the noisy rows of a manifest, applying any anti-clipping gain to the clean reference.
pub fn load_pairs(manifest: &Manifest) -> Result<Vec<CleanNoisyPair>> {
    let pairs = manifest
        .rows
        .par_iter()
        .filter(|row| row.noisy_path.is_some())
        .map(|row| {
            let mut clean = manifest.load_clean(row)?;
            if let Some(g) = row.gain {
                clean.samples.iter_mut().for_each(|s| *s *= g as f32);
            }
            let noisy = manifest.load_noisy(row)?.ok_or(Error::EmptyInput)?;
            if clean.len() != noisy.len() {
                return Err(Error::LengthMismatch {
                    left: clean.len(),
                    right: noisy.len(),
                });
            }
            Ok(CleanNoisyPair {
                id: row.id.clone(),
                snr_db: row.snr_db,
                clean,
                noisy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeEvalConfig {
    /// Dry/wet mix passed to the enhancer.
    pub alpha: f32,
    /// Segment length for segmental SNR, in samples.
    pub frame_len: usize,
}

impl Default for SeEvalConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            frame_len: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeClipRow {
    pub id: String,
    pub snr_db: Option<f64>,
    pub seg_snr_in: f64,
    pub seg_snr_out: f64,
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeReport {
    pub clips: Vec<SeClipRow>,
    pub median_improvement: f64,
    /// Fraction of clips with positive improvement.
    pub fraction_improved: f64,
    /// Enhanced vs noisy segmental SNR; absent when either sample is degenerate.
    pub welch: Option<WelchTest>,
}

impl SeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,snr_db,seg_snr_in,seg_snr_out,improvement\n");
        for r in &self.clips {
            let snr = r.snr_db.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.id, snr, r.seg_snr_in, r.seg_snr_out, r.improvement));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Segmental SNR of noisy and enhanced signals against the clean reference,
/// all restricted to the STFT interior.
pub fn eval_se_pairs(
    model: &impl Reconstructor,
    pairs: &[CleanNoisyPair],
    stft: &StftConfig,
    cfg: &SeEvalConfig,
) -> Result<SeReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let clips = pairs
        .par_iter()
        .map(|p| {
            let enhanced = enhance_clip(&p.noisy, model, stft, cfg.alpha)?;
            let frames = stft.num_frames(p.noisy.len()).ok_or(Error::ClipTooShort {
                len: p.noisy.len(),
                need: stft.win_length,
            })?;
            let range = stft.interior(frames);
            let clean = &p.clean.samples[range.clone()];
            let seg_in = segmental_snr(clean, &p.noisy.samples[range], cfg.frame_len)?;
            let seg_out = segmental_snr(clean, &enhanced.samples, cfg.frame_len)?;
            Ok(SeClipRow {
                id: p.id.clone(),
                snr_db: p.snr_db,
                seg_snr_in: seg_in,
                seg_snr_out: seg_out,
                improvement: seg_out - seg_in,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gains: Vec<f64> = clips.iter().map(|c| c.improvement).collect();
    let seg_in: Vec<f64> = clips.iter().map(|c| c.seg_snr_in).collect();
    let seg_out: Vec<f64> = clips.iter().map(|c| c.seg_snr_out).collect();
    Ok(SeReport {
        median_improvement: median(&gains),
        fraction_improved: gains.iter().filter(|&&g| g > 0.0).count() as f64 / gains.len() as f64,
        welch: welch_ttest(&seg_out, &seg_in).ok(),
        clips,
    })
}

pub fn eval_se(model: &impl Reconstructor, manifest: &Manifest, stft: &StftConfig, cfg: &SeEvalConfig) -> Result<SeReport> {
    eval_se_pairs(model, &load_pairs(manifest)?, stft, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameClipRow {
    pub id: String,
    pub lcc: Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameQualityReport {
    pub clips: Vec<FrameClipRow>,
    /// Mean LCC over clips whose inputs were not constant.
    pub mean_lcc: f64,
    /// Clips excluded because frame quality or frame SNR was constant.
    pub excluded: usize,
}

/// Per-clip correlation between frame quality of the noisy input and its true frame SNR.
pub fn eval_frame_quality_pairs(
    model: &impl Reconstructor,
    pairs: &[CleanNoisyPair],
    stft: &StftConfig,
) -> Result<FrameQualityReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let clips = pairs
        .par_iter()
        .map(|p| {
            let noisy = features(&p.noisy, stft)?;
            let x_hat = model.reconstruct(&noisy.values)?;
            let q = frame_quality(&noisy.values, &x_hat)?;
            let magnitude = |clip: &AudioClip| -> Result<Spectrogram> {
                features(clip, &StftConfig { log1p: false, ..*stft })
            };
            let snr = frame_snr(&magnitude(&p.clean)?, &magnitude(&p.noisy)?)?;
            Ok(FrameClipRow {
                id: p.id.clone(),
                lcc: pearson_lcc(&q, &snr)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let used: Vec<f64> = clips.iter().filter(|c| !c.lcc.constant_input).map(|c| c.lcc.r).collect();
    let mean_lcc = if used.is_empty() {
        0.0
    } else {
        used.iter().sum::<f64>() / used.len() as f64
    };
    Ok(FrameQualityReport {
        excluded: clips.len() - used.len(),
        clips,
        mean_lcc,
    })
}

pub fn eval_frame_quality(model: &impl Reconstructor, manifest: &Manifest, stft: &StftConfig) -> Result<FrameQualityReport> {
    eval_frame_quality_pairs(model, &load_pairs(manifest)?, stft)
}
