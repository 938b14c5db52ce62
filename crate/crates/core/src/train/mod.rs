//! Step-1 training: EMA-codebook VQ-VAE over clean spectrograms with
//! validation-based model selection.

pub mod checkpoint;
pub mod loss;

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{pearson_lcc, Correlation};
use crate::model::{build_model, ModelConfig, VqVaeModel};
use crate::nn::{Adam, AdamConfig, Module};
use crate::rng::{derive_seed, rng_for};
use crate::scoring::{vqscore, ScoreMetric, ScoreSpace};
use crate::vq::{codebook_usage, ema_update, kmeans_init};

pub use checkpoint::{inspect_checkpoint, load_checkpoint, save_checkpoint, CheckpointInfo};
pub use loss::{frozen_quantizer_loss, recon_loss, utterance_grads, vqvae_loss, LossBreakdown, UtteranceGrads};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Utterance crops per step.
    pub batch_size: usize,
    /// Frames per crop; shorter clips are used whole.
    pub crop_frames: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Validation interval in steps.
    pub val_every: usize,
    /// Validations without improvement before stopping.
    pub early_stop_patience: usize,
    pub kmeans_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            crop_frames: 128,
            max_steps: 2000,
            lr: 1e-3,
            seed: 0,
            val_every: 100,
            early_stop_patience: 5,
            kmeans_iters: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("batch_size", self.batch_size),
            ("crop_frames", self.crop_frames),
            ("max_steps", self.max_steps),
            ("val_every", self.val_every),
            ("early_stop_patience", self.early_stop_patience),
            ("kmeans_iters", self.kmeans_iters),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

/// A validation spectrogram with its known mixing SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSpectrogram {
    pub features: Array2<f32>,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub recon: f64,
    pub commit: f64,
    pub perplexity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_lcc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    /// Step of the returned model when validation was used.
    pub best_step: Option<usize>,
    pub best_val_lcc: Option<f64>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn recon_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.recon).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Random `T`-frame crop of a random clip.
pub(crate) fn draw_crop(corpus: &[Array2<f32>], crop: usize, rng: &mut impl Rng) -> Array2<f32> {
    let clip = &corpus[rng.random_range(0..corpus.len())];
    let frames = clip.ncols();
    if frames <= crop {
        return clip.clone();
    }
    let start = rng.random_range(0..=frames - crop);
    clip.slice(s![.., start..start + crop]).to_owned()
}

pub(crate) fn draw_batch(corpus: &[Array2<f32>], cfg: &TrainConfig, rng: &mut impl Rng) -> Vec<Array2<f32>> {
    (0..cfg.batch_size).map(|_| draw_crop(corpus, cfg.crop_frames, rng)).collect()
}

/// Fits the codebook to encoder outputs, drawing extra batches until there
/// are at least as many frames as codes.
fn init_codebook(
    model: &mut VqVaeModel<f32>,
    first: &[Array2<f32>],
    corpus: &[Array2<f32>],
    cfg: &TrainConfig,
    data_rng: &mut impl Rng,
) -> Result<()> {
    let size = model.config.codebook_size;
    let mut rows: Vec<Array2<f32>> = Vec::new();
    let mut count = 0;
    let mut extra = Vec::new();
    let mut batch: &[Array2<f32>] = first;
    loop {
        for x in batch {
            let z = model.encode(x)?;
            count += z.ncols();
            rows.push(z.reversed_axes());
        }
        if count >= size {
            break;
        }
        extra = draw_batch(corpus, cfg, data_rng);
        batch = &extra;
    }
    drop(extra);
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let points = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let mut rng = rng_for(cfg.seed, 2);
    let mut codebook = kmeans_init(&points, size, cfg.kmeans_iters, &mut rng)?;
    codebook.decay = model.config.ema_decay;
    codebook.laplace_eps = model.config.laplace_eps;
    model.codebook = codebook;
    Ok(())
}

/// One optimizer step plus EMA update on a batch; returns (recon, commit, perplexity).
pub fn train_step(model: &mut VqVaeModel<f32>, adam: &mut Adam<f32>, batch: &[Array2<f32>]) -> Result<(f64, f64, f64)> {
    let results: Vec<Result<UtteranceGrads<f32>>> = batch.par_iter().map(|x| utterance_grads(model, x)).collect();
    let mut grads = model.net.zeros_like();
    let (mut recon, mut commit) = (0.0, 0.0);
    let mut assignments = Vec::new();
    let mut embeddings = Vec::new();
    let scale = 1.0 / batch.len() as f32;
    for r in results {
        let g = r?;
        if !g.loss.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        recon += g.loss.recon;
        commit += g.loss.commit;
        grads.add_scaled(&g.grads, scale);
        assignments.extend(g.quantized.iter().map(|q| q.index));
        embeddings.push(g.z.reversed_axes());
    }
    adam.step_module(&mut model.net, &grads)?;
    let views: Vec<_> = embeddings.iter().map(|e| e.view()).collect();
    let points = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    ema_update(&mut model.codebook, &assignments, &points)?;
    let n = batch.len() as f64;
    let usage = codebook_usage(&assignments, model.codebook.size());
    Ok((recon / n, commit / n, usage.perplexity))
}

/// Pearson LCC between VQScore (cos, z) and the known SNR over a labeled set.
pub fn validate_qe(model: &VqVaeModel<f32>, val: &[LabeledSpectrogram]) -> Result<Correlation> {
    if val.is_empty() {
        return Err(Error::EmptyValSet);
    }
    let scores = val
        .par_iter()
        .map(|v| vqscore(&v.features, model, ScoreMetric::Cos, ScoreSpace::Z))
        .collect::<Result<Vec<f64>>>()?;
    let snrs: Vec<f64> = val.iter().map(|v| v.snr_db).collect();
    if scores.len() < 2 {
        return Err(Error::TooFewPoints(scores.len()));
    }
    pearson_lcc(&scores, &snrs)
}

/// Trains `model` in place on clean spectrograms.
///
/// With a non-empty `val` set the returned model is the snapshot with the
/// highest validation LCC, and training stops after `early_stop_patience`
/// validations without improvement.
pub fn train_model(
    mut model: VqVaeModel<f32>,
    corpus: &[Array2<f32>],
    val: &[LabeledSpectrogram],
    cfg: &TrainConfig,
) -> Result<(VqVaeModel<f32>, TrainLog)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut data_rng = rng_for(cfg.seed, 1);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut log = TrainLog::default();
    let mut best: Option<(f64, VqVaeModel<f32>)> = None;
    let mut stale = 0;

    for step in 1..=cfg.max_steps {
        let batch = draw_batch(corpus, cfg, &mut data_rng);
        if !model.codebook.initialized {
            init_codebook(&mut model, &batch, corpus, cfg, &mut data_rng)?;
        }
        let (recon, commit, perplexity) = train_step(&mut model, &mut adam, &batch)?;
        let mut row = TrainLogRow {
            step,
            recon,
            commit,
            perplexity,
            val_lcc: None,
        };
        if !val.is_empty() && (step % cfg.val_every == 0 || step == cfg.max_steps) {
            let lcc = validate_qe(&model, val)?.r;
            row.val_lcc = Some(lcc);
            if best.as_ref().is_none_or(|(b, _)| lcc > *b) {
                best = Some((lcc, model.clone()));
                log.best_step = Some(step);
                log.best_val_lcc = Some(lcc);
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log.rows.push(row);
        if stale >= cfg.early_stop_patience {
            log.stopped_early = true;
            break;
        }
    }
    Ok((best.map(|(_, m)| m).unwrap_or(model), log))
}

/// Builds a model from `model_cfg` (seeded from the training seed) and trains it.
pub fn train_vqvae(
    corpus: &[Array2<f32>],
    val: &[LabeledSpectrogram],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(VqVaeModel<f32>, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let model = build_model(model_cfg, derive_seed(cfg.seed, 0))?;
    train_model(model, corpus, val, cfg)
}

/// Step-1 training of a quality-estimation model on clean spectrograms.
pub fn train_qe(
    corpus: &[Array2<f32>],
    val: &[LabeledSpectrogram],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(VqVaeModel<f32>, TrainLog)> {
    train_vqvae(corpus, val, model_cfg, cfg)
}
