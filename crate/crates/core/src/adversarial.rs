//! Step 2: self-distillation of a student from a frozen teacher under
//! adversarial (or Gaussian) perturbations of the input spectrogram.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Zip};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ReconLoss, VqVaeModel};
use crate::nn::{lit, Adam, AdamConfig, Module, Scalar};
use crate::rng::rng_for;
use crate::train::{draw_crop, recon_loss};
use crate::vq::{Codebook, QuantMetric};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    /// L-infinity budget on the perturbation, in spectrogram units.
    pub eps: f32,
    /// Sign-gradient step; `eps / 2` when unset.
    pub step_size: Option<f32>,
}

impl AttackConfig {
    pub fn new(eps: f32) -> Self {
        Self {
            steps: 3,
            eps,
            step_size: None,
        }
    }

    pub fn alpha(&self) -> f32 {
        self.step_size.unwrap_or(self.eps / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidAttack("attack steps must be at least 1".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidAttack("eps must be positive".into()));
        }
        if !(self.alpha() > 0.0 && self.alpha().is_finite()) {
            return Err(Error::InvalidAttack("step size must be positive".into()));
        }
        Ok(())
    }
}

/// Default budget: 1% of the mean per-clip peak magnitude.
pub fn default_eps(corpus: &[Array2<f32>]) -> Result<f32> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mean_peak = corpus
        .iter()
        .map(|x| x.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64)
        .sum::<f64>()
        / corpus.len() as f64;
    Ok((0.01 * mean_peak) as f32)
}

/// `-(1/T) sum_t log softmax_v(-||e_t - C_v||)[target_t]` over the columns of `emb`,
/// with its gradient w.r.t. `emb`.
pub fn token_ce_loss_grad<S: Scalar>(
    emb: &Array2<S>,
    targets: &[usize],
    codebook: &Codebook<S>,
) -> Result<(f64, Array2<S>)> {
    let (d, frames) = emb.dim();
    if d != codebook.dim() {
        return Err(Error::ShapeMismatch(format!("embedding dim {d} vs codebook dim {}", codebook.dim())));
    }
    if targets.len() != frames {
        return Err(Error::LengthMismatch {
            left: targets.len(),
            right: frames,
        });
    }
    let size = codebook.size();
    if let Some(&bad) = targets.iter().find(|&&t| t >= size) {
        return Err(Error::IndexOutOfRange { index: bad, size });
    }
    let mut grad = Array2::<S>::zeros((d, frames));
    let mut total = 0.0;
    let inv_t = 1.0 / frames.max(1) as f64;
    let mut dist = vec![0.0f64; size];
    for (t, &target) in targets.iter().enumerate() {
        let e = emb.column(t);
        for (v, slot) in dist.iter_mut().enumerate() {
            let c = codebook.vectors.row(v);
            *slot = e
                .iter()
                .zip(c.iter())
                .map(|(&a, &b)| (a - b).to_f64().unwrap().powi(2))
                .sum::<f64>()
                .sqrt();
        }
        let max_logit = dist.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(-x));
        let sum_exp: f64 = dist.iter().map(|&x| (-x - max_logit).exp()).sum();
        let log_z = max_logit + sum_exp.ln();
        total += dist[target] + log_z;

        // d dist_v / d e = (e - C_v) / dist_v; weight is 1[v = target] - p_v
        let mut g = grad.column_mut(t);
        for (v, &dv) in dist.iter().enumerate() {
            let p = (-dv - log_z).exp();
            let w = if v == target { 1.0 - p } else { -p };
            if dv <= 0.0 || w == 0.0 {
                continue;
            }
            let coef = lit::<S>(w / dv * inv_t);
            Zip::from(&mut g)
                .and(&e)
                .and(codebook.vectors.row(v))
                .for_each(|g, &a, &b| *g += coef * (a - b));
        }
    }
    Ok((total * inv_t, grad))
}

pub fn token_ce_loss<S: Scalar>(emb: &Array2<S>, targets: &[usize], codebook: &Codebook<S>) -> Result<f64> {
    Ok(token_ce_loss_grad(emb, targets, codebook)?.0)
}

/// Token cross-entropy of `model`'s encoder on `x` and its gradient w.r.t. `x`.
pub fn token_ce_input_grad<S: Scalar>(
    model: &VqVaeModel<S>,
    x: &Array2<S>,
    targets: &[usize],
) -> Result<(f64, Array2<S>)> {
    let encoder = &model.net.encoder;
    let (z, cache) = encoder.forward_train(x)?;
    let (loss, dz) = token_ce_loss_grad(&z, targets, &model.codebook)?;
    let mut scratch = encoder.zeros_like();
    Ok((loss, encoder.backward(&cache, &dz, &mut scratch)))
}

/// Teacher tokens: nearest codeword by L2 distance.
pub fn tokens(model: &VqVaeModel<f32>, x: &Array2<f32>) -> Result<Vec<usize>> {
    let z = model.encode(x)?;
    Ok(model
        .codebook
        .quantize_frames(&z, QuantMetric::L2)?
        .into_iter()
        .map(|q| q.index)
        .collect())
}

/// Frozen teacher, trainable student sharing the teacher's codebook.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub teacher: VqVaeModel<f32>,
    pub student: VqVaeModel<f32>,
    /// Weight of the decoder L1 term.
    pub lambda_dec: f64,
    pub optimizer: Adam<f32>,
}

impl DistillState {
    /// Student starts as an exact copy of the teacher.
    pub fn new(teacher: VqVaeModel<f32>, lambda_dec: f64, adam: AdamConfig) -> Result<Self> {
        if !teacher.codebook.initialized {
            return Err(Error::UntrainedModel);
        }
        Ok(Self {
            student: teacher.clone(),
            teacher,
            lambda_dec,
            optimizer: Adam::new(adam),
        })
    }

    pub fn teacher_tokens(&self, x: &Array2<f32>) -> Result<Vec<usize>> {
        tokens(&self.teacher, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub delta: Array2<f32>,
    /// Student token CE on the clean input.
    pub ce_before: f64,
    /// Student token CE on the attacked input.
    pub ce_after: f64,
}

/// Sign-gradient ascent on the student's token CE within an L-infinity ball.
pub fn attack(state: &DistillState, x: &Array2<f32>, targets: &[usize], cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let (eps, alpha) = (cfg.eps, cfg.alpha());
    let mut delta = Array2::<f32>::zeros(x.raw_dim());
    let mut ce_before = 0.0;
    for step in 0..cfg.steps {
        let (loss, grad) = token_ce_input_grad(&state.student, &(x + &delta), targets)?;
        if step == 0 {
            ce_before = loss;
        }
        Zip::from(&mut delta).and(&grad).for_each(|d, &g| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *d = (*d + alpha * s).clamp(-eps, eps);
        });
    }
    let ce_after = token_ce_loss(&state.student.encode(&(x + &delta))?, targets, &state.student.codebook)?;
    Ok(AttackOutcome {
        delta,
        ce_before,
        ce_after,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillLosses {
    pub token_ce: f64,
    pub dec_l1: f64,
    pub total: f64,
}

struct StepGrads {
    losses: DistillLosses,
    grads: crate::model::Network<f32>,
}

fn distill_grads(state: &DistillState, x: &Array2<f32>, delta: &Array2<f32>, targets: &[usize]) -> Result<StepGrads> {
    if x.dim() != delta.dim() {
        return Err(Error::ShapeMismatch(format!("input {:?} vs delta {:?}", x.dim(), delta.dim())));
    }
    let student = &state.student;
    let net = &student.net;
    let attacked = x + delta;
    let (z, enc_cache) = net.encoder.forward_train(&attacked)?;
    let (token_ce, dz) = token_ce_loss_grad(&z, targets, &student.codebook)?;
    let mut grads = net.zeros_like();
    net.encoder.backward(&enc_cache, &dz, &mut grads.encoder);

    let (_, zq) = student.quantize(&z)?;
    let (x_hat, dec_cache) = net.decoder.forward_train(&zq)?;
    let (dec_l1, d_xhat) = recon_loss(x, &x_hat, ReconLoss::L1)?;
    if state.lambda_dec != 0.0 {
        let d_xhat = d_xhat * state.lambda_dec as f32;
        net.decoder.backward(&dec_cache, &d_xhat, &mut grads.decoder);
    }
    let total = token_ce + state.lambda_dec * dec_l1;
    if !total.is_finite() {
        return Err(Error::NonFinite("distillation loss".into()));
    }
    Ok(StepGrads {
        losses: DistillLosses {
            token_ce,
            dec_l1,
            total,
        },
        grads,
    })
}

/// One student update on a batch of clean inputs and their perturbations.
///
/// Token targets come from the teacher on the clean inputs. The decoder term
/// trains the decoder only; the codebook is never touched.
pub fn distill_step(state: &mut DistillState, xs: &[Array2<f32>], deltas: &[Array2<f32>]) -> Result<DistillLosses> {
    if xs.len() != deltas.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: deltas.len(),
        });
    }
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let targets = xs.iter().map(|x| state.teacher_tokens(x)).collect::<Result<Vec<_>>>()?;
    distill_step_with_targets(state, xs, deltas, &targets)
}

fn distill_step_with_targets(
    state: &mut DistillState,
    xs: &[Array2<f32>],
    deltas: &[Array2<f32>],
    targets: &[Vec<usize>],
) -> Result<DistillLosses> {
    let shared: &DistillState = state;
    let results: Vec<Result<StepGrads>> = xs
        .par_iter()
        .zip(deltas.par_iter())
        .zip(targets.par_iter())
        .map(|((x, d), t)| distill_grads(shared, x, d, t))
        .collect();
    let mut grads = state.student.net.zeros_like();
    let scale = 1.0 / xs.len() as f32;
    let mut sum = DistillLosses {
        token_ce: 0.0,
        dec_l1: 0.0,
        total: 0.0,
    };
    for r in results {
        let r = r?;
        grads.add_scaled(&r.grads, scale);
        sum.token_ce += r.losses.token_ce;
        sum.dec_l1 += r.losses.dec_l1;
        sum.total += r.losses.total;
    }
    let DistillState { student, optimizer, .. } = state;
    optimizer.step_module(&mut student.net, &grads)?;
    let n = xs.len() as f64;
    Ok(DistillLosses {
        token_ce: sum.token_ce / n,
        dec_l1: sum.dec_l1 / n,
        total: sum.total / n,
    })
}

/// Seeded Gaussian perturbation clipped to `[-eps, eps]`.
pub fn gaussian_delta(shape: (usize, usize), sigma: f32, eps: f32, seed: u64) -> Result<Array2<f32>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidAttack("sigma must be positive".into()));
    }
    let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::InvalidAttack(e.to_string()))?;
    let mut rng = rng_for(seed, 0);
    Ok(Array2::from_shape_simple_fn(shape, || normal.sample(&mut rng).clamp(-eps, eps)))
}

/// `distill_step` with seeded Gaussian noise in place of the attack.
pub fn gaussian_baseline_step(
    state: &mut DistillState,
    xs: &[Array2<f32>],
    sigma: f32,
    eps: f32,
    seed: u64,
) -> Result<DistillLosses> {
    let deltas = xs
        .iter()
        .enumerate()
        .map(|(i, x)| gaussian_delta(x.dim(), sigma, eps, crate::rng::derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    distill_step(state, xs, &deltas)
}

/// Fraction of frames where the student's token on the noisy input equals
/// the teacher's token on the paired clean input.
pub fn code_accuracy(
    student: &VqVaeModel<f32>,
    teacher: &VqVaeModel<f32>,
    pairs: &[(Array2<f32>, Array2<f32>)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let counts = pairs
        .par_iter()
        .map(|(clean, noisy)| {
            let a = tokens(teacher, clean)?;
            let b = tokens(student, noisy)?;
            token_agreement(&a, &b).map(|hits| (hits, a.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (hits, total) = counts.iter().fold((0, 0), |(h, t), &(a, b)| (h + a, t + b));
    Ok(hits as f64 / total.max(1) as f64)
}

/// Number of positions where two token sequences agree.
pub fn token_agreement(a: &[usize], b: &[usize]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Perturbation {
    Adversarial,
    Gaussian { sigma: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub crop_frames: usize,
    pub lr: f64,
    pub seed: u64,
    pub lambda_dec: f64,
    /// Probe interval for code accuracy.
    pub probe_every: usize,
    pub perturbation: Perturbation,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            max_steps: 200,
            batch_size: 8,
            crop_frames: 64,
            lr: 1e-4,
            seed: 0,
            lambda_dec: 1.0,
            probe_every: 50,
            perturbation: Perturbation::Adversarial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillLogRow {
    pub step: usize,
    pub token_ce: f64,
    pub dec_l1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLog {
    pub rows: Vec<DistillLogRow>,
    /// Code accuracy on the probe set before the first update.
    pub initial_code_acc: Option<f64>,
    pub attacks: usize,
    /// Attacks that raised the student's token CE.
    pub attacks_raised: usize,
}

impl DistillLog {
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

    pub fn final_code_acc(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.code_acc)
    }
}

/// Alternates perturbation and student update over random crops of `corpus`.
///
/// `probe` holds aligned (clean, noisy) spectrogram pairs for code accuracy.
pub fn run_step2(
    state: &mut DistillState,
    corpus: &[Array2<f32>],
    probe: &[(Array2<f32>, Array2<f32>)],
    attack_cfg: &AttackConfig,
    cfg: &DistillConfig,
) -> Result<DistillLog> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    attack_cfg.validate()?;
    state.lambda_dec = cfg.lambda_dec;
    state.optimizer.config.lr = cfg.lr;
    let mut data_rng = rng_for(cfg.seed, 1);
    let mut log = DistillLog::default();
    if !probe.is_empty() {
        log.initial_code_acc = Some(code_accuracy(&state.student, &state.teacher, probe)?);
    }
    for step in 1..=cfg.max_steps {
        let xs: Vec<Array2<f32>> = (0..cfg.batch_size)
            .map(|_| draw_crop(corpus, cfg.crop_frames, &mut data_rng))
            .collect();
        let targets = xs.iter().map(|x| state.teacher_tokens(x)).collect::<Result<Vec<_>>>()?;
        let deltas = match cfg.perturbation {
            Perturbation::Adversarial => {
                let shared: &DistillState = state;
                let outcomes = xs
                    .par_iter()
                    .zip(targets.par_iter())
                    .map(|(x, t)| attack(shared, x, t, attack_cfg))
                    .collect::<Result<Vec<_>>>()?;
                log.attacks += outcomes.len();
                log.attacks_raised += outcomes.iter().filter(|o| o.ce_after > o.ce_before).count();
                outcomes.into_iter().map(|o| o.delta).collect()
            }
            Perturbation::Gaussian { sigma } => xs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let seed = crate::rng::derive_seed(cfg.seed, (step * cfg.batch_size + i) as u64);
                    gaussian_delta(x.dim(), sigma, attack_cfg.eps, seed)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let losses = distill_step_with_targets(state, &xs, &deltas, &targets)?;
        let probe_now = !probe.is_empty() && (step % cfg.probe_every.max(1) == 0 || step == cfg.max_steps);
        let code_acc = if probe_now {
            Some(code_accuracy(&state.student, &state.teacher, probe)?)
        } else {
            None
        };
        log.rows.push(DistillLogRow {
            step,
            token_ce: losses.token_ce,
            dec_l1: losses.dec_l1,
            code_acc,
        });
    }
    Ok(log)
}
