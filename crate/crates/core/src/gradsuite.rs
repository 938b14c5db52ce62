//! The finite-difference suite behind `vqlab gradcheck`.
//!
//! Every differentiable op is checked in `f64` against central differences
//! on small random shapes over several seeds.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{token_ce_input_grad, token_ce_loss};
use crate::error::Result;
use crate::model::{build_model, ModelConfig, VqVaeModel};
use crate::nn::{
    grad_check, leaky_relu, leaky_relu_backward, Conv1d, InstanceNorm, Module, NormMode, TransformerLayer,
};
use crate::rng::rng_for;
use crate::train::{frozen_quantizer_loss, utterance_grads};
use crate::vq::Codebook;

/// Result for one op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    /// Largest relative error over all seeds and coordinates.
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub seeds: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn flat_params<M: Module<f64>>(m: &M) -> Vec<f64> {
    m.params().iter().flat_map(|p| p.data.to_vec()).collect()
}

fn with_params<M: Module<f64>>(m: &M, v: &[f64]) -> M {
    let mut out = m.clone();
    let mut off = 0;
    for dst in out.params_mut() {
        dst.copy_from_slice(&v[off..off + dst.len()]);
        off += dst.len();
    }
    out
}

fn conv1d(seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = rng_for(seed, 10);
        let conv = Conv1d::<f64>::new(3, 4, 3, &mut rng);
        let x = random(3, 8, &mut rng);
        let w = random(4, 8, &mut rng);
        let (_, cache) = conv.forward_train(&x)?;
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&cache, &w, &mut grad);
        let f = |v: &[f64]| {
            let a = Array2::from_shape_vec((3, 8), v.to_vec()).unwrap();
            (&conv.forward(&a).unwrap() * &w).sum()
        };
        worst = worst.max(grad_check(f, dx.as_slice().unwrap(), x.as_slice().unwrap()));
        let fp = |v: &[f64]| (&with_params(&conv, v).forward(&x).unwrap() * &w).sum();
        worst = worst.max(grad_check(fp, &flat_params(&grad), &flat_params(&conv)));
    }
    Ok(worst)
}

fn instance_norm(mode: NormMode, seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = rng_for(seed, 11);
        let mut norm = InstanceNorm::<f64>::new(3, mode, true);
        norm.gain = Some(random(1, 3, &mut rng).row(0).to_owned());
        norm.bias = Some(random(1, 3, &mut rng).row(0).to_owned());
        let x = random(3, 7, &mut rng);
        let w = random(3, 7, &mut rng);
        let (_, cache) = norm.forward_train(&x)?;
        let mut grad = norm.zeros_like();
        let dx = norm.backward(&cache, &w, &mut grad);
        let f = |v: &[f64]| {
            let a = Array2::from_shape_vec((3, 7), v.to_vec()).unwrap();
            (&norm.forward(&a).unwrap() * &w).sum()
        };
        worst = worst.max(grad_check(f, dx.as_slice().unwrap(), x.as_slice().unwrap()));
        let fp = |v: &[f64]| (&with_params(&norm, v).forward(&x).unwrap() * &w).sum();
        worst = worst.max(grad_check(fp, &flat_params(&grad), &flat_params(&norm)));
    }
    Ok(worst)
}

fn leaky(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = rng_for(seed, 12);
        // stay away from the kink
        let x = Array2::from_shape_simple_fn((3, 4), || {
            let v: f64 = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { v } else { -v }
        });
        let w = random(3, 4, &mut rng);
        let dx = leaky_relu_backward(&x, &w, 0.2);
        let f = |v: &[f64]| {
            let a = Array2::from_shape_vec((3, 4), v.to_vec()).unwrap();
            (&leaky_relu(&a, 0.2) * &w).sum()
        };
        worst = worst.max(grad_check(f, dx.as_slice().unwrap(), x.as_slice().unwrap()));
    }
    worst
}

fn transformer(seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = rng_for(seed, 13);
        let layer = TransformerLayer::<f64>::new(8, 2, 16, 0.2, &mut rng)?;
        let x = random(4, 8, &mut rng);
        let w = random(4, 8, &mut rng);
        let (_, cache) = layer.forward_train(&x)?;
        let mut grad = layer.zeros_like();
        let dx = layer.backward(&cache, &w, &mut grad);
        let f = |v: &[f64]| {
            let a = Array2::from_shape_vec((4, 8), v.to_vec()).unwrap();
            (&layer.forward(&a).unwrap() * &w).sum()
        };
        worst = worst.max(grad_check(f, dx.as_slice().unwrap(), x.as_slice().unwrap()));
        if seed < 3 {
            let fp = |v: &[f64]| (&with_params(&layer, v).forward(&x).unwrap() * &w).sum();
            worst = worst.max(grad_check(fp, &flat_params(&grad), &flat_params(&layer)));
        }
    }
    Ok(worst)
}

/// Tiny model (F=8, T=6, V=4, d=4) with codewords placed near its embeddings.
fn tiny_model(base: ModelConfig, seed: u64) -> Result<(VqVaeModel<f64>, Array2<f64>)> {
    let cfg = ModelConfig {
        codebook_size: 4,
        code_dim: 4,
        c1: 5,
        c2: 4,
        kernel: 3,
        input_bins: 8,
        transformer_heads: 2,
        transformer_ff: 8,
        ..base
    };
    let mut model = build_model::<f64>(&cfg, seed)?;
    let mut rng = rng_for(seed, 14);
    let x = Array2::from_shape_simple_fn((8, 6), || rng.random_range(0.05..1.0));
    let z = model.encode(&x)?;
    let codes = Array2::from_shape_fn((4, 4), |(v, j)| z[[j, v]] + rng.random_range(-0.3..0.3));
    model.codebook = Codebook::from_vectors(codes)?;
    Ok((model, x))
}

fn full_loss(base: ModelConfig, seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let (model, x) = tiny_model(base.clone(), seed)?;
        let g = utterance_grads(&model, &x)?;
        let (_, zq) = model.quantize(&g.z)?;
        let analytic = flat_params(&g.grads);
        let f = |v: &[f64]| {
            let mut m = model.clone();
            m.net = with_params(&model.net, v);
            frozen_quantizer_loss(&m, &x, &g.z, &zq).unwrap()
        };
        worst = worst.max(grad_check(f, &analytic, &flat_params(&model.net)));
    }
    Ok(worst)
}

fn token_ce(seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let (model, x) = tiny_model(ModelConfig::se(), seed)?;
        let mut rng = rng_for(seed, 15);
        let targets: Vec<usize> = (0..x.ncols()).map(|_| rng.random_range(0..4)).collect();
        let (_, g) = token_ce_input_grad(&model, &x, &targets)?;
        let f = |v: &[f64]| {
            let a = Array2::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap();
            token_ce_loss(&model.encode(&a).unwrap(), &targets, &model.codebook).unwrap()
        };
        worst = worst.max(grad_check(f, g.as_slice().unwrap(), x.as_slice().unwrap()));
    }
    Ok(worst)
}

/// Runs every check over `seeds` seeds (full-loss checks use a third as many).
pub fn gradient_suite(seeds: u64) -> Result<Vec<OpCheck>> {
    let seeds = seeds.max(1);
    let heavy = seeds.div_ceil(3);
    let check = |op: &str, err: f64, tol: f64, n: u64| OpCheck {
        op: op.into(),
        max_rel_err: err,
        tolerance: tol,
        seeds: n as usize,
    };
    Ok(vec![
        check("conv1d", conv1d(seeds)?, 1e-4, seeds),
        check("instance_norm_full", instance_norm(NormMode::Full, seeds)?, 1e-4, seeds),
        check("instance_norm_mean_only", instance_norm(NormMode::MeanOnly, seeds)?, 1e-4, seeds),
        check("leaky_relu", leaky(seeds), 1e-6, seeds),
        check("transformer_layer", transformer(seeds)?, 1e-3, seeds),
        check("token_ce_input", token_ce(seeds)?, 1e-3, seeds),
        check("loss_qe_params", full_loss(ModelConfig::qe(), heavy)?, 1e-3, heavy),
        check("loss_se_params", full_loss(ModelConfig::se(), heavy)?, 1e-3, heavy),
    ])
}
