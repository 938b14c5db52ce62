//! The VQ-VAE objective: reconstruction distance plus commitment term.
//! The codebook term is realized by EMA updates, not by gradient.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network, ReconLoss, VqVaeModel};
use crate::nn::{lit, Module, Scalar};
use crate::vq::{commitment_loss, Quantized};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    /// The codebook term is carried out by the EMA update.
    pub codebook_ema_applied: bool,
    pub commit: f64,
    /// `recon + commit`.
    pub total: f64,
}

/// Reconstruction distance and its gradient w.r.t. `x_hat`.
pub fn recon_loss<S: Scalar>(x: &Array2<S>, x_hat: &Array2<S>, kind: ReconLoss) -> Result<(f64, Array2<S>)> {
    if x.dim() != x_hat.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.dim(), x_hat.dim())));
    }
    let n = x.len().max(1) as f64;
    match kind {
        ReconLoss::L1 => {
            let value = Zip::from(x).and(x_hat).fold(0.0, |acc, &a, &b| acc + (a - b).abs().to_f64().unwrap()) / n;
            let scale = lit::<S>(1.0 / n);
            let grad = Zip::from(x).and(x_hat).map_collect(|&a, &b| {
                if b > a {
                    scale
                } else if b < a {
                    -scale
                } else {
                    S::zero()
                }
            });
            Ok((value, grad))
        }
        ReconLoss::L2 => {
            let value = Zip::from(x).and(x_hat).fold(0.0, |acc, &a, &b| acc + (a - b).to_f64().unwrap().powi(2)) / n;
            let grad = (x_hat - x) * lit::<S>(2.0 / n);
            Ok((value, grad))
        }
        ReconLoss::NegCosine => {
            let mut grad = Array2::zeros(x.raw_dim());
            let mut total = 0.0;
            let mut used = 0usize;
            let mut pending = Vec::new();
            for (t, (a, b)) in x.columns().into_iter().zip(x_hat.columns()).enumerate() {
                let na = a.dot(&a).sqrt();
                let nb = b.dot(&b).sqrt();
                if na <= S::zero() || nb <= S::zero() {
                    continue;
                }
                let cos = a.dot(&b) / (na * nb);
                total -= cos.to_f64().unwrap();
                used += 1;
                // d(-cos)/db = -(a / (|a||b|) - cos * b / |b|^2)
                let g = (&b * (cos / (nb * nb))) - &(&a / (na * nb));
                pending.push((t, g));
            }
            if used == 0 {
                return Ok((0.0, grad));
            }
            let inv = lit::<S>(1.0 / used as f64);
            for (t, g) in pending {
                grad.column_mut(t).assign(&(g * inv));
            }
            Ok((total / used as f64, grad))
        }
    }
}

/// Loss terms for one utterance.
pub fn vqvae_loss<S: Scalar>(
    x: &Array2<S>,
    x_hat: &Array2<S>,
    z: &Array2<S>,
    zq: &Array2<S>,
    config: &ModelConfig,
) -> Result<LossBreakdown> {
    let (recon, _) = recon_loss(x, x_hat, config.recon_loss)?;
    let (commit, _) = commitment_loss(z, zq, config.beta)?;
    Ok(LossBreakdown {
        recon,
        codebook_ema_applied: true,
        commit,
        total: recon + commit,
    })
}

/// Result of a forward/backward pass over one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceGrads<S> {
    pub loss: LossBreakdown,
    pub grads: Network<S>,
    /// Embeddings `d x T` used for the quantization.
    pub z: Array2<S>,
    pub quantized: Vec<Quantized>,
    /// Gradient w.r.t. the input spectrogram.
    pub input_grad: Array2<S>,
}

/// Forward, loss and backward for one utterance, routing the decoder
/// gradient to the encoder through the straight-through estimator.
pub fn utterance_grads<S: Scalar>(model: &VqVaeModel<S>, x: &Array2<S>) -> Result<UtteranceGrads<S>> {
    let net = &model.net;
    let (z, enc_cache) = net.encoder.forward_train(x)?;
    let (quantized, zq) = model.quantize(&z)?;
    let (x_hat, dec_cache) = net.decoder.forward_train(&zq)?;
    let (recon, d_xhat) = recon_loss(x, &x_hat, model.config.recon_loss)?;
    let (commit, d_commit) = commitment_loss(&z, &zq, model.config.beta)?;
    let mut grads = net.zeros_like();
    let d_zq = net.decoder.backward(&dec_cache, &d_xhat, &mut grads.decoder);
    let dz = d_zq + d_commit;
    let input_grad = net.encoder.backward(&enc_cache, &dz, &mut grads.encoder);
    Ok(UtteranceGrads {
        loss: LossBreakdown {
            recon,
            codebook_ema_applied: true,
            commit,
            total: recon + commit,
        },
        grads,
        z,
        quantized,
        input_grad,
    })
}

/// The training loss with the quantizer frozen at a reference point.
///
/// The decoder sees `z + (zq_ref - z_ref)` and the commitment term targets
/// `zq_ref`; at the reference parameters this equals the real loss, and its
/// exact derivative is what [`utterance_grads`] computes.
pub fn frozen_quantizer_loss<S: Scalar>(
    model: &VqVaeModel<S>,
    x: &Array2<S>,
    z_ref: &Array2<S>,
    zq_ref: &Array2<S>,
) -> Result<f64> {
    let z = model.encode(x)?;
    let decoder_input = &z + &(zq_ref - z_ref);
    let x_hat = model.decode(&decoder_input)?;
    let (recon, _) = recon_loss(x, &x_hat, model.config.recon_loss)?;
    let (commit, _) = commitment_loss(&z, zq_ref, model.config.beta)?;
    Ok(recon + commit)
}
