//! The encoder / quantizer / decoder stack and its quality-estimation (QE)
//! and speech-enhancement (SE) presets.
//!
//! Encoder: `IN → conv(F→c1) → IN → leaky → conv(c1→c2) → IN → leaky → conv(c2→d)`
//! followed by two transformer layers when enabled. The decoder mirrors it
//! (transformers first) and ends in a softplus so reconstructions are
//! non-negative magnitudes.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, leaky_relu_backward, lit, prefixed, softplus, softplus_backward, Conv1d, ConvCache,
    InstanceNorm, Module, NormCache, NormMode, ParamView, Scalar, TransformerCache, TransformerLayer,
};
use crate::vq::{Codebook, QuantMetric, Quantized};

/// Reconstruction distance used by the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    /// Mean over frames of `-cos(X_t, X̂_t)`.
    NegCosine,
    /// Mean absolute error.
    L1,
    /// Mean squared error.
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of codes `V`.
    pub codebook_size: usize,
    /// Code dimension `d`.
    pub code_dim: usize,
    pub c1: usize,
    pub c2: usize,
    pub kernel: usize,
    pub use_transformer: bool,
    pub transformer_heads: usize,
    pub transformer_ff: usize,
    pub in_mode: NormMode,
    pub quant_metric: QuantMetric,
    pub recon_loss: ReconLoss,
    /// Commitment weight.
    pub beta: f64,
    /// Input frequency bins `F`.
    pub input_bins: usize,
    pub leaky_slope: f64,
    pub ema_decay: f64,
    pub laplace_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::qe()
    }
}

impl ModelConfig {
    /// Quality-estimation preset.
    pub fn qe() -> Self {
        Self {
            codebook_size: 2048,
            code_dim: 32,
            c1: 128,
            c2: 64,
            kernel: 7,
            use_transformer: false,
            transformer_heads: 8,
            transformer_ff: 128,
            in_mode: NormMode::Full,
            quant_metric: QuantMetric::Cos,
            recon_loss: ReconLoss::NegCosine,
            beta: 1.0,
            input_bins: 257,
            leaky_slope: 0.2,
            ema_decay: crate::vq::DEFAULT_DECAY,
            laplace_eps: crate::vq::DEFAULT_LAPLACE_EPS,
        }
    }

    /// Speech-enhancement preset.
    pub fn se() -> Self {
        Self {
            codebook_size: 4096,
            code_dim: 128,
            c1: 200,
            c2: 150,
            use_transformer: true,
            transformer_heads: 8,
            transformer_ff: 512,
            in_mode: NormMode::MeanOnly,
            quant_metric: QuantMetric::L2,
            recon_loss: ReconLoss::L1,
            beta: 3.0,
            ..Self::qe()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.codebook_size < 2 {
            return fail("codebook_size must be at least 2");
        }
        if self.code_dim == 0 || self.c1 == 0 || self.c2 == 0 || self.input_bins == 0 {
            return fail("layer widths must be positive");
        }
        if self.kernel % 2 == 0 {
            return fail("kernel size must be odd");
        }
        if self.use_transformer {
            if self.transformer_heads == 0 || self.code_dim % self.transformer_heads != 0 {
                return Err(Error::HeadDivisibility {
                    dim: self.code_dim,
                    heads: self.transformer_heads,
                });
            }
            if self.transformer_ff == 0 {
                return fail("transformer_ff must be positive");
            }
        }
        if !(self.beta >= 0.0) || !(0.0..1.0).contains(&self.ema_decay) || !(self.laplace_eps > 0.0) {
            return fail("beta, ema_decay or laplace_eps out of range");
        }
        Ok(())
    }
}

fn to_time_major<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    x.t().as_standard_layout().to_owned()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S> {
    pub input_norm: InstanceNorm<S>,
    pub conv1: Conv1d<S>,
    pub norm1: InstanceNorm<S>,
    pub conv2: Conv1d<S>,
    pub norm2: InstanceNorm<S>,
    pub conv3: Conv1d<S>,
    pub transformers: Vec<TransformerLayer<S>>,
    slope: S,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<S> {
    input_norm: NormCache<S>,
    conv1: ConvCache<S>,
    norm1: NormCache<S>,
    pre1: Array2<S>,
    conv2: ConvCache<S>,
    norm2: NormCache<S>,
    pre2: Array2<S>,
    conv3: ConvCache<S>,
    transformers: Vec<TransformerCache<S>>,
    /// Output of the first (input) normalization.
    pub normalized_input: Array2<S>,
}

impl<S: Scalar> Encoder<S> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let slope = lit(cfg.leaky_slope);
        let transformers = if cfg.use_transformer {
            (0..2)
                .map(|_| TransformerLayer::new(cfg.code_dim, cfg.transformer_heads, cfg.transformer_ff, slope, rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            input_norm: InstanceNorm::new(cfg.input_bins, cfg.in_mode, true),
            conv1: Conv1d::new(cfg.input_bins, cfg.c1, cfg.kernel, rng),
            norm1: InstanceNorm::new(cfg.c1, cfg.in_mode, true),
            conv2: Conv1d::new(cfg.c1, cfg.c2, cfg.kernel, rng),
            norm2: InstanceNorm::new(cfg.c2, cfg.in_mode, true),
            conv3: Conv1d::new(cfg.c2, cfg.code_dim, cfg.kernel, rng),
            transformers,
            slope,
        })
    }

    pub fn forward_train(&self, x: &Array2<S>) -> Result<(Array2<S>, EncoderCache<S>)> {
        let (h, input_norm) = self.input_norm.forward_train(x)?;
        let normalized_input = h.clone();
        let (h, conv1) = self.conv1.forward_train(&h)?;
        let (pre1, norm1) = self.norm1.forward_train(&h)?;
        let h = leaky_relu(&pre1, self.slope);
        let (h, conv2) = self.conv2.forward_train(&h)?;
        let (pre2, norm2) = self.norm2.forward_train(&h)?;
        let h = leaky_relu(&pre2, self.slope);
        let (mut z, conv3) = self.conv3.forward_train(&h)?;
        let mut transformers = Vec::with_capacity(self.transformers.len());
        if !self.transformers.is_empty() {
            let mut seq = to_time_major(&z);
            for layer in &self.transformers {
                let (out, cache) = layer.forward_train(&seq)?;
                seq = out;
                transformers.push(cache);
            }
            z = to_time_major(&seq);
        }
        Ok((
            z,
            EncoderCache {
                input_norm,
                conv1,
                norm1,
                pre1,
                conv2,
                norm2,
                pre2,
                conv3,
                transformers,
                normalized_input,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input spectrogram.
    pub fn backward(&self, cache: &EncoderCache<S>, dz: &Array2<S>, grad: &mut Self) -> Array2<S> {
        let mut dz = dz.clone();
        if !self.transformers.is_empty() {
            let mut dseq = to_time_major(&dz);
            for ((layer, c), g) in self
                .transformers
                .iter()
                .zip(&cache.transformers)
                .zip(grad.transformers.iter_mut())
                .rev()
            {
                dseq = layer.backward(c, &dseq, g);
            }
            dz = to_time_major(&dseq);
        }
        let dh = self.conv3.backward(&cache.conv3, &dz, &mut grad.conv3);
        let dh = leaky_relu_backward(&cache.pre2, &dh, self.slope);
        let dh = self.norm2.backward(&cache.norm2, &dh, &mut grad.norm2);
        let dh = self.conv2.backward(&cache.conv2, &dh, &mut grad.conv2);
        let dh = leaky_relu_backward(&cache.pre1, &dh, self.slope);
        let dh = self.norm1.backward(&cache.norm1, &dh, &mut grad.norm1);
        let dh = self.conv1.backward(&cache.conv1, &dh, &mut grad.conv1);
        self.input_norm.backward(&cache.input_norm, &dh, &mut grad.input_norm)
    }
}

impl<S: Scalar> Module<S> for Encoder<S> {
    fn params(&self) -> Vec<ParamView<'_, S>> {
        let mut out = prefixed("input_norm", self.input_norm.params());
        out.extend(prefixed("conv1", self.conv1.params()));
        out.extend(prefixed("norm1", self.norm1.params()));
        out.extend(prefixed("conv2", self.conv2.params()));
        out.extend(prefixed("norm2", self.norm2.params()));
        out.extend(prefixed("conv3", self.conv3.params()));
        for (i, t) in self.transformers.iter().enumerate() {
            out.extend(prefixed(&format!("transformer{i}"), t.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = self.input_norm.params_mut();
        out.extend(self.conv1.params_mut());
        out.extend(self.norm1.params_mut());
        out.extend(self.conv2.params_mut());
        out.extend(self.norm2.params_mut());
        out.extend(self.conv3.params_mut());
        for t in &mut self.transformers {
            out.extend(t.params_mut());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<S> {
    pub transformers: Vec<TransformerLayer<S>>,
    pub conv1: Conv1d<S>,
    pub norm1: InstanceNorm<S>,
    pub conv2: Conv1d<S>,
    pub norm2: InstanceNorm<S>,
    pub conv3: Conv1d<S>,
    slope: S,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<S> {
    transformers: Vec<TransformerCache<S>>,
    conv1: ConvCache<S>,
    norm1: NormCache<S>,
    pre1: Array2<S>,
    conv2: ConvCache<S>,
    norm2: NormCache<S>,
    pre2: Array2<S>,
    conv3: ConvCache<S>,
    logits: Array2<S>,
}

impl<S: Scalar> Decoder<S> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let slope = lit(cfg.leaky_slope);
        let transformers = if cfg.use_transformer {
            (0..2)
                .map(|_| TransformerLayer::new(cfg.code_dim, cfg.transformer_heads, cfg.transformer_ff, slope, rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            transformers,
            conv1: Conv1d::new(cfg.code_dim, cfg.c2, cfg.kernel, rng),
            norm1: InstanceNorm::new(cfg.c2, cfg.in_mode, true),
            conv2: Conv1d::new(cfg.c2, cfg.c1, cfg.kernel, rng),
            norm2: InstanceNorm::new(cfg.c1, cfg.in_mode, true),
            conv3: Conv1d::new(cfg.c1, cfg.input_bins, cfg.kernel, rng),
            slope,
        })
    }

    pub fn forward_train(&self, zq: &Array2<S>) -> Result<(Array2<S>, DecoderCache<S>)> {
        let mut h = zq.clone();
        let mut transformers = Vec::with_capacity(self.transformers.len());
        if !self.transformers.is_empty() {
            let mut seq = to_time_major(&h);
            for layer in &self.transformers {
                let (out, cache) = layer.forward_train(&seq)?;
                seq = out;
                transformers.push(cache);
            }
            h = to_time_major(&seq);
        }
        let (h, conv1) = self.conv1.forward_train(&h)?;
        let (pre1, norm1) = self.norm1.forward_train(&h)?;
        let h = leaky_relu(&pre1, self.slope);
        let (h, conv2) = self.conv2.forward_train(&h)?;
        let (pre2, norm2) = self.norm2.forward_train(&h)?;
        let h = leaky_relu(&pre2, self.slope);
        let (logits, conv3) = self.conv3.forward_train(&h)?;
        let out = softplus(&logits);
        Ok((
            out,
            DecoderCache {
                transformers,
                conv1,
                norm1,
                pre1,
                conv2,
                norm2,
                pre2,
                conv3,
                logits,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the decoder input.
    pub fn backward(&self, cache: &DecoderCache<S>, dy: &Array2<S>, grad: &mut Self) -> Array2<S> {
        let dh = softplus_backward(&cache.logits, dy);
        let dh = self.conv3.backward(&cache.conv3, &dh, &mut grad.conv3);
        let dh = leaky_relu_backward(&cache.pre2, &dh, self.slope);
        let dh = self.norm2.backward(&cache.norm2, &dh, &mut grad.norm2);
        let dh = self.conv2.backward(&cache.conv2, &dh, &mut grad.conv2);
        let dh = leaky_relu_backward(&cache.pre1, &dh, self.slope);
        let dh = self.norm1.backward(&cache.norm1, &dh, &mut grad.norm1);
        let mut dh = self.conv1.backward(&cache.conv1, &dh, &mut grad.conv1);
        if !self.transformers.is_empty() {
            let mut dseq = to_time_major(&dh);
            for ((layer, c), g) in self
                .transformers
                .iter()
                .zip(&cache.transformers)
                .zip(grad.transformers.iter_mut())
                .rev()
            {
                dseq = layer.backward(c, &dseq, g);
            }
            dh = to_time_major(&dseq);
        }
        dh
    }
}

impl<S: Scalar> Module<S> for Decoder<S> {
    fn params(&self) -> Vec<ParamView<'_, S>> {
        let mut out = Vec::new();
        for (i, t) in self.transformers.iter().enumerate() {
            out.extend(prefixed(&format!("transformer{i}"), t.params()));
        }
        out.extend(prefixed("conv1", self.conv1.params()));
        out.extend(prefixed("norm1", self.norm1.params()));
        out.extend(prefixed("conv2", self.conv2.params()));
        out.extend(prefixed("norm2", self.norm2.params()));
        out.extend(prefixed("conv3", self.conv3.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = Vec::new();
        for t in &mut self.transformers {
            out.extend(t.params_mut());
        }
        out.extend(self.conv1.params_mut());
        out.extend(self.norm1.params_mut());
        out.extend(self.conv2.params_mut());
        out.extend(self.norm2.params_mut());
        out.extend(self.conv3.params_mut());
        out
    }
}

/// Encoder and decoder weights: everything trained by gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    pub encoder: Encoder<S>,
    pub decoder: Decoder<S>,
}

impl<S: Scalar> Module<S> for Network<S> {
    fn params(&self) -> Vec<ParamView<'_, S>> {
        let mut out = prefixed("encoder", self.encoder.params());
        out.extend(prefixed("decoder", self.decoder.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqVaeModel<S = f32> {
    pub config: ModelConfig,
    pub net: Network<S>,
    pub codebook: Codebook<S>,
}

/// Everything produced by one pass through the model.
#[derive(Debug, Clone)]
pub struct ForwardOutput<S> {
    /// Encoder embeddings, `d x T`.
    pub z: Array2<S>,
    pub quantized: Vec<Quantized>,
    /// Selected codewords, `d x T`.
    pub zq: Array2<S>,
    /// Reconstruction, `F x T`.
    pub x_hat: Array2<S>,
}

impl<S> ForwardOutput<S> {
    pub fn indices(&self) -> Vec<usize> {
        self.quantized.iter().map(|q| q.index).collect()
    }
}

/// Builds a model with freshly initialized weights and an empty codebook.
pub fn build_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<VqVaeModel<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(config, &mut rng)?;
    let decoder = Decoder::new(config, &mut rng)?;
    let mut codebook = Codebook::zeros(config.codebook_size, config.code_dim);
    codebook.decay = config.ema_decay;
    codebook.laplace_eps = config.laplace_eps;
    Ok(VqVaeModel {
        config: config.clone(),
        net: Network { encoder, decoder },
        codebook,
    })
}

impl<S: Scalar> VqVaeModel<S> {
    fn check_input(&self, x: &Array2<S>) -> Result<()> {
        if x.nrows() != self.config.input_bins {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} bins, got {}",
                self.config.input_bins,
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(())
    }

    /// `F x T` spectrogram to `d x T` embeddings.
    pub fn encode(&self, x: &Array2<S>) -> Result<Array2<S>> {
        self.check_input(x)?;
        Ok(self.net.encoder.forward_train(x)?.0)
    }

    /// `d x T` codewords to an `F x T` non-negative reconstruction.
    pub fn decode(&self, zq: &Array2<S>) -> Result<Array2<S>> {
        if zq.nrows() != self.config.code_dim {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects {} rows, got {}",
                self.config.code_dim,
                zq.nrows()
            )));
        }
        Ok(self.net.decoder.forward_train(zq)?.0)
    }

    pub fn quantize(&self, z: &Array2<S>) -> Result<(Vec<Quantized>, Array2<S>)> {
        let quantized = self.codebook.quantize_frames(z, self.config.quant_metric)?;
        let indices: Vec<usize> = quantized.iter().map(|q| q.index).collect();
        Ok((quantized, self.codebook.gather(&indices)))
    }

    pub fn forward(&self, x: &Array2<S>) -> Result<ForwardOutput<S>> {
        let z = self.encode(x)?;
        let (quantized, zq) = self.quantize(&z)?;
        let x_hat = self.decode(&crate::vq::straight_through(&z, &zq)?)?;
        Ok(ForwardOutput { z, quantized, zq, x_hat })
    }

    /// Scalar parameter count of encoder and decoder, plus the codebook vectors if asked.
    pub fn count_params(&self, include_codebook: bool) -> usize {
        let net = self.net.num_params();
        if include_codebook {
            net + self.codebook.vectors.len()
        } else {
            net
        }
    }
}
