//! Trains a small enhancement VQ-VAE and measures segmental SNR before and after.

use vqlab::corpus::{noisy_pair, synth_clean_clip, NoiseKind, SynthConfig};
use vqlab::dsp::{features, StftConfig};
use vqlab::enhance::{enhance_clip, segmental_snr};
use vqlab::model::ModelConfig;
use vqlab::train::{train_vqvae, TrainConfig};

fn main() -> vqlab::Result<()> {
    let stft = StftConfig::default();
    let syn = SynthConfig::default();
    let corpus = (0..60)
        .map(|i| Ok(features(&synth_clean_clip(1, i, &syn), &stft)?.values))
        .collect::<vqlab::Result<Vec<_>>>()?;
    let cfg = ModelConfig {
        codebook_size: 128,
        code_dim: 32,
        ..ModelConfig::se()
    };
    let tcfg = TrainConfig {
        max_steps: 100,
        lr: 1e-4,
        batch_size: 4,
        crop_frames: 64,
        ..Default::default()
    };
    let (model, _) = train_vqvae(&corpus, &[], &cfg, &tcfg)?;

    for i in 0..5 {
        let clean = synth_clean_clip(3, i, &syn);
        let pair = noisy_pair(&clean, NoiseKind::White, 0.0, i)?;
        let enhanced = enhance_clip(&pair.noisy, &model, &stft, 1.0)?;
        // the enhanced clip covers the fully overlapped STFT interior only
        let frames = stft.num_frames(pair.noisy.samples.len()).unwrap_or(0);
        let range = stft.interior(frames);
        let clean = &pair.clean.samples[range.clone()];
        let before = segmental_snr(clean, &pair.noisy.samples[range], 512)?;
        let after = segmental_snr(clean, &enhanced.samples, 512)?;
        println!("clip {i}: segSNR {before:6.2} dB -> {after:6.2} dB ({:+.2})", after - before);
    }
    Ok(())
}
