//! Frame-level quality: a VQ-VAE trained with L2 reconstruction loss, whose
//! per-frame reconstruction quality tracks the true frame SNR of noisy input.

use vqlab::corpus::{noisy_pair, synth_clean_clip, NoiseKind, SynthConfig};
use vqlab::dsp::{features, StftConfig};
use vqlab::eval::{eval_frame_quality_pairs, CleanNoisyPair};
use vqlab::model::{ModelConfig, ReconLoss};
use vqlab::nn::NormMode;
use vqlab::train::{train_vqvae, TrainConfig};
use vqlab::vq::QuantMetric;

fn main() -> vqlab::Result<()> {
    let stft = StftConfig::default();
    let syn = SynthConfig::default();
    let corpus = (0..60)
        .map(|i| Ok(features(&synth_clean_clip(1, i, &syn), &stft)?.values))
        .collect::<vqlab::Result<Vec<_>>>()?;
    let cfg = ModelConfig {
        codebook_size: 128,
        code_dim: 32,
        use_transformer: false,
        in_mode: NormMode::MeanOnly,
        quant_metric: QuantMetric::L2,
        recon_loss: ReconLoss::L2,
        beta: 1.0,
        ..ModelConfig::se()
    };
    let tcfg = TrainConfig {
        max_steps: 120,
        batch_size: 4,
        crop_frames: 64,
        ..Default::default()
    };
    let (model, _) = train_vqvae(&corpus, &[], &cfg, &tcfg)?;

    let pairs = (0..10)
        .map(|i| {
            let p = noisy_pair(&synth_clean_clip(5, i, &syn), NoiseKind::White, 0.0, i)?;
            Ok(CleanNoisyPair {
                id: format!("clip{i}"),
                snr_db: Some(0.0),
                clean: p.clean,
                noisy: p.noisy,
            })
        })
        .collect::<vqlab::Result<Vec<_>>>()?;
    let report = eval_frame_quality_pairs(&model, &pairs, &stft)?;
    for c in &report.clips {
        println!("{}: LCC(frame quality, frame SNR) {:.3}", c.id, c.lcc.r);
    }
    println!("mean per-clip LCC {:.3} ({} excluded)", report.mean_lcc, report.excluded);
    Ok(())
}
