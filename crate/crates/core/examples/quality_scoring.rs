//! Trains a small quality-estimation model on clean speech and shows VQScore
//! rising with SNR.

use vqlab::corpus::{noisy_pair, synth_clean_clip, NoiseKind, SynthConfig};
use vqlab::dsp::{features, StftConfig};
use vqlab::eval::{eval_qe_items, QeItem, CLEAN_SNR_DB};
use vqlab::model::ModelConfig;
use vqlab::train::{train_qe, TrainConfig};

fn main() -> vqlab::Result<()> {
    let stft = StftConfig::default();
    let syn = SynthConfig::default();
    let corpus = (0..60)
        .map(|i| Ok(features(&synth_clean_clip(1, i, &syn), &stft)?.values))
        .collect::<vqlab::Result<Vec<_>>>()?;
    let cfg = ModelConfig {
        codebook_size: 64,
        code_dim: 16,
        ..ModelConfig::qe()
    };
    let tcfg = TrainConfig {
        max_steps: 150,
        lr: 3e-4,
        batch_size: 4,
        crop_frames: 64,
        ..Default::default()
    };
    let (model, log) = train_qe(&corpus, &[], &cfg, &tcfg)?;
    let last = log.rows.last().unwrap();
    println!("trained {} steps, final recon {:.4}, perplexity {:.1}", log.rows.len(), last.recon, last.perplexity);

    let mut items = Vec::new();
    for i in 0..12 {
        let clean = synth_clean_clip(2, i, &syn);
        items.push(QeItem {
            id: format!("clean{i}"),
            snr_db: CLEAN_SNR_DB,
            features: features(&clean, &stft)?.values,
        });
        for snr in [-5.0, 0.0, 5.0, 10.0, 20.0] {
            let noisy = noisy_pair(&clean, NoiseKind::White, snr, i)?.noisy;
            items.push(QeItem {
                id: format!("{i}@{snr}"),
                snr_db: snr,
                features: features(&noisy, &stft)?.values,
            });
        }
    }
    let report = eval_qe_items(&model, &items)?;
    for b in &report.buckets {
        println!("SNR {:>5.1} dB  mean VQScore {:.4}", b.snr_db, b.mean_cos_z);
    }
    let l = &report.lcc;
    println!(
        "LCC with SNR: cos_z {:.3}  cos_x {:.3}  l2_z {:.3}  l2_x {:.3}",
        l.cos_z.r, l.cos_x.r, l.l2_z.r, l.l2_x.r
    );
    Ok(())
}
