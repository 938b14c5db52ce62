//! Adversarial self-distillation: a student copy of the teacher is trained to
//! keep the teacher's tokens under small worst-case input perturbations.

use vqlab::adversarial::{default_eps, run_step2, AttackConfig, DistillConfig, DistillState, Perturbation};
use vqlab::corpus::{noisy_pair, synth_clean_clip, NoiseKind, SynthConfig};
use vqlab::dsp::{features, StftConfig};
use vqlab::model::ModelConfig;
use vqlab::nn::AdamConfig;
use vqlab::train::{train_vqvae, TrainConfig};

fn main() -> vqlab::Result<()> {
    let stft = StftConfig::default();
    let syn = SynthConfig::default();
    let corpus = (0..40)
        .map(|i| Ok(features(&synth_clean_clip(1, i, &syn), &stft)?.values))
        .collect::<vqlab::Result<Vec<_>>>()?;
    let cfg = ModelConfig {
        codebook_size: 64,
        code_dim: 16,
        ..ModelConfig::se()
    };
    let tcfg = TrainConfig {
        max_steps: 60,
        lr: 1e-4,
        batch_size: 4,
        crop_frames: 64,
        ..Default::default()
    };
    let (teacher, _) = train_vqvae(&corpus, &[], &cfg, &tcfg)?;

    let probe = (0..6)
        .map(|i| {
            let clean = synth_clean_clip(4, i, &syn);
            let noisy = noisy_pair(&clean, NoiseKind::Pink, 5.0, i)?.noisy;
            Ok((features(&clean, &stft)?.values, features(&noisy, &stft)?.values))
        })
        .collect::<vqlab::Result<Vec<_>>>()?;
    let eps = default_eps(&corpus)?;
    println!("attack budget eps = {eps:.4}");

    for perturbation in [Perturbation::Adversarial, Perturbation::Gaussian { sigma: eps }] {
        let mut state = DistillState::new(teacher.clone(), 1.0, AdamConfig::default())?;
        let dcfg = DistillConfig {
            max_steps: 20,
            lr: 1e-5,
            probe_every: 10,
            perturbation,
            ..Default::default()
        };
        let log = run_step2(&mut state, &corpus, &probe, &AttackConfig::new(eps), &dcfg)?;
        if log.attacks > 0 {
            println!("attacks raised the token CE on {}/{} batches", log.attacks_raised, log.attacks);
        }
        println!(
            "{perturbation:?}: code accuracy {:.3} -> {:.3}",
            log.initial_code_acc.unwrap_or(f64::NAN),
            log.final_code_acc().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
