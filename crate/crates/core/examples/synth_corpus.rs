//! Writes a small synthetic corpus plus white/pink mixtures and checks the mixing SNR.

use vqlab::corpus::{make_noisy_set, noisy_pair, synth_clean, synth_clean_clip, NoiseKind, SynthConfig};

fn main() -> vqlab::Result<()> {
    let cfg = SynthConfig::default();
    let dir = std::env::temp_dir().join("vqlab_synth_example");
    let clean = synth_clean(4, 7, &cfg, &dir)?;
    println!("wrote {} clean clips under {}", clean.len(), dir.display());
    let noisy = make_noisy_set(&clean, &[0.0, 10.0], &[NoiseKind::White, NoiseKind::Pink], 7, dir.join("noisy"))?;
    println!("wrote {} noisy mixtures", noisy.len());

    let clip = synth_clean_clip(7, 0, &cfg);
    for kind in [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble] {
        for snr in [-5.0, 0.0, 10.0] {
            let pair = noisy_pair(&clip, kind, snr, 1)?;
            let s: f64 = pair.clean.samples.iter().map(|x| (*x as f64).powi(2)).sum();
            let n: f64 = pair
                .noisy
                .samples
                .iter()
                .zip(&pair.clean.samples)
                .map(|(y, x)| ((y - x) as f64).powi(2))
                .sum();
            println!("{:>6} target {snr:>5.1} dB measured {:>7.3} dB", kind.name(), 10.0 * (s / n).log10());
        }
    }
    Ok(())
}
