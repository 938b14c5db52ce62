//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to stderr.
//!
//! Tests hold a shared lock so wall-clock budgets are measured without
//! interference, and the trained models are built once and reused.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::Rng;
use vqlab::adversarial::{
    attack, default_eps, run_step2, AttackConfig, DistillConfig, DistillLog, DistillState, Perturbation,
};
use vqlab::corpus::{noisy_pair, synth_clean_clip, NoiseKind, SynthConfig};
use vqlab::dsp::{features, istft, magnitude, stft, AudioClip, StftConfig};
use vqlab::enhance::IdentityReconstructor;
use vqlab::eval::{
    eval_frame_quality_pairs, eval_qe_items, eval_se_pairs, pearson_lcc, welch_ttest, CleanNoisyPair, QeItem,
    QeReport, SeEvalConfig, CLEAN_SNR_DB,
};
use vqlab::gradsuite::gradient_suite;
use vqlab::model::{ModelConfig, ReconLoss, VqVaeModel};
use vqlab::nn::{AdamConfig, NormMode};
use vqlab::rng::rng_for;
use vqlab::scoring::score_spectrogram;
use vqlab::train::checkpoint::{decode_checkpoint, encode_checkpoint};
use vqlab::train::{train_qe, train_vqvae, TrainConfig};
use vqlab::vq::{quantize_cos, quantize_l2, Codebook, QuantMetric};
use vqlab::Error;

const SNRS: [f64; 5] = [-5.0, 0.0, 5.0, 10.0, 20.0];

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance {id:02}] {verdict} {name}: {detail}");
}

fn stft_cfg() -> StftConfig {
    StftConfig::default()
}

fn spec(clip: &AudioClip) -> Array2<f32> {
    features(clip, &stft_cfg()).unwrap().values
}

fn training_corpus() -> &'static Vec<Array2<f32>> {
    static CORPUS: OnceLock<Vec<Array2<f32>>> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let syn = SynthConfig::default();
        (0..200).map(|i| spec(&synth_clean_clip(1, i, &syn))).collect()
    })
}

// ---------------------------------------------------------------- QE fixture

struct QeFixture {
    model: VqVaeModel<f32>,
    report: QeReport,
    /// (clean features, 0 dB features) per held-out clip.
    pairs_0db: Vec<(Array2<f32>, Array2<f32>)>,
    babble_lcc: f64,
    train_time: Duration,
}

fn qe_fixture() -> &'static QeFixture {
    static FIX: OnceLock<QeFixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let corpus = training_corpus();
        let cfg = ModelConfig {
            codebook_size: 256,
            code_dim: 32,
            ..ModelConfig::qe()
        };
        let tcfg = TrainConfig {
            max_steps: 800,
            lr: 3e-4,
            batch_size: 8,
            crop_frames: 64,
            ..Default::default()
        };
        let t0 = Instant::now();
        let (model, _) = train_qe(corpus, &[], &cfg, &tcfg).unwrap();
        let train_time = t0.elapsed();

        let syn = SynthConfig::default();
        let mut items = Vec::new();
        let mut babble = Vec::new();
        let mut pairs_0db = Vec::new();
        for i in 0..60u64 {
            let clean = synth_clean_clip(2, i, &syn);
            let x_clean = spec(&clean);
            items.push(QeItem {
                id: format!("clean_{i}"),
                snr_db: CLEAN_SNR_DB,
                features: x_clean.clone(),
            });
            let kind = if i % 2 == 0 { NoiseKind::White } else { NoiseKind::Pink };
            for (k, &snr) in SNRS.iter().enumerate() {
                let seed = i * 10 + k as u64;
                let noisy = spec(&noisy_pair(&clean, kind, snr, seed).unwrap().noisy);
                if snr == 0.0 {
                    pairs_0db.push((x_clean.clone(), noisy.clone()));
                }
                items.push(QeItem {
                    id: format!("{i}_{}_{snr}", kind.name()),
                    snr_db: snr,
                    features: noisy,
                });
                if i < 20 {
                    let b = spec(&noisy_pair(&clean, NoiseKind::Babble, snr, seed).unwrap().noisy);
                    babble.push((snr, score_spectrogram("b", &b, &model).unwrap().vqscore_cos_z));
                }
            }
        }
        let report = eval_qe_items(&model, &items).unwrap();
        let (snr, score): (Vec<f64>, Vec<f64>) = babble.into_iter().unzip();
        let babble_lcc = pearson_lcc(&score, &snr).unwrap().r;
        QeFixture {
            model,
            report,
            pairs_0db,
            babble_lcc,
            train_time,
        }
    })
}

// ---------------------------------------------------------------- SE fixture

struct SeFixture {
    teacher_bytes_before: Vec<u8>,
    teacher_bytes_after: Vec<u8>,
    teacher_codebook: Codebook<f32>,
    student: VqVaeModel<f32>,
    adversarial: DistillLog,
    gaussian: DistillLog,
    step2_time: Duration,
    eps: f32,
    budget_ok: bool,
    budget_checked: usize,
}

fn se_fixture() -> &'static SeFixture {
    static FIX: OnceLock<SeFixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let corpus = training_corpus();
        let cfg = ModelConfig {
            codebook_size: 512,
            code_dim: 64,
            ..ModelConfig::se()
        };
        let tcfg = TrainConfig {
            max_steps: 300,
            lr: 1e-4,
            batch_size: 8,
            crop_frames: 64,
            ..Default::default()
        };
        let (teacher, _) = train_vqvae(corpus, &[], &cfg, &tcfg).unwrap();
        let teacher_bytes_before = encode_checkpoint(&teacher).unwrap();

        let syn = SynthConfig::default();
        let probe: Vec<(Array2<f32>, Array2<f32>)> = (0..20u64)
            .map(|i| {
                let clean = synth_clean_clip(4, i, &syn);
                let kind = if i % 2 == 0 { NoiseKind::White } else { NoiseKind::Pink };
                (spec(&clean), spec(&noisy_pair(&clean, kind, 5.0, i).unwrap().noisy))
            })
            .collect();
        let eps = default_eps(corpus).unwrap();
        let attack_cfg = AttackConfig::new(eps);
        let dcfg = DistillConfig {
            max_steps: 100,
            lr: 1e-5,
            probe_every: 25,
            ..Default::default()
        };

        let t0 = Instant::now();
        let mut state = DistillState::new(teacher.clone(), 1.0, AdamConfig::default()).unwrap();
        let adversarial = run_step2(&mut state, corpus, &probe, &attack_cfg, &dcfg).unwrap();
        let step2_time = t0.elapsed();

        // budget check on fresh attacks against the distilled student
        let mut budget_ok = true;
        let mut budget_checked = 0;
        for (clean, _) in &probe {
            let targets = state.teacher_tokens(clean).unwrap();
            let out = attack(&state, clean, &targets, &attack_cfg).unwrap();
            budget_ok &= out.delta.iter().all(|d| d.abs() <= eps);
            budget_checked += out.delta.len();
        }

        let mut control = DistillState::new(teacher, 1.0, AdamConfig::default()).unwrap();
        let gcfg = DistillConfig {
            perturbation: Perturbation::Gaussian { sigma: eps },
            ..dcfg
        };
        let gaussian = run_step2(&mut control, corpus, &probe, &attack_cfg, &gcfg).unwrap();

        SeFixture {
            teacher_bytes_before,
            teacher_bytes_after: encode_checkpoint(&state.teacher).unwrap(),
            teacher_codebook: state.teacher.codebook.clone(),
            student: state.student,
            adversarial,
            gaussian,
            step2_time,
            eps,
            budget_ok,
            budget_checked,
        }
    })
}

// ---------------------------------------------------------------- criteria

#[test]
fn c01_gradient_suite() {
    let _g = serial();
    let t0 = Instant::now();
    let checks = gradient_suite(20).unwrap();
    let elapsed = t0.elapsed();
    let worst: Vec<String> = checks
        .iter()
        .map(|c| format!("{} {:.1e}/{:.0e}", c.op, c.max_rel_err, c.tolerance))
        .collect();
    let pass = checks.iter().all(|c| c.passed()) && elapsed < Duration::from_secs(120);
    report(1, "gradient suite", pass, &format!("{} in {:.1?}", worst.join(", "), elapsed));
    assert!(pass);
}

fn l2_oracle(z: &Array1<f64>, cb: &Array2<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (v, c) in cb.rows().into_iter().enumerate() {
        let d: f64 = c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (v, d);
        }
    }
    best.0
}

fn cos_oracle(z: &Array1<f64>, cb: &Array2<f64>) -> usize {
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let zu = unit(z.to_vec());
    let mut best = (0, f64::INFINITY);
    for (v, c) in cb.rows().into_iter().enumerate() {
        let cu = unit(c.to_vec());
        let d: f64 = cu.iter().zip(&zu).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (v, d);
        }
    }
    best.0
}

#[test]
fn c02_vq_oracles() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = rng_for(2024, 0);
    let (mut l2_cases, mut cos_cases, mut ties, mut mismatches) = (0, 0, 0, 0);
    for case in 0..1200 {
        let v = rng.random_range(2..40);
        let d = rng.random_range(1..10);
        let mut cb = Array2::from_shape_simple_fn((v, d), || rng.random_range(-1.0..1.0));
        let mut z = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
        let engineered = case % 4 == 0;
        if engineered {
            // duplicate an earlier code later in the book (an exact tie), and query on it
            let (lo, hi) = (rng.random_range(0..v - 1), v - 1);
            let lo_row = cb.row(lo).to_owned();
            cb.row_mut(hi).assign(&lo_row);
            z = lo_row.mapv(|x| x + 1e-3);
            ties += 1;
        }
        let book = Codebook::from_vectors(cb.clone()).unwrap();
        let (idx, _) = quantize_l2(z.view(), &book);
        mismatches += usize::from(idx != l2_oracle(&z, &cb));
        l2_cases += 1;

        let mut cb_cos = cb.clone();
        if engineered {
            // a power-of-two rescaled copy has exactly the same direction
            let src = rng.random_range(0..v - 1);
            let scaled = cb_cos.row(src).mapv(|x| x * 4.0);
            cb_cos.row_mut(v - 1).assign(&scaled);
            z = cb_cos.row(src).mapv(|x| x * 0.5);
        }
        let book = Codebook::from_vectors(cb_cos.clone()).unwrap();
        let (q, _) = quantize_cos(z.view(), &book);
        mismatches += usize::from(q.index != cos_oracle(&z, &cb_cos));
        cos_cases += 1;
    }
    // symmetric codes around a query at the origin: every code is equidistant
    for d in 1..6 {
        let mut cb = Array2::<f64>::zeros((2 * d, d));
        for k in 0..d {
            cb[[2 * k, k]] = 1.0;
            cb[[2 * k + 1, k]] = -1.0;
        }
        let z = Array1::<f64>::zeros(d);
        let book = Codebook::from_vectors(cb.clone()).unwrap();
        let (idx, _) = quantize_l2(z.view(), &book);
        mismatches += usize::from(idx != 0 || l2_oracle(&z, &cb) != 0);
        let (q, _) = quantize_cos(z.view(), &book);
        mismatches += usize::from(q.index != 0 || !q.degenerate);
        ties += 1;
    }
    let elapsed = t0.elapsed();
    let pass = mismatches == 0 && l2_cases >= 1000 && cos_cases >= 1000 && elapsed < Duration::from_secs(30);
    report(
        2,
        "vq oracle equivalence",
        pass,
        &format!("{l2_cases} l2 + {cos_cases} cos cases ({ties} engineered ties), {mismatches} mismatches, {elapsed:.1?}"),
    );
    assert!(pass);
}

fn naive_dft_magnitude(frame: &[f32], window: &[f64], n: usize) -> Vec<f64> {
    (0..n / 2 + 1)
        .map(|k| {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (i, (&x, &w)) in frame.iter().zip(window).enumerate() {
                let phase = -2.0 * std::f64::consts::PI * (k * i % n) as f64 / n as f64;
                re += x as f64 * w * phase.cos();
                im += x as f64 * w * phase.sin();
            }
            re.hypot(im)
        })
        .collect()
}

#[test]
fn c03_dsp_round_trip() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = stft_cfg();
    let mut rng = rng_for(33, 0);
    let mut worst_rt = 0.0f64;
    for _ in 0..50 {
        let len = rng.random_range(2000..20000);
        let samples: Vec<f32> = (0..len).map(|_| rng.random_range(-0.9..0.9)).collect();
        let clip = AudioClip::new(samples, 16000).unwrap();
        let spec = stft(&clip, &cfg).unwrap();
        let back = istft(&spec, &cfg, 16000).unwrap();
        let peak = clip.peak() as f64;
        for n in cfg.interior(spec.re.ncols()) {
            worst_rt = worst_rt.max((back.samples[n] as f64 - clip.samples[n] as f64).abs() / peak);
        }
    }
    let samples: Vec<f32> = (0..8000).map(|_| rng.random_range(-0.5..0.5)).collect();
    let clip = AudioClip::new(samples, 16000).unwrap();
    let mag = magnitude(&stft(&clip, &cfg).unwrap());
    let window = cfg.window();
    let mut worst_dft = 0.0f64;
    for t in [0, 5, 11, 17, 26] {
        let frame = &clip.samples[t * cfg.hop..t * cfg.hop + cfg.win_length];
        let oracle = naive_dft_magnitude(frame, &window, cfg.fft_size);
        let peak = oracle.iter().cloned().fold(0.0, f64::max);
        for (f, &o) in oracle.iter().enumerate() {
            worst_dft = worst_dft.max((mag.values[[f, t]] as f64 - o).abs() / peak);
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst_rt <= 1e-5 && worst_dft <= 1e-5 && elapsed < Duration::from_secs(60);
    report(
        3,
        "dsp round trip",
        pass,
        &format!("istft interior err {worst_rt:.2e}, naive DFT err {worst_dft:.2e}, {elapsed:.1?}"),
    );
    assert!(pass);
}

#[test]
fn c04_qe_monotonicity() {
    let _g = serial();
    let fx = qe_fixture();
    let buckets: Vec<String> = fx
        .report
        .buckets
        .iter()
        .map(|b| format!("{}:{:.4}", b.snr_db, b.mean_cos_z))
        .collect();
    let lcc = fx.report.lcc.cos_z.r;
    let pass = fx.report.strictly_increasing() && lcc >= 0.7 && fx.train_time < Duration::from_secs(600);
    report(
        4,
        "qe monotonicity",
        pass,
        &format!(
            "LCC(cos_z, SNR) {lcc:.3}; buckets [{}]; trained in {:.1?}; babble LCC {:.3} (informational)",
            buckets.join(" "),
            fx.train_time,
            fx.babble_lcc
        ),
    );
    assert!(pass);
}

#[test]
fn c05_variant_ordering() {
    let _g = serial();
    let l = &qe_fixture().report.lcc;
    let ordering = l.cos_z.r.abs() >= l.l2_x.r.abs();
    let sign = l.l2_z.r < 0.0;
    let detail = format!(
        "cos_z {:.3}, cos_x {:.3}, l2_z {:.3}, l2_x {:.3}; ordering {}",
        l.cos_z.r,
        l.cos_x.r,
        l.l2_z.r,
        l.l2_x.r,
        if ordering { "holds" } else { "WARN: violated" }
    );
    report(5, "variant ordering", sign, &detail);
    assert!(sign);
}

#[test]
fn c06_anomaly_premise() {
    let _g = serial();
    let fx = qe_fixture();
    let dist = |x: &Array2<f32>| 1.0 - score_spectrogram("x", x, &fx.model).unwrap().vqscore_cos_x;
    let wins = fx.pairs_0db.iter().filter(|(c, n)| dist(c) < dist(n)).count();
    let frac = wins as f64 / fx.pairs_0db.len() as f64;
    let pass = frac >= 0.9;
    report(
        6,
        "anomaly premise",
        pass,
        &format!("clean < 0 dB reconstruction distance on {wins}/{} clips ({frac:.2})", fx.pairs_0db.len()),
    );
    assert!(pass);
}

#[test]
fn c07_frame_quality() {
    let _g = serial();
    let cfg = ModelConfig {
        codebook_size: 256,
        code_dim: 32,
        use_transformer: false,
        in_mode: NormMode::MeanOnly,
        quant_metric: QuantMetric::L2,
        recon_loss: ReconLoss::L2,
        beta: 1.0,
        ..ModelConfig::se()
    };
    let tcfg = TrainConfig {
        max_steps: 300,
        batch_size: 8,
        crop_frames: 64,
        ..Default::default()
    };
    let (model, _) = train_vqvae(training_corpus(), &[], &cfg, &tcfg).unwrap();
    let syn = SynthConfig::default();
    let pairs: Vec<CleanNoisyPair> = (0..50u64)
        .map(|i| {
            let clean = synth_clean_clip(5, i, &syn);
            let p = noisy_pair(&clean, NoiseKind::White, 0.0, i).unwrap();
            CleanNoisyPair {
                id: i.to_string(),
                snr_db: Some(0.0),
                clean: p.clean,
                noisy: p.noisy,
            }
        })
        .collect();
    let r = eval_frame_quality_pairs(&model, &pairs, &stft_cfg()).unwrap();
    let pass = r.mean_lcc >= 0.5;
    report(
        7,
        "frame-level quality",
        pass,
        &format!("mean LCC {:.3} over {} clips ({} excluded)", r.mean_lcc, r.clips.len(), r.excluded),
    );
    assert!(pass);
}

#[test]
fn c08_adversarial_pipeline() {
    let _g = serial();
    let fx = se_fixture();
    let a = &fx.adversarial;
    let raise = a.attacks_raised as f64 / a.attacks as f64;
    let before = a.initial_code_acc.unwrap();
    let after = a.final_code_acc().unwrap();
    let control = fx.gaussian.final_code_acc().unwrap();
    let pass_a = raise >= 0.95;
    let pass_b = fx.budget_ok;
    let pass_c = after - before >= 0.02 && fx.step2_time <= Duration::from_secs(300);
    let beats_control = after > control;
    let pass = pass_a && pass_b && pass_c;
    report(
        8,
        "adversarial pipeline",
        pass,
        &format!(
            "(a) CE raised on {}/{} batches ({raise:.3}) {}; (b) |delta| <= eps={:.4} over {} elements {}; \
             (c) code accuracy {before:.4} -> {after:.4} ({:+.2} pts) in {:.1?} {}; Gaussian control {control:.4} ({})",
            a.attacks_raised,
            a.attacks,
            if pass_a { "ok" } else { "FAIL" },
            fx.eps,
            fx.budget_checked,
            if pass_b { "ok" } else { "FAIL" },
            100.0 * (after - before),
            fx.step2_time,
            if pass_c { "ok" } else { "FAIL" },
            if beats_control { "adversarial ahead" } else { "WARN: control ahead" }
        ),
    );
    assert!(pass);
}

#[test]
fn c09_se_improvement() {
    let _g = serial();
    let fx = se_fixture();
    let syn = SynthConfig::default();
    let pairs: Vec<CleanNoisyPair> = (0..50u64)
        .map(|i| {
            let clean = synth_clean_clip(3, i, &syn);
            let p = noisy_pair(&clean, NoiseKind::White, 0.0, 1000 + i).unwrap();
            CleanNoisyPair {
                id: i.to_string(),
                snr_db: Some(0.0),
                clean: p.clean,
                noisy: p.noisy,
            }
        })
        .collect();
    let se = eval_se_pairs(&fx.student, &pairs, &stft_cfg(), &SeEvalConfig::default()).unwrap();
    let id = eval_se_pairs(&IdentityReconstructor, &pairs, &stft_cfg(), &SeEvalConfig::default()).unwrap();
    let pass = se.median_improvement > 0.0 && se.fraction_improved >= 0.7 && id.median_improvement.abs() < 0.2;
    report(
        9,
        "se improvement",
        pass,
        &format!(
            "median segSNR gain {:.3} dB, {:.0}% of {} clips improved; identity median {:.4} dB",
            se.median_improvement,
            100.0 * se.fraction_improved,
            se.clips.len(),
            id.median_improvement
        ),
    );
    assert!(pass);
}

#[test]
fn c10_freezing() {
    let _g = serial();
    let fx = se_fixture();
    let teacher_same = fx.teacher_bytes_before == fx.teacher_bytes_after;
    let cb = &fx.student.codebook;
    let bits = |a: &[f32], b: &[f32]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    let t = &fx.teacher_codebook;
    let codebook_same = bits(cb.vectors.as_slice().unwrap(), t.vectors.as_slice().unwrap())
        && bits(cb.ema_counts.as_slice().unwrap(), t.ema_counts.as_slice().unwrap())
        && bits(cb.ema_sums.as_slice().unwrap(), t.ema_sums.as_slice().unwrap());
    let pass = teacher_same && codebook_same;
    report(
        10,
        "teacher and codebook freezing",
        pass,
        &format!("teacher bytes identical: {teacher_same}; student codebook bit-equal: {codebook_same}"),
    );
    assert!(pass);
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vqlab"))
        .args(args)
        .env_remove("VQLAB_SEED")
        .output()
        .unwrap()
}

fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = dir.join("toy.toml");
    std::fs::write(
        &cfg,
        "[qe_model]\ncodebook_size = 32\ncode_dim = 8\nc1 = 16\nc2 = 8\n[train]\nmax_steps = 15\ncrop_frames = 32\nbatch_size = 4\n",
    )
    .unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, ckpt, scores) = (dir.join("data"), dir.join("qe.ckpt"), dir.join("scores.jsonl"));
    let steps: [Vec<String>; 3] = [
        vec!["synth", "--n", "6", "--snrs=0,10", "--noise", "white", "--out", &s(&data)]
            .into_iter()
            .map(String::from)
            .collect(),
        vec!["train-qe", "--manifest", &s(&data.join("clean.jsonl")), "--out", &s(&ckpt)]
            .into_iter()
            .map(String::from)
            .collect(),
        vec!["score", "--model", &s(&ckpt), "--manifest", &s(&data.join("noisy.jsonl")), "--out", &s(&scores)]
            .into_iter()
            .map(String::from)
            .collect(),
    ];
    for step in &steps {
        let mut args: Vec<&str> = vec!["--config", cfg.to_str().unwrap(), "--seed", "7", "--jobs", "1"];
        args.extend(step.iter().map(String::as_str));
        let out = run_cli(&args);
        assert!(out.status.success(), "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "toy.toml" {
                files.push((p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn c11_persistence() {
    let _g = serial();
    let model = &qe_fixture().model;
    let bytes = encode_checkpoint(model).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    let round_trip = encode_checkpoint(&back).unwrap() == bytes && back.config == model.config;

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x40;
    let checksum = matches!(decode_checkpoint(&corrupt), Err(Error::ChecksumMismatch));

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path());
    let fb = pipeline(b.path());
    let reproducible = !fa.is_empty() && fa == fb;
    let pass = round_trip && checksum && reproducible;
    report(
        11,
        "persistence",
        pass,
        &format!(
            "bit-exact round trip {round_trip}; corrupted byte -> ChecksumMismatch {checksum}; \
             synth->train->score byte-identical across runs {reproducible} ({} files)",
            fa.len()
        ),
    );
    assert!(pass);
}

/// Regularized incomplete beta by continued fraction.
fn inc_beta(x: f64, a: f64, b: f64) -> f64 {
    fn ln_gamma(x: f64) -> f64 {
        // Lanczos, g = 7
        const C: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        if x < 0.5 {
            return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
        }
        let x = x - 1.0;
        let t = x + 7.5;
        let s: f64 = C[0] + (1..9).map(|i| C[i] / (x + i as f64)).sum::<f64>();
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
    }
    fn cf(x: f64, a: f64, b: f64) -> f64 {
        let tiny = 1e-300;
        let (mut c, mut d) = (1.0, 1.0 - (a + b) * x / (a + 1.0));
        if d.abs() < tiny {
            d = tiny;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..10_000 {
            let m = m as f64;
            for num in [
                m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m)),
                -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0)),
            ] {
                d = 1.0 + num * d;
                if d.abs() < tiny {
                    d = tiny;
                }
                c = 1.0 + num / c;
                if c.abs() < tiny {
                    c = tiny;
                }
                d = 1.0 / d;
                h *= d * c;
            }
            if (d * c - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * cf(x, a, b) / a
    } else {
        1.0 - front * cf(1.0 - x, b, a) / b
    }
}

#[test]
fn c12_statistics() {
    let _g = serial();
    let fixtures: [(&[f64], &[f64]); 3] = [
        (&[1.0, 2.0, 3.0], &[2.0, 2.0, 4.0]),
        (&[2.1, 3.4, 1.9, 5.6, 4.4, 3.0], &[1.0, 2.5, 2.0, 4.1, 3.9, 2.2]),
        (&[10.0, 12.5, 9.8, 11.1, 13.0], &[7.2, 8.1, 9.9, 6.5, 8.8, 7.7, 9.1]),
    ];
    let mut worst_r = 0.0f64;
    let mut worst_p = 0.0f64;
    for (a, b) in fixtures {
        if a.len() == b.len() {
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let sxy: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let sxx: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let syy: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            let oracle = sxy / (sxx * syy).sqrt();
            worst_r = worst_r.max((pearson_lcc(a, b).unwrap().r - oracle).abs());
        }
        let stats = |x: &[f64]| {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0), n)
        };
        let ((ma, va, na), (mb, vb, nb)) = (stats(a), stats(b));
        let (sa, sb) = (va / na, vb / nb);
        let t = (ma - mb) / (sa + sb).sqrt();
        let dof = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
        let p = inc_beta(dof / (dof + t * t), dof / 2.0, 0.5);
        let w = welch_ttest(a, b).unwrap();
        worst_p = worst_p.max((w.p - p).abs()).max((w.t - t).abs());
    }
    let pass = worst_r <= 1e-12 && worst_p <= 1e-9;
    report(
        12,
        "statistics",
        pass,
        &format!("max |r - oracle| {worst_r:.1e}; max |t, p - oracle| {worst_p:.1e}"),
    );
    assert!(pass);
}
