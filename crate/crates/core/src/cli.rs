//! The `vqlab` command line.
//!
//! [`run`] parses arguments and returns the process exit code, so the whole
//! pipeline can be driven in-process from tests.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{default_eps, run_step2, AttackConfig, DistillConfig, DistillState, Perturbation};
use crate::corpus::{make_noisy_set, synth_clean, Manifest, NoiseKind, SynthConfig};
use crate::dsp::{features, read_wav, write_wav, StftConfig};
use crate::enhance::enhance_clip;
use crate::error::{Error, Result};
use crate::eval::{eval_frame_quality, eval_qe, eval_se, load_pairs, with_clean_references, SeEvalConfig};
use crate::gradsuite::gradient_suite;
use crate::model::{ModelConfig, VqVaeModel};
use crate::nn::AdamConfig;
use crate::scoring::{score_spectrogram, ScoreReport};
use crate::train::{inspect_checkpoint, load_checkpoint, save_checkpoint, train_qe, train_vqvae, LabeledSpectrogram, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable that overrides `--seed`.
pub const SEED_ENV: &str = "VQLAB_SEED";

/// Attack settings as written in a config file; `eps` defaults to a corpus-derived budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f32>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            steps: 3,
            eps: None,
            step_size: None,
        }
    }
}

/// One document holding every module's configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub stft: StftConfig,
    pub synth: SynthConfig,
    pub qe_model: ModelConfig,
    /// Missing fields come from the SE preset rather than the QE one.
    #[serde(deserialize_with = "se_overlay")]
    pub se_model: ModelConfig,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub distill: DistillConfig,
    pub se_eval: SeEvalConfig,
}

fn se_overlay<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<ModelConfig, D::Error> {
    use serde::de::Error as _;
    let patch = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(ModelConfig::se()).map_err(D::Error::custom)?;
    if let (Some(base), serde_json::Value::Object(patch)) = (base.as_object_mut(), patch) {
        base.extend(patch);
    }
    serde_json::from_value(base).map_err(D::Error::custom)
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            stft: StftConfig::default(),
            synth: SynthConfig::default(),
            qe_model: ModelConfig::qe(),
            se_model: ModelConfig::se(),
            train: TrainConfig::default(),
            attack: AttackSection::default(),
            distill: DistillConfig::default(),
            se_eval: SeEvalConfig::default(),
        }
    }
}

impl Config {
    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.distill.seed = seed;
        self
    }
}

#[derive(Debug, Parser)]
#[command(name = "vqlab", version, about = "Speech quality scoring and enhancement with a VQ-VAE")]
pub struct Cli {
    /// Config file (TOML, or JSON by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; the VQLAB_SEED environment variable takes precedence.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Primary output: a directory for synth and eval-*, a file otherwise.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic clean corpus, optionally with noisy mixtures.
    Synth(SynthArgs),
    /// Train the quality-estimation model on clean speech.
    TrainQe(TrainArgs),
    /// Train the enhancement teacher on clean speech.
    TrainSe(TrainArgs),
    /// Adversarial self-distillation of a student from a teacher.
    Distill(DistillArgs),
    /// Score wav files or a manifest.
    Score(ModelInput),
    /// Enhance a noisy wav or every noisy row of a manifest.
    Enhance(EnhanceArgs),
    /// Correlate VQScore variants with mixing SNR.
    EvalQe(EvalQeArgs),
    /// Segmental SNR improvement of an enhancement model.
    EvalSe(EvalArgs),
    /// Frame-level quality versus frame SNR.
    EvalFrame(EvalArgs),
    /// Finite-difference gradient checks for every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's header, config and tensor directory.
    InspectCkpt(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of clean clips.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Mixing SNRs in dB; no noisy set is written when empty.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snrs: Vec<f64>,
    /// Noise kinds for the noisy set.
    #[arg(long, value_delimiter = ',', default_value = "white,pink,babble")]
    pub noise: Vec<NoiseKind>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest whose clean files form the training corpus.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Noisy manifest with SNR labels for validation and early stopping.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Manifest whose clean files are attacked and distilled on.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Noisy manifest used as the code-accuracy probe.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long)]
    pub attack_steps: Option<usize>,
    #[arg(long)]
    pub eps: Option<f32>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Replace the attack with clipped Gaussian noise of this standard deviation.
    #[arg(long)]
    pub gaussian: Option<f32>,
}

#[derive(Debug, Args)]
pub struct ModelInput {
    #[arg(long)]
    pub model: PathBuf,
    /// Wav files to score.
    #[arg(long, num_args = 1..)]
    pub wav: Vec<PathBuf>,
    /// Manifest to score (noisy file when present, else clean).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Dry/wet mix; overrides the config.
    #[arg(long)]
    pub alpha: Option<f32>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalQeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also score each referenced clean file at +40 dB.
    #[arg(long)]
    pub add_clean: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::InvalidConfig(_) | Error::InvalidAttack(_) | Error::InvalidAlpha(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Config from file and flags, with the seed precedence applied.
pub fn effective_config(path: Option<&Path>, seed_flag: Option<u64>) -> Result<Config> {
    let base = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v} is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    let seed = env_seed.or(seed_flag).unwrap_or(base.seed);
    Ok(base.with_seed(seed))
}

fn execute(cli: Cli) -> Result<i32> {
    let cfg = effective_config(cli.config.as_deref(), cli.seed)?;
    if cli.jobs == 0 {
        return Err(Error::InvalidConfig("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| dispatch(&cli.command, cli.out.as_deref(), cfg))
}

fn require_out(out: Option<&Path>) -> Result<&Path> {
    out.ok_or_else(|| Error::InvalidConfig("--out is required for this command".into()))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Where the effective config goes: `config.toml` inside a directory output,
/// `<file>.config.toml` beside a file output.
pub fn config_dump_path(out: &Path, out_is_dir: bool) -> PathBuf {
    if out_is_dir {
        out.join("config.toml")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".config.toml");
        out.with_file_name(name)
    }
}

fn dump_config(cfg: &Config, out: &Path, out_is_dir: bool) -> Result<()> {
    write_text(&config_dump_path(out, out_is_dir), &cfg.to_toml()?)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn clean_corpus(manifest: &Manifest, stft: &StftConfig) -> Result<Vec<Array2<f32>>> {
    manifest
        .rows
        .par_iter()
        .map(|row| Ok(features(&manifest.load_clean(row)?, stft)?.values))
        .collect()
}

fn labeled(manifest: &Manifest, stft: &StftConfig) -> Result<Vec<LabeledSpectrogram>> {
    manifest
        .rows
        .par_iter()
        .map(|row| {
            let clip = match manifest.load_noisy(row)? {
                Some(n) => n,
                None => manifest.load_clean(row)?,
            };
            Ok(LabeledSpectrogram {
                features: features(&clip, stft)?.values,
                snr_db: row.snr_db.unwrap_or(crate::eval::CLEAN_SNR_DB),
            })
        })
        .collect()
}

fn load_model(path: &Path) -> Result<VqVaeModel<f32>> {
    load_checkpoint(path)
}

fn dispatch(cmd: &Command, out: Option<&Path>, mut cfg: Config) -> Result<i32> {
    match cmd {
        Command::Synth(a) => {
            let out = require_out(out)?;
            mkdir(out)?;
            let clean = synth_clean(a.n, cfg.seed, &cfg.synth, out)?;
            clean.write(out.join("clean.jsonl"))?;
            if !a.snrs.is_empty() {
                let noisy = make_noisy_set(&clean, &a.snrs, &a.noise, crate::rng::derive_seed(cfg.seed, 1), out)?;
                noisy.write(out.join("noisy.jsonl"))?;
            }
            dump_config(&cfg, out, true)?;
            say!("wrote {} clean clips to {}", clean.len(), out.display());
        }
        Command::TrainQe(a) | Command::TrainSe(a) => {
            let out = require_out(out)?;
            if let Some(s) = a.steps {
                cfg.train.max_steps = s;
            }
            let manifest = Manifest::read(&a.manifest)?;
            let corpus = clean_corpus(&manifest, &cfg.stft)?;
            let val = match &a.val {
                Some(p) => labeled(&Manifest::read(p)?, &cfg.stft)?,
                None => Vec::new(),
            };
            let (model, log) = if matches!(cmd, Command::TrainQe(_)) {
                train_qe(&corpus, &val, &cfg.qe_model, &cfg.train)?
            } else {
                train_vqvae(&corpus, &val, &cfg.se_model, &cfg.train)?
            };
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                mkdir(parent)?;
            }
            save_checkpoint(&model, out)?;
            log.write_jsonl(sibling(out, ".train.jsonl"))?;
            dump_config(&cfg, out, false)?;
            let last = log.rows.last();
            say!(
                "trained {} steps; final recon {:.4}, perplexity {:.1}",
                log.rows.len(),
                last.map_or(f64::NAN, |r| r.recon),
                last.map_or(f64::NAN, |r| r.perplexity)
            );
        }
        Command::Distill(a) => {
            let out = require_out(out)?;
            if let Some(s) = a.steps {
                cfg.distill.max_steps = s;
            }
            if let Some(s) = a.attack_steps {
                cfg.attack.steps = s;
            }
            if a.eps.is_some() {
                cfg.attack.eps = a.eps;
            }
            if let Some(sigma) = a.gaussian {
                cfg.distill.perturbation = Perturbation::Gaussian { sigma };
            }
            let teacher = load_model(&a.teacher)?;
            let corpus = clean_corpus(&Manifest::read(&a.manifest)?, &cfg.stft)?;
            let eps = match cfg.attack.eps {
                Some(e) => e,
                None => default_eps(&corpus)?,
            };
            cfg.attack.eps = Some(eps);
            let attack = AttackConfig {
                steps: cfg.attack.steps,
                eps,
                step_size: cfg.attack.step_size,
            };
            let probe = match &a.probe {
                Some(p) => load_pairs(&Manifest::read(p)?)?
                    .par_iter()
                    .map(|p| Ok((features(&p.clean, &cfg.stft)?.values, features(&p.noisy, &cfg.stft)?.values)))
                    .collect::<Result<Vec<_>>>()?,
                None => Vec::new(),
            };
            let mut state = DistillState::new(teacher, cfg.distill.lambda_dec, AdamConfig::default())?;
            let log = run_step2(&mut state, &corpus, &probe, &attack, &cfg.distill)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                mkdir(parent)?;
            }
            save_checkpoint(&state.student, out)?;
            log.write_jsonl(sibling(out, ".distill.jsonl"))?;
            dump_config(&cfg, out, false)?;
            say!(
                "distilled {} steps; attacks raising CE {}/{}; code accuracy {:?} -> {:?}",
                log.rows.len(),
                log.attacks_raised,
                log.attacks,
                log.initial_code_acc,
                log.final_code_acc()
            );
        }
        Command::Score(a) => {
            let model = load_model(&a.model)?;
            let mut reports: Vec<ScoreReport> = a
                .wav
                .par_iter()
                .map(|p| crate::scoring::score_wav(p, &model, &cfg.stft))
                .collect::<Result<_>>()?;
            if let Some(m) = &a.manifest {
                let manifest = Manifest::read(m)?;
                let more = manifest
                    .rows
                    .par_iter()
                    .map(|row| {
                        let clip = match manifest.load_noisy(row)? {
                            Some(n) => n,
                            None => manifest.load_clean(row)?,
                        };
                        score_spectrogram(&row.id, &features(&clip, &cfg.stft)?.values, &model)
                    })
                    .collect::<Result<Vec<_>>>()?;
                reports.extend(more);
            }
            if reports.is_empty() {
                return Err(Error::InvalidConfig("score needs --wav or --manifest".into()));
            }
            let text = to_jsonl(&reports)?;
            match out {
                Some(out) => {
                    write_text(out, &text)?;
                    dump_config(&cfg, out, false)?;
                }
                None => std::io::stdout()
                    .write_all(text.as_bytes())
                    .map_err(|e| Error::io("<stdout>", e))?,
            }
        }
        Command::Enhance(a) => {
            let out = require_out(out)?;
            if let Some(alpha) = a.alpha {
                cfg.se_eval.alpha = alpha;
            }
            let model = load_model(&a.model)?;
            match (&a.input, &a.manifest) {
                (Some(input), None) => {
                    let clip = enhance_clip(&read_wav(input)?, &model, &cfg.stft, cfg.se_eval.alpha)?;
                    write_text(out, "")?;
                    write_wav(&clip, out)?;
                    dump_config(&cfg, out, false)?;
                }
                (None, Some(m)) => {
                    let manifest = Manifest::read(m)?;
                    mkdir(out)?;
                    let n = manifest
                        .rows
                        .par_iter()
                        .filter_map(|row| {
                            manifest.load_noisy(row).transpose().map(|clip| {
                                let clip = enhance_clip(&clip?, &model, &cfg.stft, cfg.se_eval.alpha)?;
                                write_wav(&clip, out.join(format!("{}.wav", row.id)))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?
                        .len();
                    dump_config(&cfg, out, true)?;
                    say!("enhanced {n} clips into {}", out.display());
                }
                _ => return Err(Error::InvalidConfig("enhance needs exactly one of --input or --manifest".into())),
            }
        }
        Command::EvalQe(a) => {
            let out = require_out(out)?;
            let model = load_model(&a.model)?;
            let mut manifest = Manifest::read(&a.manifest)?;
            if a.add_clean {
                manifest = with_clean_references(&manifest);
            }
            let report = eval_qe(&model, &manifest, &cfg.stft)?;
            mkdir(out)?;
            write_text(&out.join("clips.jsonl"), &to_jsonl(&report.clips)?)?;
            write_text(&out.join("clips.csv"), &report.to_csv())?;
            let summary = serde_json::json!({ "lcc": report.lcc, "buckets": report.buckets, "strictly_increasing": report.strictly_increasing() });
            write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
            dump_config(&cfg, out, true)?;
            say!(
                "LCC(cos_z, SNR) {:.3}; buckets strictly increasing: {}",
                report.lcc.cos_z.r,
                report.strictly_increasing()
            );
        }
        Command::EvalSe(a) => {
            let out = require_out(out)?;
            let model = load_model(&a.model)?;
            let report = eval_se(&model, &Manifest::read(&a.manifest)?, &cfg.stft, &cfg.se_eval)?;
            mkdir(out)?;
            write_text(&out.join("clips.jsonl"), &to_jsonl(&report.clips)?)?;
            write_text(&out.join("clips.csv"), &report.to_csv())?;
            let summary = serde_json::json!({
                "median_improvement": report.median_improvement,
                "fraction_improved": report.fraction_improved,
                "welch": report.welch,
            });
            write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
            dump_config(&cfg, out, true)?;
            say!(
                "median segmental SNR improvement {:.3} dB over {} clips",
                report.median_improvement,
                report.clips.len()
            );
        }
        Command::EvalFrame(a) => {
            let out = require_out(out)?;
            let model = load_model(&a.model)?;
            let report = eval_frame_quality(&model, &Manifest::read(&a.manifest)?, &cfg.stft)?;
            mkdir(out)?;
            write_text(&out.join("clips.jsonl"), &to_jsonl(&report.clips)?)?;
            let summary = serde_json::json!({ "mean_lcc": report.mean_lcc, "excluded": report.excluded });
            write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
            dump_config(&cfg, out, true)?;
            say!("mean frame LCC {:.3} ({} clips excluded)", report.mean_lcc, report.excluded);
        }
        Command::Gradcheck(a) => {
            let checks = gradient_suite(a.seeds)?;
            let mut ok = true;
            for c in &checks {
                ok &= c.passed();
                say!(
                    "{:<26} max rel err {:.3e}  tol {:.0e}  {}",
                    c.op,
                    c.max_rel_err,
                    c.tolerance,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            if let Some(out) = out {
                write_text(out, &to_jsonl(&checks)?)?;
            }
            return Ok(if ok { EXIT_OK } else { EXIT_NUMERIC });
        }
        Command::InspectCkpt(a) => {
            let info = inspect_checkpoint(&a.path)?;
            say!("format version {}", info.version);
            say!("size {} bytes, crc32 {:08x} (verified)", info.size_bytes, info.crc32);
            say!("config {}", serde_json::to_string(&info.meta.config)?);
            say!("codebook initialized {}", info.meta.codebook_initialized);
            for t in &info.meta.tensors {
                say!("  {:<40} {:?} {} offset {} len {}", t.name, t.shape, t.dtype, t.offset, t.length);
            }
        }
    }
    Ok(EXIT_OK)
}
