use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use affect_core::data::{
    generate_split, load_manifest, write_manifest, write_recording, DataError, FrameGeometry, GeneratorConfig,
    NoiseConfig, Recording,
};
use affect_core::eval::{evaluate, fingerprint, run_ablation, write_predictions, Benchmark, EvalError, ModelPredictor};
use affect_core::model::{ArchConfig, ArchPreset, ModelError};
use affect_core::train::{Checkpoint, TrainConfig, TrainError, Trainer};
use affect_core::verify::{gradient_suite, GRAD_TOLERANCE};

#[derive(Parser)]
#[command(name = "affect", version, about = "Audio-visual arousal/valence regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    None,
    Moderate,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic recordings plus train.manifest and val.manifest.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Total recordings; a fifth (at least one) go to validation unless --val is given.
        #[arg(long, default_value_t = 20)]
        recordings: usize,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long, default_value_t = 500)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, value_enum, default_value_t = Noise::Moderate)]
        noise: Noise,
    },
    /// Train on <data>/train.manifest, validating on <data>/val.manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint and curve directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of initialising.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest (or <dir>/val.manifest).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path stem; writes <stem>.csv, <stem>.txt and <stem>.predictions.csv.
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate a named variant on the synthetic benchmark.
    Ablate {
        /// full, visual-only, audio-only, no-autoencoder or hidden-N.
        #[arg(long)]
        name: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every layer, both losses and the whole network.
    Gradcheck,
}

enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::ParamMismatch(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Version { .. } | TrainError::Shape(_) => {
                CliError::Config(e.to_string())
            }
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Eval(m) => m.into(),
            TrainError::Checkpoint(_) | TrainError::Io(_) | TrainError::Data(_) => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn generate(
    seed: u64,
    recordings: usize,
    val: Option<usize>,
    frames: usize,
    out: &Path,
    preset: &str,
    noise: Noise,
) -> Result<(), CliError> {
    let preset: ArchPreset = preset
        .parse()
        .map_err(|e: ModelError| CliError::Config(e.to_string()))?;
    let val = val.unwrap_or((recordings / 5).max(1));
    if val == 0 || val >= recordings {
        return Err(CliError::Config(format!(
            "need at least one training and one validation recording, got {recordings} total with {val} for validation"
        )));
    }
    let mut cfg = GeneratorConfig::new(FrameGeometry::of_arch(&ArchConfig::preset(preset)));
    if let Noise::None = noise {
        cfg.noise = NoiseConfig::NONE;
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let (train, valid) = generate_split(seed, recordings - val, val, frames, &cfg)?;
    for (name, set) in [("train", &train), ("val", &valid)] {
        let mut paths = Vec::new();
        for rec in set.iter() {
            let p = out.join(format!("{}.afr", rec.id));
            write_recording(&p, rec)?;
            paths.push(p);
        }
        write_manifest(&out.join(format!("{name}.manifest")), &paths)?;
    }
    println!(
        "wrote {} training and {} validation recordings to {}",
        train.len(),
        valid.len(),
        out.display()
    );
    Ok(())
}

fn manifest_path(data: &Path, name: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{name}.manifest"))
    } else {
        data.to_path_buf()
    }
}

fn load(path: &Path, arch: &ArchConfig) -> Result<Vec<Recording>, CliError> {
    if !path.is_file() {
        return Err(CliError::Data(format!("{}: no such manifest", path.display())));
    }
    let recs = load_manifest(path, None)?;
    let g = FrameGeometry::of_arch(arch);
    for r in &recs {
        let h = r.geometry();
        let image_ok = !arch.visual || (h.image_size, h.image_channels) == (g.image_size, g.image_channels);
        if !image_ok || (arch.audio && h.audio_len != g.audio_len) {
            return Err(CliError::Data(format!(
                "{}: recording {} has {h:?}, model expects {g:?}",
                path.display(),
                r.id
            )));
        }
    }
    Ok(recs)
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = TrainConfig::load(config)?;
    cfg.checkpoint_dir = Some(out.to_path_buf());
    let arch = cfg.arch();
    let train = load(&manifest_path(data, "train"), &arch)?;
    let val = load(&manifest_path(data, "val"), &arch)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut ck = Checkpoint::load(p, Some(&cfg))?;
            ck.config = cfg;
            Trainer::resume(ck, &train, &val)?
        }
        None => Trainer::new(cfg, &train, &val)?,
    };
    let outcome = trainer.run()?;
    println!("trained to step {}", outcome.final_step);
    if let (Some(step), Some(r)) = (outcome.best_step, &outcome.best_report) {
        println!("best validation at step {step}:");
        print!("{}", r.to_text());
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, report: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint, None)?;
    let recs = load(&manifest_path(data, "val"), ck.params.arch())?;
    let fp = fingerprint(&ck.config.to_text());
    let (rep, preds) = evaluate(&ModelPredictor(&ck.params), &recs, ck.config.k, &fp)?;
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    rep.write(report)?;
    write_predictions(&report.with_extension("predictions.csv"), &preds)?;
    print!("{}", rep.to_text());
    Ok(())
}

fn ablate(name: &str, config: &Path, report: Option<&Path>) -> Result<(), CliError> {
    let cfg = TrainConfig::load(config)?;
    let run = run_ablation(name, &cfg, &Benchmark::default())?;
    if let Some(stem) = report {
        run.report.write(stem)?;
    }
    println!("variant {}", run.variant);
    print!("{}", run.report.to_text());
    Ok(())
}

fn gradcheck() -> Result<(), CliError> {
    let results = gradient_suite()?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{verdict:4} {:40} seeds {:2} max rel err {:.3e}",
            r.name, r.seeds, r.worst
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!(
            "{failed} checks exceed relative error {GRAD_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate {
            seed,
            recordings,
            val,
            frames,
            out,
            preset,
            noise,
        } => generate(*seed, *recordings, *val, *frames, out, preset, *noise),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train(config, data, out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            report,
        } => eval(checkpoint, data, report),
        Command::Ablate { name, config, report } => ablate(name, config, report.as_deref()),
        Command::Gradcheck => gradcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.code())
        }
    }
}
