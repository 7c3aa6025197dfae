use crate::data::{generate_split, FrameGeometry, GeneratorConfig, Recording};
use crate::model::{ArchPreset, Variant};
use crate::train::{TrainConfig, TrainError, TrainOutcome, Trainer};

use super::{evaluate, fingerprint, EvalReport, ModelPredictor};

/// Sizes and optimiser settings of the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Benchmark {
    pub train_recordings: usize,
    pub val_recordings: usize,
    pub frames: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub eval_interval: usize,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self {
            train_recordings: 16,
            val_recordings: 4,
            frames: 500,
            steps: 1000,
            learning_rate: 1e-3,
            eval_interval: 250,
        }
    }
}

/// Seeds shared by every variant of the ablation study.
pub const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

impl Benchmark {
    /// Moderate-noise train and validation recordings for a seed.
    pub fn data(&self, preset: ArchPreset, seed: u64) -> Result<(Vec<Recording>, Vec<Recording>), TrainError> {
        let arch = crate::model::ArchConfig::preset(preset);
        let cfg = GeneratorConfig::new(FrameGeometry::of_arch(&arch));
        generate_split(seed, self.train_recordings, self.val_recordings, self.frames, &cfg)
            .map_err(|e| TrainError::Data(e.to_string()))
    }

    /// Desk training config for a variant and seed.
    pub fn config(&self, variant: Variant, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::for_preset(ArchPreset::Desk);
        c.learning_rate = self.learning_rate;
        c.max_steps = self.steps;
        c.eval_interval = self.eval_interval;
        c.seed = seed;
        apply_variant(&mut c, variant);
        c
    }
}

fn apply_variant(c: &mut TrainConfig, variant: Variant) {
    if let Variant::Hidden(h) = variant {
        c.lstm_hidden = h;
    }
    c.variant = variant;
}

/// A trained variant and its final-step validation report.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub variant: Variant,
    pub config: TrainConfig,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Trains `config` on the given data and evaluates the final parameters.
pub fn train_and_evaluate(
    config: TrainConfig,
    train: &[Recording],
    val: &[Recording],
) -> Result<AblationRun, TrainError> {
    let variant = config.variant;
    let mut trainer = Trainer::new(config.clone(), train, val)?;
    let outcome = trainer.run()?;
    let fp = fingerprint(&config.to_text());
    let (report, _) = evaluate(&ModelPredictor(&trainer.params), val, config.k, &fp)?;
    Ok(AblationRun {
        variant,
        config,
        outcome,
        report,
    })
}

/// Trains and evaluates the named variant on the synthetic benchmark
/// generated from `config.seed`, keeping every other setting of `config`.
pub fn run_ablation(name: &str, config: &TrainConfig, bench: &Benchmark) -> Result<AblationRun, TrainError> {
    let variant: Variant = name
        .parse()
        .map_err(|e: crate::model::ModelError| TrainError::Config(e.to_string()))?;
    let mut c = config.clone();
    apply_variant(&mut c, variant);
    c.validate()?;
    let (train, val) = bench.data(c.preset, c.seed)?;
    train_and_evaluate(c, &train, &val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_is_rejected() {
        let c = TrainConfig::for_preset(ArchPreset::Tiny);
        assert!(matches!(
            run_ablation("bimodal", &c, &Benchmark::default()),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn variants_share_everything_but_the_variant() {
        let b = Benchmark::default();
        let full = b.config(Variant::Full, 1);
        let audio = b.config(Variant::AudioOnly, 1);
        assert_eq!(
            TrainConfig {
                variant: Variant::Full,
                ..audio
            },
            full
        );
        assert_eq!(b.config(Variant::Hidden(64), 1).arch().lstm_hidden, 64);
    }

    #[test]
    fn tiny_ablation_runs() {
        let mut c = TrainConfig::for_preset(ArchPreset::Tiny);
        c.max_steps = 2;
        c.batch_size = 4;
        c.eval_interval = 0;
        let bench = Benchmark {
            train_recordings: 1,
            val_recordings: 1,
            frames: 12,
            ..Benchmark::default()
        };
        let run = run_ablation("visual-only", &c, &bench).unwrap();
        assert_eq!(run.variant, Variant::VisualOnly);
        assert_eq!(run.report.frames, 8);
    }
}
