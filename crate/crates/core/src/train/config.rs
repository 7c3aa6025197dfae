use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::model::{ArchConfig, ArchPreset, LossWeights, Variant};

use super::TrainError;

/// Everything that determines a training run.
///
/// Serialised as `key = value` lines in field order; `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Preceding frames per window; windows hold `k + 1` frames.
    pub k: usize,
    pub lstm_hidden: usize,
    /// Validate every this many steps; 0 disables validation.
    pub eval_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub preset: ArchPreset,
    pub variant: Variant,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
    pub feedback_predictions: bool,
}

impl TrainConfig {
    pub fn for_preset(preset: ArchPreset) -> Self {
        let arch = ArchConfig::preset(preset);
        let w = LossWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            learning_rate: 1e-4,
            batch_size: 32,
            max_steps: 5000,
            seed: 0,
            k: arch.window - 1,
            lstm_hidden: arch.lstm_hidden,
            eval_interval: 250,
            checkpoint_dir: None,
            preset,
            variant: Variant::Full,
            clip: None,
            feedback_predictions: false,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        let mut a = ArchConfig::preset(self.preset);
        a.lstm_hidden = self.lstm_hidden;
        a.window = self.k + 1;
        a.feedback_predictions = self.feedback_predictions;
        a.with_variant(self.variant)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for concordance".into());
        }
        if self.max_steps == 0 || self.k == 0 || self.lstm_hidden == 0 {
            return bad("max_steps, k and lstm_hidden must be positive".into());
        }
        if let Some(c) = self.clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("clip must be positive, got {c}"));
            }
        }
        self.arch().validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_steps = {}", self.max_steps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "lstm_hidden = {}", self.lstm_hidden);
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let dir = self.checkpoint_dir.as_ref().map(|p| p.display().to_string());
        let _ = writeln!(s, "checkpoint_dir = {}", opt(dir));
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "clip = {}", opt(self.clip.map(|c| c.to_string())));
        let _ = writeln!(s, "feedback_predictions = {}", self.feedback_predictions);
        s
    }

    /// Parses `key = value` text. Unset keys take the defaults of the
    /// chosen preset.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => parse_value::<ArchPreset>("preset", v)?,
            None => ArchPreset::Desk,
        };
        let mut c = Self::for_preset(preset);
        for (k, v) in &pairs {
            let key = k.as_str();
            match key {
                "alpha" => c.alpha = parse_value(key, v)?,
                "beta" => c.beta = parse_value(key, v)?,
                "gamma" => c.gamma = parse_value(key, v)?,
                "learning_rate" => c.learning_rate = parse_value(key, v)?,
                "batch_size" => c.batch_size = parse_value(key, v)?,
                "max_steps" => c.max_steps = parse_value(key, v)?,
                "seed" => c.seed = parse_value(key, v)?,
                "k" => c.k = parse_value(key, v)?,
                "lstm_hidden" => c.lstm_hidden = parse_value(key, v)?,
                "eval_interval" => c.eval_interval = parse_value(key, v)?,
                "checkpoint_dir" => c.checkpoint_dir = (v != "none").then(|| PathBuf::from(v)),
                "preset" => {}
                "variant" => c.variant = parse_value(key, v)?,
                "clip" => c.clip = if v == "none" { None } else { Some(parse_value(key, v)?) },
                "feedback_predictions" => c.feedback_predictions = parse_value(key, v)?,
                other => return Err(TrainError::Config(format!("unknown key `{other}`"))),
            }
        }
        if let Variant::Hidden(h) = c.variant {
            c.lstm_hidden = h;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, TrainError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| TrainError::Config(format!("{key} = {v}: {e}")))
}
