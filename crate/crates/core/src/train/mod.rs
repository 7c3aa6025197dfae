//! Joint optimisation of reconstruction and concordance losses with Adam.

mod adam;
mod batch;
mod checkpoint;
mod config;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use batch::{all_windows, assemble, WindowRef, WindowSampler};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::data::Recording;
use crate::eval::{evaluate, fingerprint, EvalError, EvalReport, ModelPredictor};
use crate::model::loss::{loss_rec_var, recon_loss_var};
use crate::model::{LossWeights, ModelError, ModelParams, Net};
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint version {found} not supported (expected {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Data(String),
    #[error("non-finite loss or gradient at step {step}; last finite losses: {last:?}")]
    NonFinite { step: u64, last: Option<StepLosses> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Loss terms of one step. Reconstruction terms are absent when their
/// weight is zero and the decoder was skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub l2d: Option<f64>,
    pub l1d: Option<f64>,
    pub lrec: f64,
}

/// One line of the learning-curve file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub step: u64,
    pub total_loss: f64,
    pub l2d: Option<f64>,
    pub l1d: Option<f64>,
    pub lrec: f64,
    pub val_ccc_arousal: Option<f64>,
    pub val_ccc_valence: Option<f64>,
    #[serde(rename = "val_Ea")]
    pub val_ea: Option<f64>,
    #[serde(rename = "val_Ev")]
    pub val_ev: Option<f64>,
    #[serde(rename = "val_Eav")]
    pub val_eav: Option<f64>,
}

/// One optional gradient per parameter, in layout order.
pub type ParamGrads = Vec<Option<Vec<f64>>>;

/// Losses and per-parameter gradients (layout order) for one batch.
pub fn compute_gradients(
    params: &ModelParams,
    weights: LossWeights,
    recs: &[Recording],
    windows: &[WindowRef],
) -> Result<(StepLosses, ParamGrads), TrainError> {
    let arch = params.arch();
    let (batch, labels) = assemble(recs, windows, arch)?;
    let mut tape = Tape::new();
    let mut net = Net::bind(params, &mut tape, true);
    let reconstruct = weights.alpha > 0.0 || weights.beta > 0.0;
    let out = net.forward(&mut tape, &batch, reconstruct)?;
    let labels = tape.constant(labels);
    let (lrec, _) = loss_rec_var(&mut tape, out.prediction, labels)?;
    let mut terms = Vec::new();
    let mut recon = |img: Option<crate::tensor::Var>,
                     target: Option<&crate::tensor::Tensor>,
                     w: f64,
                     tape: &mut Tape| match (img, target) {
        (Some(r), Some(t)) => {
            let t = tape.constant(t.clone());
            let l = recon_loss_var(tape, r, t)?;
            let v = tape.value(l).item();
            if w > 0.0 {
                terms.push(tape.scale(l, w));
            }
            Ok::<_, ModelError>(Some(v))
        }
        _ => Ok(None),
    };
    let l2d = recon(out.recon_image, batch.images.as_ref(), weights.alpha, &mut tape)?;
    let l1d = recon(out.recon_audio, batch.audio.as_ref(), weights.beta, &mut tape)?;
    if weights.gamma > 0.0 {
        terms.push(tape.scale(lrec, weights.gamma));
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => tape.constant(crate::tensor::Tensor::scalar(0.0)),
    };
    for &t in terms.iter().skip(1) {
        total = tape.add(total, t).map_err(ModelError::from)?;
    }
    tape.backward(total).map_err(ModelError::from)?;
    let losses = StepLosses {
        total: tape.value(total).item(),
        l2d,
        l1d,
        lrec: tape.value(lrec).item(),
    };
    let grads = net
        .param_vars()
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
        .collect();
    Ok((losses, grads))
}

/// Result of [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub best_step: Option<u64>,
    pub best_report: Option<EvalReport>,
    pub last_report: Option<EvalReport>,
}

/// Training state over a fixed pair of datasets.
pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Updates applied so far.
    pub step: u64,
    pub best_score: f64,
    pub curve: Vec<CurveRow>,
    train: &'d [Recording],
    val: &'d [Recording],
    sampler: WindowSampler,
    last_finite: Option<StepLosses>,
    best_report: Option<EvalReport>,
    best_step: Option<u64>,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, train: &'d [Recording], val: &'d [Recording]) -> Result<Self, TrainError> {
        config.validate()?;
        let params = ModelParams::init(config.arch(), config.seed)?;
        let adam = AdamState::new(params.values());
        Self::assemble(config, params, adam, 0, f64::NEG_INFINITY, train, val)
    }

    pub fn resume(ckpt: Checkpoint, train: &'d [Recording], val: &'d [Recording]) -> Result<Self, TrainError> {
        Self::assemble(
            ckpt.config,
            ckpt.params,
            ckpt.adam,
            ckpt.step,
            ckpt.best_score,
            train,
            val,
        )
    }

    fn assemble(
        config: TrainConfig,
        params: ModelParams,
        adam: AdamState,
        step: u64,
        best_score: f64,
        train: &'d [Recording],
        val: &'d [Recording],
    ) -> Result<Self, TrainError> {
        let windows = all_windows(train, config.k);
        if windows.is_empty() {
            return Err(TrainError::Data("training set has no complete windows".into()));
        }
        let g = crate::data::FrameGeometry::of_arch(params.arch());
        if let Some(r) = train.iter().chain(val).find(|r| {
            let h = r.geometry();
            (params.arch().visual && (h.image_size, h.image_channels) != (g.image_size, g.image_channels))
                || (params.arch().audio && h.audio_len != g.audio_len)
        }) {
            return Err(TrainError::Shape(format!(
                "recording {} has {:?}, model expects {g:?}",
                r.id,
                r.geometry()
            )));
        }
        let sampler = WindowSampler::new(windows, config.seed);
        Ok(Self {
            config,
            params,
            adam,
            step,
            best_score,
            curve: Vec::new(),
            train,
            val,
            sampler,
            last_finite: None,
            best_report: None,
            best_step: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            best_score: self.best_score,
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// The windows the next step will use.
    pub fn next_batch(&mut self) -> Vec<WindowRef> {
        self.sampler.batch(self.step, self.config.batch_size)
    }

    /// One Adam update on the given windows.
    pub fn step_on(&mut self, windows: &[WindowRef]) -> Result<StepLosses, TrainError> {
        let (losses, mut grads) = compute_gradients(&self.params, self.config.weights(), self.train, windows)?;
        let finite = losses.total.is_finite() && grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(TrainError::NonFinite {
                step: self.step + 1,
                last: self.last_finite,
            });
        }
        if let Some(limit) = self.config.clip {
            let norm = grads
                .iter()
                .flatten()
                .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > limit {
                let s = limit / norm;
                grads
                    .iter_mut()
                    .flatten()
                    .for_each(|g| g.iter_mut().for_each(|x| *x *= s));
            }
        }
        let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
        self.adam
            .update(self.params.values_mut(), &refs, self.config.learning_rate)?;
        self.step += 1;
        self.last_finite = Some(losses);
        Ok(losses)
    }

    /// One update on the sampler's next batch; appends a curve row.
    pub fn step(&mut self) -> Result<StepLosses, TrainError> {
        let windows = self.next_batch();
        let l = self.step_on(&windows)?;
        self.curve.push(CurveRow {
            step: self.step,
            total_loss: l.total,
            l2d: l.l2d,
            l1d: l.l1d,
            lrec: l.lrec,
            val_ccc_arousal: None,
            val_ccc_valence: None,
            val_ea: None,
            val_ev: None,
            val_eav: None,
        });
        Ok(l)
    }

    pub fn validate(&self) -> Result<EvalReport, TrainError> {
        let fp = fingerprint(&self.config.to_text());
        let (rep, _) = evaluate(&ModelPredictor(&self.params), self.val, self.config.k, &fp)?;
        Ok(rep)
    }

    fn dir_file(&self, name: &str) -> Option<PathBuf> {
        self.config.checkpoint_dir.as_ref().map(|d| d.join(name))
    }

    /// Trains up to `max_steps`, validating every `eval_interval` steps and
    /// at the end. With a checkpoint directory, keeps `curve.csv`,
    /// `latest.afck`, `best.afck` and `final.afck` there.
    pub fn run(&mut self) -> Result<TrainOutcome, TrainError> {
        if let Some(dir) = &self.config.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
        }
        let max = self.config.max_steps as u64;
        let interval = self.config.eval_interval as u64;
        let mut last_report = None;
        while self.step < max {
            let l = self.step()?;
            let due = interval > 0 && (self.step.is_multiple_of(interval) || self.step == max);
            if due && !self.val.is_empty() {
                let rep = self.validate()?;
                log::info!(
                    "step {} loss {:.4} lrec {:.4} val ccc a {:.3} v {:.3} E_av {:.4}",
                    self.step,
                    l.total,
                    l.lrec,
                    rep.ccc_arousal,
                    rep.ccc_valence,
                    rep.e_av
                );
                let row = self.curve.last_mut().expect("row for this step");
                row.val_ccc_arousal = Some(rep.ccc_arousal);
                row.val_ccc_valence = Some(rep.ccc_valence);
                row.val_ea = Some(rep.e_a);
                row.val_ev = Some(rep.e_v);
                row.val_eav = Some(rep.e_av);
                if rep.mean_ccc() > self.best_score {
                    self.best_score = rep.mean_ccc();
                    self.best_step = Some(self.step);
                    self.best_report = Some(rep.clone());
                    if let Some(p) = self.dir_file("best.afck") {
                        self.checkpoint().save(&p)?;
                    }
                }
                if let Some(p) = self.dir_file("latest.afck") {
                    self.checkpoint().save(&p)?;
                    self.write_curve()?;
                }
                last_report = Some(rep);
            } else if due || self.step.is_multiple_of(100) {
                log::info!("step {} loss {:.4} lrec {:.4}", self.step, l.total, l.lrec);
            }
        }
        if let Some(p) = self.dir_file("final.afck") {
            self.checkpoint().save(&p)?;
            self.write_curve()?;
        }
        Ok(TrainOutcome {
            final_step: self.step,
            best_step: self.best_step,
            best_report: self.best_report.clone(),
            last_report,
        })
    }

    /// Rewrites `curve.csv`: rows already on disk up to the first in-memory
    /// step, then the in-memory rows.
    fn write_curve(&self) -> Result<(), TrainError> {
        let Some(path) = self.dir_file("curve.csv") else {
            return Ok(());
        };
        let first = self.curve.first().map_or(self.step + 1, |r| r.step);
        let earlier = read_curve_prefix(&path, first)?;
        let io = |e: csv::Error| TrainError::Io(format!("{}: {e}", path.display()));
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(io)?;
        w.write_record(CURVE_HEADER).map_err(io)?;
        for r in earlier {
            w.write_record(&r).map_err(io)?;
        }
        for r in &self.curve {
            w.serialize(r).map_err(io)?;
        }
        w.flush().map_err(|e| TrainError::Io(e.to_string()))
    }
}

pub const CURVE_HEADER: [&str; 10] = [
    "step",
    "total_loss",
    "l2d",
    "l1d",
    "lrec",
    "val_ccc_arousal",
    "val_ccc_valence",
    "val_Ea",
    "val_Ev",
    "val_Eav",
];

fn read_curve_prefix(path: &Path, before: u64) -> Result<Vec<csv::StringRecord>, TrainError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let io = |e: csv::Error| TrainError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(io)?;
        match rec.get(0).and_then(|s| s.parse::<u64>().ok()) {
            Some(s) if s < before => out.push(rec),
            _ => {}
        }
    }
    Ok(out)
}
