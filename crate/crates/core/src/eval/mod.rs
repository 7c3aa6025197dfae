//! Error metrics, predictors, evaluation reports and prediction dumps.

mod ablation;
mod probe;

pub use ablation::{run_ablation, train_and_evaluate, AblationRun, Benchmark, ABLATION_SEEDS};
pub use probe::{summary_features, LinearProbe, PROBE_RIDGE};

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::data::Recording;
use crate::model::{ccc, fuse, ModelError, ModelParams, Net};
use crate::stats;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: lengths differ ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{0}: nothing to evaluate")]
    Empty(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Io(String),
}

fn same_len(what: &'static str, a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            what,
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(EvalError::Empty(what));
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    same_len("rmse", pred, truth)?;
    let sq = stats::sum(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)));
    Ok((sq / pred.len() as f64).sqrt())
}

/// Joint error over both dimensions under one `1/N`:
/// `sqrt(1/N sum((a_hat - a)^2 + (v_hat - v)^2))`.
pub fn rmse_joint(a_hat: &[f64], a: &[f64], v_hat: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    same_len("rmse_joint", a_hat, a)?;
    same_len("rmse_joint", v_hat, v)?;
    same_len("rmse_joint", a_hat, v_hat)?;
    let sq = stats::sum(
        a_hat
            .iter()
            .zip(a)
            .zip(v_hat.iter().zip(v))
            .map(|((ah, a), (vh, v))| (ah - a) * (ah - a) + (vh - v) * (vh - v)),
    );
    Ok((sq / a_hat.len() as f64).sqrt())
}

/// Produces arousal/valence estimates for windows `t = k ..= N - 1`.
pub trait Predictor {
    fn predict(&self, rec: &Recording, k: usize) -> Result<Vec<[f64; 2]>, EvalError>;
}

/// Runs a trained network.
pub struct ModelPredictor<'a>(pub &'a ModelParams);

/// Echoes the ground-truth labels.
pub struct OraclePredictor;

/// Predicts the same values everywhere.
pub struct ConstantPredictor(pub [f64; 2]);

impl Predictor for OraclePredictor {
    fn predict(&self, rec: &Recording, k: usize) -> Result<Vec<[f64; 2]>, EvalError> {
        Ok(rec.labels()[k.min(rec.len())..]
            .iter()
            .map(|l| [l.arousal, l.valence])
            .collect())
    }
}

impl Predictor for ConstantPredictor {
    fn predict(&self, rec: &Recording, k: usize) -> Result<Vec<[f64; 2]>, EvalError> {
        Ok(vec![self.0; rec.len().saturating_sub(k)])
    }
}

const FRAME_CHUNK: usize = 256;
const WINDOW_CHUNK: usize = 512;

fn stack(rec: &Recording, range: std::ops::Range<usize>, params: &ModelParams) -> (Option<Tensor>, Option<Tensor>) {
    let arch = params.arch();
    let n = range.len();
    let images = arch.visual.then(|| {
        let data = rec.images()[range.clone()]
            .iter()
            .flat_map(|f| f.data().iter().copied())
            .collect();
        Tensor::new(vec![n, arch.image_size, arch.image_size, arch.image_channels], data)
    });
    let audio = arch.audio.then(|| {
        let data = rec.audio()[range.clone()]
            .iter()
            .flat_map(|f| f.samples().iter().copied())
            .collect();
        Tensor::new(vec![n, arch.audio_len, 1], data)
    });
    (images.and_then(Result::ok), audio.and_then(Result::ok))
}

impl Predictor for ModelPredictor<'_> {
    /// Encodes every frame once, then runs the recurrent head over all windows.
    fn predict(&self, rec: &Recording, k: usize) -> Result<Vec<[f64; 2]>, EvalError> {
        let params = self.0;
        let arch = params.arch();
        if arch.window != k + 1 {
            return Err(ModelError::WindowLength {
                expected: arch.window,
                got: k + 1,
            }
            .into());
        }
        let g = rec.geometry();
        if (arch.visual && (g.image_size != arch.image_size || g.image_channels != arch.image_channels))
            || (arch.audio && g.audio_len != arch.audio_len)
        {
            return Err(ModelError::InputShape {
                what: "recording frames",
                expected: vec![arch.image_size, arch.image_size, arch.image_channels, arch.audio_len],
                got: vec![g.image_size, g.image_size, g.image_channels, g.audio_len],
            }
            .into());
        }
        let n = rec.len();
        if n < arch.window {
            return Err(ModelError::TooShort {
                what: "recording frames",
                min: arch.window,
                got: n,
            }
            .into());
        }
        let mut tape = Tape::new();
        let mut net = Net::bind(params, &mut tape, false);
        let mark = tape.len();
        let mut fused = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(FRAME_CHUNK) {
            let (images, audio) = stack(rec, start..(start + FRAME_CHUNK).min(n), params);
            let z2 = match images {
                Some(t) => {
                    let x = tape.constant(t);
                    Some(net.encode2d(&mut tape, x)?)
                }
                None => None,
            };
            let z1 = match audio {
                Some(t) => {
                    let x = tape.constant(t);
                    Some(net.encode1d(&mut tape, x)?)
                }
                None => None,
            };
            let f = fuse(&mut tape, z2, z1)?;
            width = tape.value(f).shape()[1];
            fused.extend_from_slice(tape.value(f).data());
            tape.truncate(mark);
        }
        let fv = tape.constant(Tensor::new(vec![n, width], fused).map_err(ModelError::from)?);
        let mark = tape.len();
        let mut out = Vec::with_capacity(n - k);
        let ts: Vec<usize> = (k..n).collect();
        for chunk in ts.chunks(WINDOW_CHUNK) {
            let windows: Vec<Vec<usize>> = chunk.iter().map(|&t| (t - k..=t).collect()).collect();
            let p = net.predict(&mut tape, fv, &windows)?;
            out.extend(tape.value(p).data().chunks_exact(2).map(|c| [c[0], c[1]]));
            tape.truncate(mark);
        }
        Ok(out)
    }
}

/// One row of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub recording_id: String,
    pub t: usize,
    pub a_hat: f64,
    pub v_hat: f64,
    pub a: f64,
    pub v: f64,
}

/// Pooled metrics over every evaluated frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(rename = "E_a")]
    pub e_a: f64,
    #[serde(rename = "E_v")]
    pub e_v: f64,
    #[serde(rename = "E_av")]
    pub e_av: f64,
    pub ccc_arousal: f64,
    pub ccc_valence: f64,
    pub frames: usize,
    pub fingerprint: String,
}

impl EvalReport {
    /// Metrics of a prediction series concatenated across recordings.
    pub fn from_predictions(preds: &[Prediction], fingerprint: &str) -> Result<Self, EvalError> {
        let col = |f: fn(&Prediction) -> f64| preds.iter().map(f).collect::<Vec<f64>>();
        let (ah, a, vh, v) = (col(|p| p.a_hat), col(|p| p.a), col(|p| p.v_hat), col(|p| p.v));
        Ok(Self {
            e_a: rmse(&ah, &a)?,
            e_v: rmse(&vh, &v)?,
            e_av: rmse_joint(&ah, &a, &vh, &v)?,
            ccc_arousal: ccc(&ah, &a)?.rho,
            ccc_valence: ccc(&vh, &v)?.rho,
            frames: preds.len(),
            fingerprint: fingerprint.to_string(),
        })
    }

    /// Mean of the two concordance values.
    pub fn mean_ccc(&self) -> f64 {
        0.5 * (self.ccc_arousal + self.ccc_valence)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames      {}", self.frames);
        let _ = writeln!(s, "E_a         {:.6}", self.e_a);
        let _ = writeln!(s, "E_v         {:.6}", self.e_v);
        let _ = writeln!(s, "E_av        {:.6}", self.e_av);
        let _ = writeln!(s, "CCC arousal {:.6}", self.ccc_arousal);
        let _ = writeln!(s, "CCC valence {:.6}", self.ccc_valence);
        let _ = writeln!(s, "fingerprint {}", self.fingerprint);
        s
    }

    /// Writes `<stem>.csv` and `<stem>.txt`.
    pub fn write(&self, stem: &Path) -> Result<(), EvalError> {
        let io = |e: &dyn std::fmt::Display| EvalError::Io(format!("{}: {e}", stem.display()));
        let mut w = csv::Writer::from_path(stem.with_extension("csv")).map_err(|e| io(&e))?;
        w.serialize(self).map_err(|e| io(&e))?;
        w.flush().map_err(|e| io(&e))?;
        std::fs::write(stem.with_extension("txt"), self.to_text()).map_err(|e| io(&e))
    }
}

/// Predicts every valid window of every recording, in the given order.
pub fn predict_all(predictor: &dyn Predictor, recs: &[Recording], k: usize) -> Result<Vec<Prediction>, EvalError> {
    let mut out = Vec::new();
    for rec in recs {
        let p = predictor.predict(rec, k)?;
        if p.len() != rec.len().saturating_sub(k) {
            return Err(EvalError::LengthMismatch {
                what: "predictions",
                left: p.len(),
                right: rec.len().saturating_sub(k),
            });
        }
        for (i, [a_hat, v_hat]) in p.into_iter().enumerate() {
            let t = k + i;
            let l = rec.labels()[t];
            out.push(Prediction {
                recording_id: rec.id.clone(),
                t,
                a_hat,
                v_hat,
                a: l.arousal,
                v: l.valence,
            });
        }
    }
    Ok(out)
}

pub fn evaluate(
    predictor: &dyn Predictor,
    recs: &[Recording],
    k: usize,
    fingerprint: &str,
) -> Result<(EvalReport, Vec<Prediction>), EvalError> {
    let preds = predict_all(predictor, recs, k)?;
    Ok((EvalReport::from_predictions(&preds, fingerprint)?, preds))
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<(), EvalError> {
    let io = |e: csv::Error| EvalError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for p in preds {
        w.serialize(p).map_err(io)?;
    }
    w.flush().map_err(|e| EvalError::Io(e.to_string()))
}

/// Short stable digest of a config text.
pub fn fingerprint(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(text.as_bytes());
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_recording, FrameGeometry, GeneratorConfig};
    use crate::model::ArchConfig;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let (ah, a) = ([1.0, -1.0], [0.0, 0.0]);
        let (vh, v) = ([0.5, 0.5], [0.5, 0.5]);
        assert_eq!(rmse(&ah, &a).unwrap(), 1.0);
        assert_eq!(rmse(&vh, &v).unwrap(), 0.0);
        assert_eq!(rmse_joint(&ah, &a, &vh, &v).unwrap(), 1.0);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn recs() -> Vec<Recording> {
        let cfg = GeneratorConfig::new(FrameGeometry::of_arch(&ArchConfig::tiny()));
        (0..2)
            .map(|i| generate_recording(&format!("r{i}"), i, 30, &cfg).unwrap())
            .collect()
    }

    #[test]
    fn oracle_and_constant_predictors() {
        let r = recs();
        let (rep, preds) = evaluate(&OraclePredictor, &r, 4, "x").unwrap();
        assert_eq!(preds.len(), 52);
        assert_eq!((rep.e_a, rep.e_v, rep.e_av), (0.0, 0.0, 0.0));
        assert!((rep.ccc_arousal - 1.0).abs() < 1e-12 && (rep.ccc_valence - 1.0).abs() < 1e-12);
        let (rep, _) = evaluate(&ConstantPredictor([0.1, -0.2]), &r, 4, "x").unwrap();
        assert_eq!((rep.ccc_arousal, rep.ccc_valence), (0.0, 0.0));
    }

    #[test]
    fn model_predictor_matches_single_window_forward() {
        let r = recs();
        let params = ModelParams::init(ArchConfig::tiny(), 3).unwrap();
        let preds = ModelPredictor(&params).predict(&r[0], 4).unwrap();
        assert_eq!(preds.len(), 26);
        for t in [4, 17, 29] {
            let img: Vec<Tensor> = (t - 4..=t)
                .map(|f| Tensor::new(vec![4, 4, 2], r[0].images()[f].data().to_vec()).unwrap())
                .collect();
            let aud: Vec<Tensor> = (t - 4..=t)
                .map(|f| Tensor::new(vec![16, 1], r[0].audio()[f].samples().to_vec()).unwrap())
                .collect();
            let o = params.forward_window(&img, &aud).unwrap();
            assert!((o.arousal - preds[t - 4][0]).abs() < 1e-12);
            assert!((o.valence - preds[t - 4][1]).abs() < 1e-12);
        }
    }

    #[test]
    fn report_is_reproducible() {
        let r = recs();
        let params = ModelParams::init(ArchConfig::tiny(), 3).unwrap();
        let (a, _) = evaluate(&ModelPredictor(&params), &r, 4, "f").unwrap();
        let (b, _) = evaluate(&ModelPredictor(&params), &r, 4, "f").unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert!((a.e_av.powi(2) - (a.e_a.powi(2) + a.e_v.powi(2))).abs() < 1e-9);
    }
}
