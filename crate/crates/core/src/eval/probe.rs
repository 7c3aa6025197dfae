use nalgebra::{DMatrix, DVector};

use super::{EvalError, Predictor};
use crate::data::{AudioFrame, ImageFrame, Recording};
use crate::stats;

/// Hand-made per-frame summary: column and row mean intensity profiles,
/// per-channel means, and audio RMS, mean magnitude and zero-crossing rate.
pub fn summary_features(image: &ImageFrame, audio: &AudioFrame) -> Vec<f64> {
    let (s, c) = (image.size(), image.channels());
    let px = image.data();
    let mut cols = vec![0.0; s];
    let mut rows = vec![0.0; s];
    let mut chans = vec![0.0; c];
    for y in 0..s {
        for x in 0..s {
            for ch in 0..c {
                let v = px[(y * s + x) * c + ch];
                cols[x] += v;
                rows[y] += v;
                chans[ch] += v;
            }
        }
    }
    let mut f = Vec::with_capacity(2 * s + c + 3);
    f.extend(cols.iter().map(|v| v / (s * c) as f64));
    f.extend(rows.iter().map(|v| v / (s * c) as f64));
    f.extend(chans.iter().map(|v| v / (s * s) as f64));
    let a = audio.samples();
    let n = a.len().max(1) as f64;
    f.push((stats::sum(a.iter().map(|x| x * x)) / n).sqrt());
    f.push(stats::sum(a.iter().map(|x| x.abs())) / n);
    let crossings = a.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count();
    f.push(crossings as f64 / n);
    f
}

/// Ridge-regularised linear map from the final frame's standardised
/// summary features to arousal and valence.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[features + 1, 2]`, intercept last.
    weights: DMatrix<f64>,
}

pub const PROBE_RIDGE: f64 = 1.0;

impl LinearProbe {
    /// Fits on the final frame of every window `t >= k` of the recordings.
    pub fn fit(recs: &[Recording], k: usize) -> Result<Self, EvalError> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for rec in recs {
            for t in k..rec.len() {
                rows.push(summary_features(&rec.images()[t], &rec.audio()[t]));
                let l = rec.labels()[t];
                targets.push([l.arousal, l.valence]);
            }
        }
        if rows.is_empty() {
            return Err(EvalError::Empty("linear probe training set"));
        }
        let d = rows[0].len();
        let column = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
        let mean: Vec<f64> = (0..d).map(|j| stats::mean(&column(j))).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let s = stats::variance(&column(j)).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        let mut probe = Self {
            mean,
            scale,
            weights: DMatrix::zeros(d + 1, 2),
        };
        let x = DMatrix::from_fn(rows.len(), d + 1, |i, j| probe.standardise(&rows[i], j));
        let y = DMatrix::from_fn(targets.len(), 2, |i, j| targets[i][j]);
        let mut gram = x.tr_mul(&x);
        for j in 0..d {
            gram[(j, j)] += PROBE_RIDGE;
        }
        let chol = gram
            .cholesky()
            .ok_or(EvalError::Empty("linear probe normal equations"))?;
        probe.weights = chol.solve(&x.tr_mul(&y));
        Ok(probe)
    }

    fn standardise(&self, f: &[f64], j: usize) -> f64 {
        if j == f.len() {
            1.0
        } else {
            (f[j] - self.mean[j]) / self.scale[j]
        }
    }

    pub fn apply(&self, image: &ImageFrame, audio: &AudioFrame) -> [f64; 2] {
        let f = summary_features(image, audio);
        let x = DVector::from_fn(f.len() + 1, |j, _| self.standardise(&f, j));
        let y = self.weights.tr_mul(&x);
        [y[0], y[1]]
    }
}

impl Predictor for LinearProbe {
    fn predict(&self, rec: &Recording, k: usize) -> Result<Vec<[f64; 2]>, EvalError> {
        Ok((k..rec.len())
            .map(|t| self.apply(&rec.images()[t], &rec.audio()[t]))
            .collect())
    }
}
