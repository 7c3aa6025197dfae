use crate::tensor::Tensor;

use super::TrainError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment buffers shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update. A `None` gradient counts as zero.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<&[f64]>], lr: f64) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TrainError::Shape(format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.is_some_and(|g| g.len() != p.numel()) {
                return Err(TrainError::Shape(format!(
                    "parameter {i} does not match its optimizer state"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = p.data_mut();
            match grads[i] {
                Some(g) => {
                    for j in 0..p.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
                None => {
                    for j in 0..p.len() {
                        m[j] *= ADAM_BETA1;
                        v[j] *= ADAM_BETA2;
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![Tensor::from_slice(&[1.0, -2.0])];
        let mut s = AdamState::new(&p);
        s.update(&mut p, &[Some(&[0.0, 0.0])], 1e-3).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::from_slice(&[0.0, 0.0, 0.0])];
        let mut s = AdamState::new(&p);
        s.update(&mut p, &[Some(&[3.0, -0.5, 1e-3])], 1e-2).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        for (x, g) in p[0].data().iter().zip([3.0f64, -0.5, 1e-3]) {
            let oracle = -1e-2 * g / (g.abs() + ADAM_EPS);
            assert!((x - oracle).abs() < 1e-15, "{x} vs {oracle}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::from_slice(&[0.0, 0.0])];
        let mut s = AdamState::new(&p);
        assert!(s.update(&mut p, &[Some(&[1.0])], 1e-3).is_err());
        assert!(s.update(&mut p, &[], 1e-3).is_err());
    }
}
