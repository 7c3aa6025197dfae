use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Seeded stream shared by every parameter of a model, consumed in layout
/// order so the same seed always yields bitwise-identical parameters.
pub struct ParamRng(ChaCha8Rng);

impl ParamRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    /// `U(-b, b)` with `b = sqrt(1 / fan_in)`.
    FanInUniform {
        fan_in: usize,
    },
    Zeros,
}

impl ParamInit {
    pub fn bound(&self) -> f64 {
        match *self {
            ParamInit::FanInUniform { fan_in } => (1.0 / fan_in.max(1) as f64).sqrt(),
            ParamInit::Zeros => 0.0,
        }
    }
}

pub fn init_tensor(rng: &mut ParamRng, shape: &[usize], init: ParamInit) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match init {
        ParamInit::Zeros => vec![0.0; n],
        ParamInit::FanInUniform { .. } => {
            let b = init.bound();
            (0..n).map(|_| rng.0.gen_range(-b..b)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = init_tensor(&mut ParamRng::new(7), &[5, 9], ParamInit::FanInUniform { fan_in: 9 });
        let b = init_tensor(&mut ParamRng::new(7), &[5, 9], ParamInit::FanInUniform { fan_in: 9 });
        assert_eq!(a, b);
        let c = init_tensor(&mut ParamRng::new(8), &[5, 9], ParamInit::FanInUniform { fan_in: 9 });
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_moment_and_bound() {
        let init = ParamInit::FanInUniform { fan_in: 25 };
        let t = init_tensor(&mut ParamRng::new(1), &[10_000], init);
        let b = init.bound();
        assert!(t.data().iter().all(|v| v.abs() <= b));
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = b * b / 3.0;
        assert!((var - expected).abs() / expected < 0.1, "{var} vs {expected}");
    }

    #[test]
    fn biases_are_exactly_zero() {
        let t = init_tensor(&mut ParamRng::new(1), &[64], ParamInit::Zeros);
        assert!(t.data().iter().all(|v| *v == 0.0));
    }
}
