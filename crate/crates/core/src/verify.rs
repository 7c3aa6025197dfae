//! Finite-difference verification of every layer, both loss terms and the
//! whole network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::loss::{loss_rec_var, recon_loss_var};
use crate::model::{ArchConfig, FrameBatch, LossWeights, ModelError, ModelParams, Net};
use crate::nn::{self, ConvSpec, LstmLayerVars, LEAKY_SLOPE};
use crate::tensor::{self, grad_check_many, Tape, Tensor, Var};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const LAYER_SEEDS: u64 = 10;

/// Worst relative error of one check over all its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seeds: u64,
    pub worst: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < GRAD_TOLERANCE
    }
}

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> tensor::Result<Var>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    f: LossFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized data")
}

/// `sum(y * r)` for a fixed pseudo-random `r`, so every output element
/// contributes a distinct weight.
fn project(tape: &mut Tape, y: Var) -> tensor::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let r = uniform(&mut ChaCha8Rng::seed_from_u64(0xC0FFEE), &shape);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn conv_case(name: &'static str, x: Vec<usize>, spec: ConvSpec, transposed: bool, one_d: bool) -> Case {
    let w = match (transposed, one_d) {
        (false, false) => spec.conv2d_weight_shape(),
        (true, false) => spec.deconv2d_weight_shape(),
        (false, true) => spec.conv1d_weight_shape(),
        (true, true) => spec.deconv1d_weight_shape(),
    };
    Case {
        name,
        shapes: vec![x, w, vec![spec.out_channels]],
        f: Box::new(move |t, v| {
            let y = match (transposed, one_d) {
                (false, false) => nn::conv2d(t, v[0], v[1], Some(v[2]), &spec)?,
                (true, false) => nn::deconv2d(t, v[0], v[1], Some(v[2]), &spec)?,
                (false, true) => nn::conv1d(t, v[0], v[1], Some(v[2]), &spec)?,
                (true, true) => nn::deconv1d(t, v[0], v[1], Some(v[2]), &spec)?,
            };
            project(t, y)
        }),
    }
}

fn unary_case(name: &'static str, shape: Vec<usize>, f: fn(&mut Tape, Var) -> tensor::Result<Var>) -> Case {
    Case {
        name,
        shapes: vec![shape],
        f: Box::new(move |t, v| {
            let y = f(t, v[0])?;
            project(t, y)
        }),
    }
}

fn layer_cases() -> Vec<Case> {
    let mut cases = vec![
        conv_case(
            "conv2d 3x3 stride 1",
            vec![2, 5, 5, 2],
            ConvSpec::square(3, 1, 2, 3),
            false,
            false,
        ),
        conv_case(
            "conv2d 3x3 stride 2",
            vec![2, 6, 6, 2],
            ConvSpec::square(3, 2, 2, 3),
            false,
            false,
        ),
        conv_case(
            "conv2d 1x1 stride 2",
            vec![2, 5, 5, 3],
            ConvSpec::square(1, 2, 3, 2),
            false,
            false,
        ),
        conv_case(
            "deconv2d 3x3 stride 1",
            vec![2, 3, 3, 2],
            ConvSpec::square(3, 1, 2, 3),
            true,
            false,
        ),
        conv_case(
            "deconv2d 3x3 stride 2",
            vec![2, 3, 3, 2],
            ConvSpec::square(3, 2, 2, 3),
            true,
            false,
        ),
        conv_case("conv1d k5", vec![2, 12, 2], ConvSpec::line(5, 1, 2, 3), false, true),
        conv_case(
            "conv1d k4 stride 2",
            vec![2, 9, 2],
            ConvSpec::line(4, 2, 2, 2),
            false,
            true,
        ),
        conv_case("deconv1d k4", vec![2, 6, 3], ConvSpec::line(4, 1, 3, 1), true, true),
        unary_case("maxpool1d 2", vec![2, 12, 3], |t, x| nn::maxpool1d(t, x, 2, 2)),
        unary_case("maxpool1d 5", vec![2, 20, 2], |t, x| nn::maxpool1d(t, x, 5, 5)),
        unary_case("upsample1d 2", vec![2, 4, 3], |t, x| nn::upsample1d(t, x, 2)),
        unary_case("upsample2d 2", vec![2, 3, 3, 2], |t, x| t.upsample2d(x, 2)),
        unary_case("leaky relu", vec![3, 7], |t, x| Ok(nn::leaky_relu(t, x, LEAKY_SLOPE))),
        unary_case("sigmoid", vec![3, 7], |t, x| Ok(t.sigmoid(x))),
        unary_case("tanh", vec![3, 7], |t, x| Ok(t.tanh(x))),
    ];
    cases.push(Case {
        name: "fully connected",
        shapes: vec![vec![3, 6], vec![4, 6], vec![4]],
        f: Box::new(|t, v| {
            let y = nn::fully_connected(t, v[0], v[1], v[2])?;
            project(t, y)
        }),
    });
    cases.push(Case {
        name: "fusion concat",
        shapes: vec![vec![3, 4], vec![3, 5]],
        f: Box::new(|t, v| {
            let y = t.concat_cols(v[0], v[1])?;
            project(t, y)
        }),
    });
    let (input, hidden) = (3, 4);
    let mut lstm_shapes = vec![vec![2, input], vec![2, hidden], vec![2, hidden]];
    lstm_shapes.extend((0..4).map(|_| vec![hidden, input + hidden]));
    lstm_shapes.extend((0..4).map(|_| vec![hidden]));
    cases.push(Case {
        name: "lstm cell",
        shapes: lstm_shapes,
        f: Box::new(move |t, v| {
            let p = LstmLayerVars {
                input_size: input,
                hidden_size: hidden,
                weights: [v[3], v[4], v[5], v[6]],
                biases: [v[7], v[8], v[9], v[10]],
            };
            let (h, c) = nn::lstm_cell(t, v[0], v[1], v[2], &p)?;
            let both = t.concat_cols(h, c)?;
            project(t, both)
        }),
    });
    cases.push(Case {
        name: "reconstruction loss",
        shapes: vec![vec![2, 3, 3, 2], vec![2, 3, 3, 2]],
        f: Box::new(|t, v| recon_loss_var(t, v[0], v[1]).map_err(model_to_tensor)),
    });
    cases.push(Case {
        name: "concordance loss",
        shapes: vec![vec![6, 2], vec![6, 2]],
        f: Box::new(|t, v| loss_rec_var(t, v[0], v[1]).map(|(l, _)| l).map_err(model_to_tensor)),
    });
    cases
}

fn model_to_tensor(e: ModelError) -> tensor::TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => tensor::TensorError::Invalid {
            op: "model",
            msg: other.to_string(),
        },
    }
}

/// Checks every layer and loss term over `seeds` random draws.
pub fn layer_checks(seeds: u64) -> Result<Vec<CheckResult>, ModelError> {
    let mut out = Vec::new();
    for case in layer_cases() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = case.shapes.iter().map(|s| uniform(&mut rng, s)).collect();
            worst = worst.max(grad_check_many(&case.f, &inputs, GRAD_EPS)?);
        }
        out.push(CheckResult {
            name: case.name.to_string(),
            seeds,
            worst,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum Term {
    Image,
    Audio,
    Concordance,
    Total,
}

struct EndToEnd {
    params: ModelParams,
    batch: FrameBatch,
    labels: Tensor,
    weights: LossWeights,
}

impl EndToEnd {
    /// Tiny network on three random windows. Weights are drawn from the
    /// variance-preserving LeakyReLU range `sqrt(6 / ((1 + slope^2) fan_in))`
    /// and biases from `U(-0.1, 0.1)`, so activations and gradients keep
    /// their scale through the whole stack.
    fn new(seed: u64) -> Result<Self, ModelError> {
        let arch = ArchConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
        let skeleton = ModelParams::init(arch.clone(), seed)?;
        let gain = (6.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let values = skeleton
            .specs()
            .iter()
            .map(|s| {
                let b = match s.init {
                    nn::ParamInit::Zeros => 0.1,
                    init => gain * init.bound(),
                };
                let mut t = uniform(&mut rng, &s.shape);
                t.data_mut().iter_mut().for_each(|x| *x *= b);
                t
            })
            .collect();
        let params = ModelParams::from_values(arch.clone(), values)?;
        let frames = arch.window + 2;
        let s = arch.image_size;
        let batch = FrameBatch {
            images: Some(uniform(&mut rng, &[frames, s, s, arch.image_channels])),
            audio: Some(uniform(&mut rng, &[frames, arch.audio_len, 1])),
            windows: (0..3).map(|b| (b..b + arch.window).collect()).collect(),
        };
        let labels = uniform(&mut rng, &[3, 2]);
        Ok(Self {
            params,
            batch,
            labels,
            weights: LossWeights::default(),
        })
    }

    fn loss(&self, tape: &mut Tape, vars: &[Var], term: Term) -> Result<Var, ModelError> {
        let mut net = Net::from_vars(&self.params, vars.to_vec())?;
        let out = net.forward(tape, &self.batch, true)?;
        let img = tape.constant(self.batch.images.clone().expect("images"));
        let aud = tape.constant(self.batch.audio.clone().expect("audio"));
        let l2d = recon_loss_var(tape, out.recon_image.expect("face decoder"), img)?;
        let l1d = recon_loss_var(tape, out.recon_audio.expect("audio decoder"), aud)?;
        let y = tape.constant(self.labels.clone());
        let (lrec, _) = loss_rec_var(tape, out.prediction, y)?;
        Ok(match term {
            Term::Image => l2d,
            Term::Audio => l1d,
            Term::Concordance => lrec,
            Term::Total => {
                let w = self.weights;
                let a = tape.scale(l2d, w.alpha);
                let b = tape.scale(l1d, w.beta);
                let c = tape.scale(lrec, w.gamma);
                let ab = tape.add(a, b)?;
                tape.add(ab, c)?
            }
        })
    }

    fn check(&self, term: Term) -> Result<f64, ModelError> {
        let f = |tape: &mut Tape, vars: &[Var]| self.loss(tape, vars, term).map_err(model_to_tensor);
        Ok(grad_check_many(f, self.params.values(), GRAD_EPS)?)
    }

    fn gradient(&self, term: Term) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, true);
        let l = self.loss(&mut tape, &vars, term)?;
        tape.backward(l)?;
        Ok(vars
            .iter()
            .zip(self.params.values())
            .flat_map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect())
    }

    /// Worst relative gap between the total loss gradient and the weighted
    /// sum of the per-term gradients.
    fn linearity(&self) -> Result<f64, ModelError> {
        let w = self.weights;
        let total = self.gradient(Term::Total)?;
        let parts = [
            (w.alpha, self.gradient(Term::Image)?),
            (w.beta, self.gradient(Term::Audio)?),
            (w.gamma, self.gradient(Term::Concordance)?),
        ];
        Ok(total
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let s: f64 = parts.iter().map(|(w, g)| w * g[i]).sum();
                (t - s).abs() / (t.abs() + s.abs()).max(1e-8)
            })
            .fold(0.0, f64::max))
    }
}

/// Finite-difference checks of each loss term through the whole tiny
/// network with respect to every parameter, plus agreement of the total
/// loss gradient with the weighted sum of the term gradients.
pub fn end_to_end_check(seed: u64) -> Result<Vec<CheckResult>, ModelError> {
    let e = EndToEnd::new(seed)?;
    let mut out = Vec::new();
    for (name, term) in [
        ("image reconstruction", Term::Image),
        ("audio reconstruction", Term::Audio),
        ("concordance", Term::Concordance),
    ] {
        out.push(CheckResult {
            name: format!("tiny network end to end, {name} (seed {seed})"),
            seeds: 1,
            worst: e.check(term)?,
        });
    }
    out.push(CheckResult {
        name: format!("tiny network total = weighted term gradients (seed {seed})"),
        seeds: 1,
        worst: e.linearity()?,
    });
    Ok(out)
}

/// Layer checks over [`LAYER_SEEDS`] seeds plus the end-to-end checks.
pub fn gradient_suite() -> Result<Vec<CheckResult>, ModelError> {
    let mut all = layer_checks(LAYER_SEEDS)?;
    all.extend(end_to_end_check(0)?);
    Ok(all)
}
