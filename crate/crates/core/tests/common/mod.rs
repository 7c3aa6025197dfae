#![allow(dead_code)]

use std::time::{Duration, Instant};

use affect_core::data::{
    generate_split, read_recording, write_recording, FrameGeometry, GeneratorConfig, NoiseConfig, Recording,
};
use affect_core::eval::{evaluate, AblationRun, Benchmark, EvalReport, LinearProbe, ABLATION_SEEDS};
use affect_core::model::{
    ccc, degenerate_ccc_count, loss_rec, total_loss, trace_shapes, ArchConfig, ArchPreset, FrameBatch, LossWeights,
    Variant,
};
use affect_core::tensor::Tensor;
use affect_core::train::{Checkpoint, StepLosses, TrainConfig, TrainError, Trainer, WindowRef};
use affect_core::verify::gradient_suite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed())
}

fn within(d: Duration, limit: Duration) -> Result<(), String> {
    if d <= limit {
        Ok(())
    } else {
        Err(format!("took {d:.2?}, limit {limit:?}"))
    }
}

pub fn data(
    preset: ArchPreset,
    noise: NoiseConfig,
    train: usize,
    val: usize,
    frames: usize,
    seed: u64,
) -> (Vec<Recording>, Vec<Recording>) {
    let mut g = GeneratorConfig::new(FrameGeometry::of_arch(&ArchConfig::preset(preset)));
    g.noise = noise;
    generate_split(seed, train, val, frames, &g).expect("generator")
}

pub fn tiny_config(steps: usize) -> TrainConfig {
    let mut c = TrainConfig::for_preset(ArchPreset::Tiny);
    c.max_steps = steps;
    c.batch_size = 4;
    c.eval_interval = 0;
    c.learning_rate = 1e-3;
    c
}

// ---- gradients -----------------------------------------------------------

pub fn gradients() -> Check {
    let (results, took) = timed(gradient_suite);
    let results = results.map_err(|e| e.to_string())?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e})", r.name, r.worst))
        .collect();
    if !failed.is_empty() {
        return Err(format!("over tolerance: {}", failed.join(", ")));
    }
    within(took, Duration::from_secs(120))?;
    let worst = results.iter().map(|r| r.worst).fold(0.0, f64::max);
    Ok(format!(
        "{} checks, worst relative error {worst:.2e}, {took:.1?}",
        results.len()
    ))
}

// ---- architecture --------------------------------------------------------

/// Output size of every layer of both auto-encoders at full scale, with
/// the audio upsampling row at 640 and the audio decoder input as 320x4.
pub const FULL_SHAPES: [(&str, &[usize]); 17] = [
    ("enc2d.block0.row2", &[48, 48, 16]),
    ("enc2d.block1.row2", &[24, 24, 32]),
    ("enc2d.fc", &[2048]),
    ("dec2d.reshape", &[24, 24, 32]),
    ("dec2d.block0.row2", &[48, 48, 16]),
    ("dec2d.block1.row2", &[96, 96, 3]),
    ("enc1d.conv0", &[640, 40]),
    ("enc1d.pool0", &[320, 40]),
    ("enc1d.conv1", &[320, 40]),
    ("enc1d.pool1", &[32, 40]),
    ("enc1d.fc", &[640]),
    ("dec1d.fc", &[1280]),
    ("dec1d.reshape", &[320, 4]),
    ("dec1d.deconv0", &[320, 40]),
    ("dec1d.upsample", &[640, 40]),
    ("dec1d.deconv1", &[640, 1]),
    ("fusion", &[3328]),
];

pub fn full_batch(arch: &ArchConfig) -> FrameBatch {
    let frames = arch.window + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut fill = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    FrameBatch {
        images: Some(fill(vec![
            frames,
            arch.image_size,
            arch.image_size,
            arch.image_channels,
        ])),
        audio: Some(fill(vec![frames, arch.audio_len, 1])),
        windows: vec![(0..arch.window).collect(), (1..frames).collect()],
    }
}

pub fn architecture() -> Check {
    let arch = ArchConfig::full();
    let (trace, took) = timed(|| trace_shapes(&arch, &full_batch(&arch)));
    let trace = trace.map_err(|e| e.to_string())?;
    let mut wrong = Vec::new();
    for (layer, shape) in FULL_SHAPES {
        match trace.iter().find(|t| t.layer == layer) {
            Some(t) if t.shape == shape => {}
            Some(t) => wrong.push(format!("{layer} {:?} != {shape:?}", t.shape)),
            None => wrong.push(format!("{layer} missing")),
        }
    }
    if arch.fused_len() != 3328 {
        wrong.push(format!("fused length {}", arch.fused_len()));
    }
    if !wrong.is_empty() {
        return Err(wrong.join("; "));
    }
    within(took, Duration::from_secs(1))?;
    Ok(format!(
        "{} layer shapes and fused length 3328 match, {took:.2?}",
        FULL_SHAPES.len()
    ))
}

// ---- concordance ---------------------------------------------------------

pub fn ccc_algebra() -> Check {
    let (r, took) = timed(|| -> Result<(), String> {
        let rho = |a: &[f64], b: &[f64]| ccc(a, b).map(|c| c.rho).map_err(|e| e.to_string());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..1000 {
            let n = rng.gen_range(2..40);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (xy, yx) = (rho(&x, &y)?, rho(&y, &x)?);
            if !(-1.0..=1.0).contains(&xy) || xy != yx {
                return Err(format!("pair {i}: rho {xy} / {yx}"));
            }
            let self_rho = rho(&x, &x)?;
            if (self_rho - 1.0).abs() > 1e-12 {
                return Err(format!("pair {i}: rho(x, x) = {self_rho}"));
            }
        }
        let anti = rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0])?;
        if anti != -1.0 {
            return Err(format!("reversed series gives {anti}"));
        }
        let shifted = rho(&[1.0, 2.0, 3.0], &[3.0, 4.0, 5.0])?;
        if (shifted - 0.25).abs() > 1e-12 {
            return Err(format!("shifted series gives {shifted}"));
        }
        let before = degenerate_ccc_count();
        let flat = ccc(&[0.5; 6], &[0.5; 6]).map_err(|e| e.to_string())?;
        if flat.rho != 0.0 || !flat.degenerate || degenerate_ccc_count() <= before {
            return Err(format!("constant case gives {flat:?}"));
        }
        Ok(())
    });
    r?;
    within(took, Duration::from_secs(1))?;
    Ok(format!("1000 random pairs plus exact cases, {took:.2?}"))
}

pub fn loss_plugins() -> Check {
    let (r, took) = timed(|| -> Result<(f64, f64, f64), String> {
        let a = [0.1, -0.4, 0.7, 0.2];
        let v = [-0.3, 0.5, 0.0, 0.9];
        let mirror = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|y| 2.0 * m - y).collect::<Vec<_>>()
        };
        let perfect = loss_rec(&a, &a, &v, &v).map_err(|e| e.to_string())?;
        let anti = loss_rec(&mirror(&a), &a, &mirror(&v), &v).map_err(|e| e.to_string())?;
        let total = total_loss(LossWeights::default(), 2.0, 3.0, 1.0);
        Ok((perfect, anti, total))
    });
    let (perfect, anti, total) = r?;
    if perfect.abs() > 1e-12 || (anti - 2.0).abs() > 1e-12 || (total - 5.01).abs() > 1e-12 {
        return Err(format!("got {perfect}, {anti}, {total}"));
    }
    within(took, Duration::from_secs(1))?;
    Ok(format!("L_Rec {perfect:.1} and {anti:.1}, total {total}"))
}

// ---- optimisation --------------------------------------------------------

/// Losses of 500 Adam steps on one fixed batch of 8 windows of clean desk
/// data at the benchmark learning rate.
pub fn overfit_one_batch() -> Result<Vec<StepLosses>, TrainError> {
    let (train, val) = data(ArchPreset::Desk, NoiseConfig::NONE, 1, 1, 40, 0);
    let mut c = TrainConfig::for_preset(ArchPreset::Desk);
    c.learning_rate = Benchmark::default().learning_rate;
    let mut t = Trainer::new(c, &train, &val)?;
    let batch: Vec<WindowRef> = t.next_batch().into_iter().take(8).collect();
    (0..500).map(|_| t.step_on(&batch)).collect()
}

pub fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    x.windows(width).map(|w| w.iter().sum::<f64>() / width as f64).collect()
}

/// Iterates of Adam at lr 1e-2 on `theta^2` from `theta = 1`.
pub fn adam_bowl(steps: usize) -> Vec<f64> {
    let mut theta = vec![Tensor::scalar(1.0)];
    let mut adam = affect_core::train::AdamState::new(&theta);
    (0..steps)
        .map(|_| {
            let g = [2.0 * theta[0].item()];
            adam.update(&mut theta, &[Some(&g)], 1e-2).expect("scalar update");
            theta[0].item()
        })
        .collect()
}

pub const BOWL_STEPS: usize = 200;

pub fn optimization() -> Check {
    let (r, took) = timed(|| overfit_one_batch().map_err(|e| e.to_string()));
    let losses: Vec<f64> = r?.iter().map(|l| l.total).collect();
    let drop = 1.0 - losses[499] / losses[0];
    let path = adam_bowl(10 * BOWL_STEPS);
    let theta = path[BOWL_STEPS - 1];
    if drop < 0.9 {
        return Err(format!(
            "overfit loss fell {:.1}% ({} -> {})",
            100.0 * drop,
            losses[0],
            losses[499]
        ));
    }
    if theta.abs() >= 1e-2 {
        let first = path
            .iter()
            .position(|t| t.abs() < 1e-2)
            .map_or("never".to_string(), |i| format!("step {}", i + 1));
        return Err(format!(
            "overfit loss fell {:.2}%, but the bowl is at theta = {theta:.4} after {BOWL_STEPS} steps \
             (first below 1e-2 at {first})",
            100.0 * drop
        ));
    }
    within(took, Duration::from_secs(600))?;
    Ok(format!(
        "overfit loss fell {:.2}% ({:.1} -> {:.2}), bowl theta {theta:.1e}, {took:.1?}",
        100.0 * drop,
        losses[0],
        losses[499]
    ))
}

// ---- synthetic benchmark -------------------------------------------------

pub struct Study {
    pub probe: EvalReport,
    /// Full-model runs then visual-only then audio-only, each over the
    /// ablation seeds.
    pub runs: Vec<AblationRun>,
    pub took: Duration,
}

pub const STUDY_VARIANTS: [Variant; 3] = [Variant::Full, Variant::VisualOnly, Variant::AudioOnly];

pub fn study(bench: &Benchmark) -> Result<Study, TrainError> {
    let t0 = Instant::now();
    let mut runs = Vec::new();
    let mut probe = None;
    for seed in ABLATION_SEEDS {
        let (train, val) = bench.data(ArchPreset::Desk, seed)?;
        if probe.is_none() {
            let k = bench.config(Variant::Full, seed).k;
            let p = LinearProbe::fit(&train, k)?;
            probe = Some(evaluate(&p, &val, k, "probe")?.0);
        }
        for variant in STUDY_VARIANTS {
            runs.push(affect_core::eval::train_and_evaluate(
                bench.config(variant, seed),
                &train,
                &val,
            )?);
        }
    }
    Ok(Study {
        probe: probe.expect("at least one seed"),
        runs,
        took: t0.elapsed(),
    })
}

impl Study {
    pub fn mean_eav(&self, variant: Variant) -> f64 {
        let e: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.report.e_av)
            .collect();
        e.iter().sum::<f64>() / e.len() as f64
    }

    pub fn full_seed0(&self) -> &AblationRun {
        self.runs
            .iter()
            .find(|r| r.variant == Variant::Full && r.config.seed == ABLATION_SEEDS[0])
            .expect("full run")
    }
}

pub fn synthetic(s: &Study) -> Check {
    let run = s.full_seed0();
    let reached = run
        .outcome
        .best_report
        .iter()
        .chain(run.outcome.last_report.iter())
        .chain(std::iter::once(&run.report))
        .any(|r| r.ccc_arousal >= 0.5 && r.ccc_valence >= 0.5);
    let best = run.outcome.best_report.as_ref().unwrap_or(&run.report);
    let p = &s.probe;
    let detail = format!(
        "model CCC a {:.3} v {:.3} at step {}, probe CCC a {:.3} v {:.3}",
        best.ccc_arousal,
        best.ccc_valence,
        run.outcome.best_step.unwrap_or(run.outcome.final_step),
        p.ccc_arousal,
        p.ccc_valence
    );
    if !reached {
        return Err(format!("never reached CCC 0.5 on both: {detail}"));
    }
    if !(best.ccc_arousal > p.ccc_arousal && best.ccc_valence > p.ccc_valence) {
        return Err(format!("does not beat the probe: {detail}"));
    }
    within(s.took, Duration::from_secs(3600))?;
    Ok(detail)
}

pub fn ablation(s: &Study) -> Check {
    let [full, visual, audio] = STUDY_VARIANTS.map(|v| s.mean_eav(v));
    let detail = format!("mean E_av full {full:.4}, visual-only {visual:.4}, audio-only {audio:.4}");
    if full <= visual && full <= audio {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- determinism and persistence ----------------------------------------

pub fn persistence() -> Check {
    let (r, took) = timed(|| -> Result<String, String> {
        let e = |e: TrainError| e.to_string();
        let (train, val) = data(ArchPreset::Tiny, NoiseConfig::MODERATE, 2, 1, 30, 4);

        let run = |steps: usize| -> Result<Trainer<'_>, String> {
            let mut t = Trainer::new(tiny_config(steps), &train, &val).map_err(e)?;
            t.run().map_err(e)?;
            Ok(t)
        };
        let a = run(20)?;
        let b = run(20)?;
        let bits = |t: &Trainer| t.curve.iter().map(|r| r.total_loss.to_bits()).collect::<Vec<_>>();
        if bits(&a) != bits(&b) || a.params.values() != b.params.values() {
            return Err("two runs with one seed differ".into());
        }

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ck_path = dir.path().join("a.afck");
        a.checkpoint().save(&ck_path).map_err(e)?;
        let loaded = Checkpoint::load(&ck_path, None).map_err(e)?;
        if loaded.to_bytes() != std::fs::read(&ck_path).map_err(|e| e.to_string())? {
            return Err("checkpoint bytes change on reload".into());
        }

        for rec in train.iter().chain(&val) {
            let p = dir.path().join(format!("{}.afr", rec.id));
            write_recording(&p, rec).map_err(|e| e.to_string())?;
            if read_recording(&p, None).map_err(|e| e.to_string())? != *rec {
                return Err(format!("recording {} changes on reload", rec.id));
            }
        }

        let mut head = Trainer::new(tiny_config(10), &train, &val).map_err(e)?;
        head.run().map_err(e)?;
        let mut ck = Checkpoint::from_bytes(&head.checkpoint().to_bytes(), None).map_err(e)?;
        ck.config.max_steps = 20;
        let mut tail = Trainer::resume(ck, &train, &val).map_err(e)?;
        tail.run().map_err(e)?;
        let resumed: Vec<u64> = head
            .curve
            .iter()
            .chain(&tail.curve)
            .map(|r| r.total_loss.to_bits())
            .collect();
        if resumed != bits(&a) || tail.params.values() != a.params.values() {
            return Err("resumed run departs from the uninterrupted one".into());
        }
        Ok("identical curves, exact checkpoint and recording round trips, resume matches".into())
    });
    let detail = r?;
    within(took, Duration::from_secs(300))?;
    Ok(format!("{detail}, {took:.1?}"))
}
