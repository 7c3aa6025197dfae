mod common;

use affect_core::data::NoiseConfig;
use affect_core::eval::{evaluate, rmse, rmse_joint, write_predictions, ModelPredictor};
use affect_core::model::{ccc, ArchPreset, LossWeights, ParamGroup};
use affect_core::train::{all_windows, compute_gradients, Checkpoint, TrainConfig, TrainError, Trainer};

#[test]
fn without_reconstruction_weights_decoders_get_no_gradient() {
    let (train, _) = common::data(ArchPreset::Tiny, NoiseConfig::MODERATE, 1, 1, 20, 1);
    let params = affect_core::model::ModelParams::init(TrainConfig::for_preset(ArchPreset::Tiny).arch(), 0).unwrap();
    let windows: Vec<_> = all_windows(&train, params.arch().window - 1)
        .into_iter()
        .take(4)
        .collect();
    let w = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.01,
    };
    let (losses, grads) = compute_gradients(&params, w, &train, &windows).unwrap();
    assert!(losses.l2d.is_none() && losses.l1d.is_none());
    for (spec, g) in params.specs().iter().zip(&grads) {
        if spec.group.is_decoder() {
            assert!(g.as_ref().is_none_or(|g| g.iter().all(|x| *x == 0.0)), "{}", spec.name);
        }
    }
    assert!(grads
        .iter()
        .any(|g| g.as_ref().is_some_and(|g| g.iter().any(|x| *x != 0.0))));
}

#[test]
fn without_concordance_weight_lstm_and_head_stay_put() {
    let (train, val) = common::data(ArchPreset::Tiny, NoiseConfig::MODERATE, 1, 1, 20, 2);
    let mut c = common::tiny_config(3);
    c.gamma = 0.0;
    let mut t = Trainer::new(c, &train, &val).unwrap();
    let before = t.params.clone();
    t.run().unwrap();
    for ((spec, a), b) in before.specs().iter().zip(before.values()).zip(t.params.values()) {
        let frozen = matches!(spec.group, ParamGroup::Lstm | ParamGroup::Head);
        assert_eq!(frozen, a == b, "{}", spec.name);
    }
}

#[test]
fn overfitting_one_batch_drives_loss_down() {
    let losses: Vec<f64> = common::overfit_one_batch().unwrap().iter().map(|l| l.total).collect();
    assert!(losses[499] <= 0.1 * losses[0], "{} -> {}", losses[0], losses[499]);
    let ma = common::moving_average(&losses, 50);
    for (i, w) in ma.windows(2).enumerate() {
        assert!(w[1] < w[0], "moving average rises after step {}", i + 50);
    }
}

#[test]
fn adam_settles_in_a_quadratic_bowl() {
    let path = common::adam_bowl(common::BOWL_STEPS);
    let theta = path[common::BOWL_STEPS - 1];
    assert!(theta.abs() < 1e-2, "theta = {theta} after {} steps", common::BOWL_STEPS);
}

#[test]
fn training_is_reproducible_and_resumable() {
    common::persistence().unwrap();
}

#[test]
fn checkpoint_for_another_hidden_size_is_rejected() {
    let (train, val) = common::data(ArchPreset::Tiny, NoiseConfig::MODERATE, 1, 1, 20, 3);
    let mut c = common::tiny_config(1);
    c.lstm_hidden = 256;
    let mut t = Trainer::new(c.clone(), &train, &val).unwrap();
    t.step().unwrap();
    let bytes = t.checkpoint().to_bytes();
    let mut other = c;
    other.lstm_hidden = 512;
    assert!(matches!(
        Checkpoint::from_bytes(&bytes, Some(&other)),
        Err(TrainError::Shape(_))
    ));
}

type Row = (String, usize, f64, f64, f64, f64);

#[test]
fn report_agrees_with_its_prediction_dump() {
    let (train, val) = common::data(ArchPreset::Tiny, NoiseConfig::MODERATE, 1, 2, 30, 6);
    let mut t = Trainer::new(common::tiny_config(5), &train, &val).unwrap();
    t.run().unwrap();
    let k = t.config.k;
    let (report, preds) = evaluate(&ModelPredictor(&t.params), &val, k, "fp").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    write_predictions(&path, &preds).unwrap();

    let mut rdr = csv::Reader::from_path(&path).unwrap();
    assert_eq!(
        rdr.headers().unwrap(),
        vec!["recording_id", "t", "a_hat", "v_hat", "a", "v"]
    );
    let rows: Vec<Row> = rdr.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), report.frames);
    assert_eq!(rows.len(), 2 * (30 - k));
    let col = |f: fn(&Row) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let (ah, a, vh, v) = (col(|r| r.2), col(|r| r.4), col(|r| r.3), col(|r| r.5));
    assert!((rmse(&ah, &a).unwrap() - report.e_a).abs() < 1e-12);
    assert!((rmse(&vh, &v).unwrap() - report.e_v).abs() < 1e-12);
    assert!((rmse_joint(&ah, &a, &vh, &v).unwrap() - report.e_av).abs() < 1e-12);
    assert!((ccc(&ah, &a).unwrap().rho - report.ccc_arousal).abs() < 1e-12);
    assert!((ccc(&vh, &v).unwrap().rho - report.ccc_valence).abs() < 1e-12);
    assert_eq!(rows[0].0, "val000");
    assert_eq!(rows[0].1, k);
}

#[test]
fn full_scale_layer_shapes() {
    common::architecture().unwrap();
}

#[test]
fn concordance_and_loss_oracles() {
    common::ccc_algebra().unwrap();
    common::loss_plugins().unwrap();
}
