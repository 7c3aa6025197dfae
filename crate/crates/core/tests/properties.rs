use affect_core::data::{
    normalize_audio, read_recording, window_stream, write_recording, AffectLabel, AudioFrame, FrameGeometry,
    ImageFrame, Recording,
};
use affect_core::eval::{rmse, rmse_joint, EvalReport, Prediction};
use affect_core::model::ccc;
use proptest::prelude::*;

const GEOMETRY: FrameGeometry = FrameGeometry {
    image_size: 3,
    image_channels: 2,
    audio_len: 4,
};

/// Values the on-disk `f32` format stores exactly.
fn unit() -> impl Strategy<Value = f64> {
    (-1.0f32..=1.0).prop_map(f64::from)
}

fn recording() -> impl Strategy<Value = Recording> {
    let g = GEOMETRY;
    (1usize..12).prop_flat_map(move |n| {
        (
            prop::collection::vec(prop::collection::vec(unit(), g.image_len()), n),
            prop::collection::vec(
                prop::collection::vec((-5.0f32..5.0).prop_map(f64::from), g.audio_len),
                n,
            ),
            prop::collection::vec((unit(), unit()), n),
        )
            .prop_map(move |(images, audio, labels)| {
                Recording::new(
                    "r",
                    g,
                    images
                        .into_iter()
                        .map(|d| ImageFrame::new(g.image_size, g.image_channels, d).unwrap())
                        .collect(),
                    audio.into_iter().map(AudioFrame).collect(),
                    labels
                        .into_iter()
                        .map(|(a, v)| AffectLabel::new(a, v).unwrap())
                        .collect(),
                )
                .unwrap()
            })
    })
}

fn series(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-3.0f64..3.0, n),
        prop::collection::vec(-3.0f64..3.0, n),
    )
}

fn predictions() -> impl Strategy<Value = Vec<Prediction>> {
    prop::collection::vec((unit(), unit(), unit(), unit()), 2..60).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(t, (a_hat, v_hat, a, v))| Prediction {
                recording_id: format!("r{}", t % 3),
                t,
                a_hat,
                v_hat,
                a,
                v,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn window_count_is_frames_minus_k(rec in recording(), k in 0usize..6) {
        match window_stream(&rec, k) {
            Ok(w) => {
                let starts: Vec<usize> = w.map(|w| w.t).collect();
                prop_assert_eq!(starts.len(), rec.len() - k);
                prop_assert_eq!(starts.first().copied(), Some(k));
            }
            Err(_) => prop_assert!(rec.len() <= k),
        }
    }

    #[test]
    fn normalising_audio_twice_changes_nothing(x in prop::collection::vec(-100.0f64..100.0, 2..200)) {
        prop_assume!(x.iter().any(|v| (v - x[0]).abs() > 1e-6));
        let once = normalize_audio(&x).unwrap();
        let twice = normalize_audio(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn recording_files_round_trip(rec in recording()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.afr");
        write_recording(&path, &rec).unwrap();
        let back = read_recording(&path, Some(GEOMETRY)).unwrap();
        prop_assert_eq!(&back, &rec);
        let again = dir.path().join("r2.afr");
        write_recording(&again, &back).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn concordance_is_bounded_and_symmetric((x, y) in (2usize..50).prop_flat_map(series)) {
        let xy = ccc(&x, &y).unwrap().rho;
        let yx = ccc(&y, &x).unwrap().rho;
        prop_assert!((-1.0..=1.0).contains(&xy));
        prop_assert_eq!(xy, yx);
    }

    #[test]
    fn joint_error_is_at_most_the_sum(p in predictions()) {
        let col = |f: fn(&Prediction) -> f64| p.iter().map(f).collect::<Vec<_>>();
        let (ah, a, vh, v) = (col(|p| p.a_hat), col(|p| p.a), col(|p| p.v_hat), col(|p| p.v));
        let ea = rmse(&ah, &a).unwrap();
        let ev = rmse(&vh, &v).unwrap();
        let eav = rmse_joint(&ah, &a, &vh, &v).unwrap();
        prop_assert!(eav <= ea + ev + 1e-12);
        prop_assert!((eav * eav - (ea * ea + ev * ev)).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_row_order(p in predictions(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = p.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = EvalReport::from_predictions(&p, "x").unwrap();
        let b = EvalReport::from_predictions(&shuffled, "x").unwrap();
        for (u, v) in [
            (a.e_a, b.e_a),
            (a.e_v, b.e_v),
            (a.e_av, b.e_av),
            (a.ccc_arousal, b.ccc_arousal),
            (a.ccc_valence, b.ccc_valence),
        ] {
            prop_assert!((u - v).abs() < 1e-12, "{} vs {}", u, v);
        }
    }
}
