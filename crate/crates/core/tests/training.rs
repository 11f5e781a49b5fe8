mod common;

use std::fs;

use candle_core::{DType, Device, Tensor, Var};
use common::*;
use fiwhn::checkpoint;
use fiwhn::datapipe::synthetic_corpus;
use fiwhn::training::{
    cosine_lr, l1_loss, make_batch, train, Adam, TrainConfig, TrainOptions, CHECKPOINT_FILE, METRICS_FILE,
    TIMINGS_FILE,
};
use fiwhn::{Error, Fiwhn, Topology};
use proptest::prelude::*;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        lr0: 1e-3,
        lr_min: 1e-5,
        batch: 2,
        epochs: 2,
        steps_per_epoch: 3,
        lr_patch: 6,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn tiny_model() -> Fiwhn {
    Fiwhn::new(&grad_config(Topology::Interactive), DType::F32, 1).unwrap()
}

fn snapshot(model: &Fiwhn) -> Vec<(String, Vec<f64>)> {
    model
        .store()
        .vars()
        .into_iter()
        .map(|(n, v)| (n, to_vec(v.as_tensor())))
        .collect()
}

#[test]
fn l1_hand_cases() {
    let a = uniform(&[2, 3, 4, 4], 1, 0.0, 1.0, DType::F64);
    let zero = l1_loss(&a, &a).unwrap().to_scalar::<f64>().unwrap();
    assert_eq!(zero, 0.0);
    let shifted = (&a + 0.1).unwrap();
    let l = l1_loss(&shifted, &a).unwrap().to_scalar::<f64>().unwrap();
    assert!((l - 0.1).abs() < 1e-12);
    assert!(l1_loss(&a, &a.narrow(3, 0, 2).unwrap()).is_err());
}

#[test]
fn l1_matches_elementwise_mean() {
    // f64 to the stated tolerance; f32 only to its own accumulation error.
    for (dtype, tol) in [(DType::F64, 1e-7), (DType::F32, 4e-6)] {
        for seed in 0..5 {
            let a = uniform(&[3, 3, 5, 7], seed, -1.0, 2.0, dtype);
            let b = uniform(&[3, 3, 5, 7], seed + 100, -1.0, 2.0, dtype);
            let (va, vb) = (to_vec(&a), to_vec(&b));
            let want = va.iter().zip(&vb).map(|(x, y)| (x - y).abs()).sum::<f64>() / va.len() as f64;
            let got = l1_loss(&a, &b).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
            assert!((got - want).abs() < tol, "{dtype:?}: {got} vs {want}");
        }
    }
}

#[test]
fn cosine_schedule_shape() {
    let (lr0, lr_min) = (5e-4, 6.25e-6);
    assert_eq!(cosine_lr(0, 1000, lr0, lr_min).unwrap(), lr0);
    assert!((cosine_lr(1000, 1000, lr0, lr_min).unwrap() - lr_min).abs() < 1e-18);
    assert!((cosine_lr(500, 1000, lr0, lr_min).unwrap() - 0.5 * (lr0 + lr_min)).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for s in 0..=1000 {
        let lr = cosine_lr(s, 1000, lr0, lr_min).unwrap();
        assert!(lr <= prev && lr >= lr_min);
        prev = lr;
    }
    assert!(cosine_lr(1001, 1000, lr0, lr_min).is_err());
}

#[test]
fn adam_first_steps_by_hand() {
    // Constant gradient g: m̂ = g and v̂ = g² at every step, so each update is
    // lr · g / (|g| + eps).
    let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
    let mut adam = Adam::new(vec![("x".into(), x.clone())], 0.9, 0.999, 1e-8).unwrap();
    let coef = Tensor::new(&[3.0f64, -0.5], &Device::Cpu).unwrap();
    for step in 1..=3 {
        let loss = (x.as_tensor() * &coef).unwrap().sum_all().unwrap();
        adam.step(&loss.backward().unwrap(), 0.1, None).unwrap();
        let got = to_vec(x.as_tensor());
        let u0 = 0.1 * 3.0 / (3.0 + 1e-8);
        let u1 = 0.1 * -0.5 / (0.5 + 1e-8);
        assert!((got[0] - (1.0 - step as f64 * u0)).abs() < 1e-12);
        assert!((got[1] - (-2.0 - step as f64 * u1)).abs() < 1e-12);
    }
    assert_eq!(adam.steps(), 3);
}

#[test]
fn adam_state_round_trip() {
    let mk = || Var::from_tensor(&Tensor::new(&[0.5f64, 1.5, -1.0], &Device::Cpu).unwrap()).unwrap();
    let coef = Tensor::new(&[1.0f64, -2.0, 0.3], &Device::Cpu).unwrap();
    let loss = |x: &Var| x.as_tensor().sqr().unwrap().mul(&coef).unwrap().sum_all().unwrap();

    let a = mk();
    let mut opt_a = Adam::new(vec![("x".into(), a.clone())], 0.9, 0.999, 1e-8).unwrap();
    for _ in 0..5 {
        opt_a.step(&loss(&a).backward().unwrap(), 0.05, None).unwrap();
    }

    let b = mk();
    let mut opt_b = Adam::new(vec![("x".into(), b.clone())], 0.9, 0.999, 1e-8).unwrap();
    for _ in 0..2 {
        opt_b.step(&loss(&b).backward().unwrap(), 0.05, None).unwrap();
    }
    let state = opt_b.state(2, None);
    let c = Var::from_tensor(b.as_tensor()).unwrap();
    let mut opt_c = Adam::new(vec![("x".into(), c.clone())], 0.9, 0.999, 1e-8).unwrap();
    opt_c.restore(&state).unwrap();
    for _ in 0..3 {
        opt_c.step(&loss(&c).backward().unwrap(), 0.05, None).unwrap();
    }
    assert_eq!(to_vec(a.as_tensor()), to_vec(c.as_tensor()));
}

#[test]
fn gradient_clipping_bounds_the_step_norm() {
    // With clipping the moments see the rescaled gradient; after one step
    // Adam's update is still ±lr per coordinate, so compare the moments.
    let x = Var::from_tensor(&Tensor::new(&[0.0f64, 0.0], &Device::Cpu).unwrap()).unwrap();
    let mut adam = Adam::new(vec![("x".into(), x.clone())], 0.9, 0.999, 1e-8).unwrap();
    let coef = Tensor::new(&[30.0f64, 40.0], &Device::Cpu).unwrap();
    let loss = (x.as_tensor() * &coef).unwrap().sum_all().unwrap();
    adam.step(&loss.backward().unwrap(), 0.1, Some(5.0)).unwrap();
    let m = to_vec(&adam.state(1, None).m["x"]);
    assert!((m[0] - 0.1 * 3.0).abs() < 1e-12);
    assert!((m[1] - 0.1 * 4.0).abs() < 1e-12);
}

#[test]
fn batches_are_deterministic_and_well_formed() {
    let model = tiny_model();
    let corpus = synthetic_corpus(4, 32, 2, 1).unwrap();
    let cfg = tiny_config();
    let a = make_batch(&model, &corpus, &cfg, 4).unwrap();
    let b = make_batch(&model, &corpus, &cfg, 4).unwrap();
    assert_eq!(a.lr.dims(), &[2, 3, 6, 6]);
    assert_eq!(a.hr.dims(), &[2, 3, 12, 12]);
    assert_eq!(a.ids, b.ids);
    assert_eq!(to_vec(&a.hr), to_vec(&b.hr));
    let c = make_batch(&model, &corpus, &cfg, 5).unwrap();
    assert_ne!(a.ids, c.ids);
    assert!(to_vec(&a.lr).iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn zero_epochs_leaves_weights_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model();
    let before = snapshot(&model);
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_config()
    };
    let corpus = synthetic_corpus(2, 32, 2, 1).unwrap();
    let report = train(
        &model,
        &corpus,
        &cfg,
        &TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert!(report.history.is_empty());
    assert_eq!(snapshot(&model), before);
    let reloaded = checkpoint::load_model(&dir.path().join(CHECKPOINT_FILE), DType::F32).unwrap();
    assert_eq!(snapshot(&reloaded), before);
    assert_eq!(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), "step,lr,loss\n");
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let corpus = synthetic_corpus(3, 32, 2, 2).unwrap();
    let cfg = tiny_config();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let report = train(
            &model,
            &corpus,
            &cfg,
            &TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let metrics = fs::read(dir.path().join(METRICS_FILE)).unwrap();
        assert!(dir.path().join(TIMINGS_FILE).is_file());
        (report.losses(), metrics, snapshot(&model))
    };
    let (la, ma, pa) = run();
    let (lb, mb, pb) = run();
    assert_eq!(la.len(), 6);
    assert_eq!(la.iter().map(|l| l.to_bits()).collect::<Vec<_>>(), lb.iter().map(|l| l.to_bits()).collect::<Vec<_>>());
    assert_eq!(ma, mb);
    assert_eq!(pa, pb);
    let text = String::from_utf8(ma).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,lr,loss");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("1,1e-3,"));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let corpus = synthetic_corpus(3, 32, 2, 3).unwrap();
    let cfg = tiny_config();

    let full_dir = tempfile::tempdir().unwrap();
    let full = tiny_model();
    train(
        &full,
        &corpus,
        &cfg,
        &TrainOptions {
            out_dir: Some(full_dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = tiny_model();
    let part = train(
        &first,
        &corpus,
        &cfg,
        &TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            stop_after: Some(4),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(part.history.len(), 4);
    let ckpt = checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.train.as_ref().unwrap().step, 4);

    // A fresh process: new model with a different init, state comes from disk.
    let second = Fiwhn::new(&grad_config(Topology::Interactive), DType::F32, 99).unwrap();
    let rest = train(
        &second,
        &corpus,
        &cfg,
        &TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: Some(dir.path().join(CHECKPOINT_FILE)),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(rest.start_step, 4);
    assert_eq!(rest.history.len(), 2);
    assert_eq!(snapshot(&second), snapshot(&full));
    assert_eq!(
        fs::read(dir.path().join(METRICS_FILE)).unwrap(),
        fs::read(full_dir.path().join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn resume_rejects_a_different_model() {
    let corpus = synthetic_corpus(2, 32, 2, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model();
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: 1,
        ..tiny_config()
    };
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    train(&model, &corpus, &cfg, &opts).unwrap();
    let other = Fiwhn::new(&grad_config(Topology::Parallel), DType::F32, 1).unwrap();
    let err = train(
        &other,
        &corpus,
        &cfg,
        &TrainOptions {
            resume: Some(dir.path().join(CHECKPOINT_FILE)),
            ..TrainOptions::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn non_finite_loss_is_reported_with_the_batch() {
    let corpus = synthetic_corpus(2, 32, 2, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model();
    model.store().fill("recon.bias", f64::NAN).unwrap();
    let err = train(
        &model,
        &corpus,
        &tiny_config(),
        &TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap_err();
    match err {
        Error::NonFiniteLoss { step, batch_ids, .. } => {
            assert_eq!(step, 1);
            assert_eq!(batch_ids.len(), 2);
        }
        other => panic!("unexpected {other}"),
    }
    let dump = fs::read_to_string(dir.path().join("nonfinite_batch.txt")).unwrap();
    assert!(dump.contains("synthetic_5_"));
}

#[test]
fn empty_corpus_and_bad_config_are_rejected() {
    let model = tiny_model();
    assert!(train(&model, &[], &tiny_config(), &TrainOptions::default()).is_err());
    let corpus = synthetic_corpus(1, 32, 2, 6).unwrap();
    let bad = TrainConfig {
        lr_patch: 20,
        ..tiny_config()
    };
    assert!(train(&model, &corpus, &bad, &TrainOptions::default()).is_err());
    let bad = TrainConfig {
        batch: 0,
        ..tiny_config()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn every_residual_scalar_receives_gradient() {
    let model = Fiwhn::new(&grad_config(Topology::Interactive), DType::F64, 2).unwrap();
    let img = uniform(&[1, 3, 6, 6], 7, 0.0, 1.0, DType::F64);
    let target = uniform(&[1, 3, 12, 12], 8, 0.0, 1.0, DType::F64);
    let loss = l1_loss(&model.forward(&img).unwrap(), &target).unwrap();
    let grads = loss.backward().unwrap();
    let mut seen = 0;
    for (name, var) in model.store().vars() {
        if name.contains("lambda") {
            let g = grads.get(&var).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(to_vec(g).iter().all(|v| *v != 0.0), "{name} gradient is zero");
            seen += 1;
        }
    }
    // 4 per WDIB, 2 per FSWG.
    assert_eq!(seen, 6);
}

#[test]
fn short_overfit_reduces_loss() {
    let corpus = synthetic_corpus(1, 32, 2, 9).unwrap();
    let model = tiny_model();
    let cfg = TrainConfig {
        lr0: 2e-3,
        lr_min: 2e-5,
        batch: 2,
        epochs: 1,
        steps_per_epoch: 40,
        lr_patch: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    let losses = train(&model, &corpus, &cfg, &TrainOptions::default()).unwrap().losses();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[35..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_stays_between_bounds(step in 0usize..500, extra in 0usize..500, lr0 in 1e-5f64..1e-2, ratio in 1.01f64..1000.0) {
        let total = step + extra + 1;
        let lr_min = lr0 / ratio;
        let lr = cosine_lr(step, total, lr0, lr_min).unwrap();
        prop_assert!(lr <= lr0 * (1.0 + 1e-12) && lr >= lr_min * (1.0 - 1e-12));
    }
}
