mod common;

use candle_core::DType;
use common::{grad_config, noise, oracle_psnr, oracle_ssim};
use fiwhn::checkpoint;
use fiwhn::datapipe::synthetic_corpus;
use fiwhn::evaluation::{
    ablate, complexity, evaluate, mean_sd, profile, psnr_y, rgb_to_y, ssim_y, AblationBudget, AblationSuite,
    LatencySpec, PROFILE_RESOLUTION,
};
use fiwhn::layers::{Conv2d, ConvOpts};
use fiwhn::params::ParamStore;
use fiwhn::training::TrainConfig;
use fiwhn::{build_topology, Fiwhn, FiwhnConfig, Topology};
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn luma_weights() {
    let img = Array3::from_shape_vec((3, 1, 3), vec![1f32, 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let y = rgb_to_y(&img);
    assert!((y[[0, 0]] - 0.299).abs() < 1e-12);
    assert!((y[[0, 1]] - 0.587).abs() < 1e-12);
    assert!((y[[0, 2]] - 0.114).abs() < 1e-12);
}

#[test]
fn psnr_of_a_uniform_offset() {
    // A shift of 16/255 on every channel of an 8-bit image shifts luma by the
    // same amount, so PSNR = 20·log10(255/16) ≈ 24.0484 dB.
    let hr = noise(20, 20, 1).mapv(|v| (v * 0.9 * 255.0).round() / 255.0);
    let sr = hr.mapv(|v| v + 16.0 / 255.0);
    let p = psnr_y(&sr, &hr, 2).unwrap();
    let want = 20.0 * (255.0f64 / 16.0).log10();
    assert!((want - 24.0484).abs() < 1e-4);
    assert!((p - want).abs() < 1e-4, "{p}");
}

#[test]
fn identical_images_are_perfect() {
    let a = noise(24, 30, 2);
    assert_eq!(psnr_y(&a, &a, 4).unwrap(), f64::INFINITY);
    assert!((ssim_y(&a, &a, 4).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn metrics_match_direct_oracles() {
    for seed in 0..20u64 {
        let (h, w) = (24 + (seed as usize % 5), 26 + (seed as usize % 7));
        let scale = 2 + (seed as usize % 3);
        let hr = noise(h, w, 100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amp = rng.random_range(0.01f32..0.3);
        let sr = hr.mapv(|v| (v + rng.random_range(-amp..amp)).clamp(0.0, 1.0));
        let p = psnr_y(&sr, &hr, scale).unwrap();
        assert!((p - oracle_psnr(&sr, &hr, scale)).abs() < 1e-9, "seed {seed}");
        let s = ssim_y(&sr, &hr, scale).unwrap();
        assert!((s - oracle_ssim(&sr, &hr, scale)).abs() < 1e-6, "seed {seed}");
    }
}

#[test]
fn ssim_of_two_constants() {
    // No variance and no covariance: SSIM = (2ab + C1) / (a² + b² + C1).
    let (a, b) = (0.4f32, 0.55f32);
    let x = Array3::from_elem((3, 16, 16), a);
    let y = Array3::from_elem((3, 16, 16), b);
    let (la, lb) = (rgb_to_y(&x)[[0, 0]], rgb_to_y(&y)[[0, 0]]);
    let c1 = 1e-4;
    let want = (2.0 * la * lb + c1) / (la * la + lb * lb + c1);
    assert!((ssim_y(&x, &y, 2).unwrap() - want).abs() < 1e-9);
}

#[test]
fn metric_input_errors() {
    let a = noise(20, 20, 3);
    assert!(psnr_y(&a, &noise(20, 21, 4), 2).is_err());
    assert!(psnr_y(&a, &a, 10).is_err());
    // 14 - 2·2 = 10 < 11: too small for the SSIM window.
    let small = noise(14, 14, 5);
    assert!(ssim_y(&small, &small, 2).is_err());
}

#[test]
fn single_conv_costs() {
    let store = ParamStore::new(DType::F32, 0);
    let conv = Conv2d::new(&store.root().pp("c"), 32, 32, 3, ConvOpts::default()).unwrap();
    let sheet = conv.cost(8, 8);
    assert_eq!(sheet.params(), 9_248);
    assert_eq!(sheet.multi_adds(), 589_824);
    assert_eq!(store.total_elements(), 9_248);
}

#[test]
fn profile_agrees_with_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let model = Fiwhn::new(&FiwhnConfig::default(), DType::F32, 0).unwrap();
    let path = dir.path().join("m.safetensors");
    checkpoint::save(&model, &path, None).unwrap();
    let report = complexity(&model, PROFILE_RESOLUTION);
    assert_eq!(report.params, checkpoint::element_count(&path).unwrap());
    assert_eq!(report.params, 737_996);
    assert_eq!(report.resolution, (1280, 720));
    let csv = report.layers_csv();
    assert!(csv.starts_with("layer,kind,params,multi_adds\n"));
    assert_eq!(csv.lines().count(), report.layers.len() + 1);
    let summed: usize = report.layers.iter().map(|l| l.params).sum();
    assert_eq!(summed, report.params);
    assert!(report.attention_macs > 0);
}

#[test]
fn multi_adds_scale_with_output_area() {
    // Everything except the gate convolutions on pooled 1×1 maps grows with
    // the pixel count.
    let model = Fiwhn::new(&FiwhnConfig::default(), DType::F32, 0).unwrap();
    let a = complexity(&model, (640, 360)).multi_adds as f64;
    let b = complexity(&model, (1280, 720)).multi_adds as f64;
    assert!((b / a - 4.0).abs() < 1e-5, "{}", b / a);
}

#[test]
fn latency_is_measured_when_asked() {
    let model = Fiwhn::new(&FiwhnConfig::toy(2), DType::F32, 0).unwrap();
    let report = profile(
        &model,
        (64, 64),
        Some(LatencySpec {
            input: (16, 12),
            runs: 3,
        }),
    )
    .unwrap();
    assert!(report.ms_per_image.unwrap() > 0.0);
    assert_eq!(report.latency_input, Some((16, 12)));
    assert!(profile(&model, (64, 64), None).unwrap().ms_per_image.is_none());
}

#[test]
fn zero_model_scores_as_bicubic() {
    let model = Fiwhn::new(&FiwhnConfig::toy(2), DType::F32, 0).unwrap();
    model.store().zero_all().unwrap();
    let pairs = synthetic_corpus(3, 40, 2, 11).unwrap();
    let report = evaluate(&model, &pairs, "synthetic").unwrap();
    assert_eq!(report.n_images, 3);
    assert_eq!(report.rows.len(), 3);
    assert!((report.psnr_db - report.bicubic_psnr_db).abs() < 1e-3);
    assert!((report.ssim - report.bicubic_ssim).abs() < 1e-5);
    let csv = report.to_csv();
    assert!(csv.lines().count() >= 4);
    let x3 = synthetic_corpus(1, 30, 3, 1).unwrap();
    assert!(evaluate(&model, &x3, "wrong scale").is_err());
}

#[test]
fn sample_statistics() {
    let (m, sd) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(mean_sd(&[7.0]), (7.0, 0.0));
}

#[test]
fn ablation_suites_enumerate_their_variants() {
    let base = FiwhnConfig::toy(2);
    let names = |s: AblationSuite| s.variants(&base).into_iter().map(|v| v.0).collect::<Vec<_>>();
    assert_eq!(names(AblationSuite::Topology), ["ct_series", "tc_series", "parallel", "interactive"]);
    assert_eq!(names(AblationSuite::WideWidth), ["plain", "wide_24", "wide_45"]);
    assert_eq!(
        names(AblationSuite::WdibParts),
        ["baseline", "+wrdc", "+scf", "+bi", "+adaptive", "full"]
    );
    assert_eq!(names(AblationSuite::WdibCount), ["wdib_x2", "wdib_x3", "wdib_x4"]);
    for suite in AblationSuite::ALL {
        assert_eq!(suite.name().parse::<AblationSuite>().unwrap(), suite);
        for (_, cfg) in suite.variants(&base) {
            cfg.validate().unwrap();
        }
    }
    assert!("everything".parse::<AblationSuite>().is_err());
}

#[test]
fn tiny_ablation_produces_a_ranked_table() {
    let budget = AblationBudget {
        base: grad_config(Topology::Interactive),
        train: TrainConfig {
            batch: 2,
            epochs: 1,
            steps_per_epoch: 2,
            lr_patch: 6,
            lr0: 1e-3,
            lr_min: 1e-5,
            ..TrainConfig::default()
        },
        seeds: vec![0, 1],
        train_images: 2,
        test_images: 1,
        hr_size: 32,
        data_seed: 1,
    };
    let table = ablate(AblationSuite::Topology, &budget).unwrap();
    assert_eq!(table.rows.len(), 4);
    let mut ranks: Vec<usize> = table.rows.iter().map(|r| r.rank).collect();
    ranks.sort();
    assert_eq!(ranks, [1, 2, 3, 4]);
    for row in &table.rows {
        assert_eq!(row.psnr_per_seed.len(), 2);
        assert!(row.psnr_mean.is_finite() && row.psnr_sd.is_finite());
        assert!(row.ssim_mean > 0.0 && row.ssim_mean <= 1.0);
        let model = build_topology(&budget.base, row.variant.parse().unwrap(), DType::F32, 0).unwrap();
        assert_eq!(row.params, model.num_params());
    }
    assert!(table.bicubic_psnr.is_finite());
    let csv = table.to_csv();
    assert!(csv.starts_with("variant,rank,params,multi_adds,psnr_mean,psnr_sd,ssim_mean,ssim_sd\n"));
    assert_eq!(csv.lines().count(), 5);
    let text = table.to_text();
    for t in Topology::ALL {
        assert!(text.contains(t.name()));
    }
    let dir = tempfile::tempdir().unwrap();
    table.write(dir.path()).unwrap();
    assert!(dir.path().join("ablation_topology.csv").is_file());
    assert!(dir.path().join("ablation_topology.txt").is_file());

    let empty = AblationBudget {
        seeds: vec![],
        ..budget
    };
    assert!(ablate(AblationSuite::Topology, &empty).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..1000, amp in 0.01f32..0.5) {
        let a = noise(24, 24, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let b = a.mapv(|v| (v + rng.random_range(-amp..amp)).clamp(0.0, 1.0));
        let ab = ssim_y(&a, &b, 2).unwrap();
        let ba = ssim_y(&b, &a, 2).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 && ab > -1.0);
        prop_assert!(psnr_y(&a, &b, 2).unwrap() > 0.0);
    }
}
