//! Interrupt a run, resume it from its checkpoint, and check that the result
//! matches an uninterrupted run exactly.
//!
//! cargo run --release --example resume_training

use candle_core::DType;
use fiwhn::datapipe::synthetic_corpus;
use fiwhn::training::{train, TrainConfig, TrainOptions, CHECKPOINT_FILE, METRICS_FILE};
use fiwhn::{Fiwhn, FiwhnConfig};

fn main() -> fiwhn::Result<()> {
    let corpus = synthetic_corpus(4, 32, 2, 5)?;
    let cfg = TrainConfig {
        batch: 2,
        steps_per_epoch: 20,
        lr_patch: 8,
        lr0: 1e-3,
        lr_min: 1e-5,
        ..TrainConfig::default()
    };
    let dir = std::env::temp_dir().join(format!("fiwhn_resume_{}", std::process::id()));
    let (full, split) = (dir.join("full"), dir.join("split"));

    let a = Fiwhn::new(&FiwhnConfig::toy(2), DType::F32, 0)?;
    train(&a, &corpus, &cfg, &TrainOptions { out_dir: Some(full.clone()), ..Default::default() })?;

    let b = Fiwhn::new(&FiwhnConfig::toy(2), DType::F32, 0)?;
    let first = TrainOptions { out_dir: Some(split.clone()), stop_after: Some(8), ..Default::default() };
    train(&b, &corpus, &cfg, &first)?;
    println!("stopped after 8 of {} steps", cfg.total_steps());

    let c = Fiwhn::new(&FiwhnConfig::toy(2), DType::F32, 0)?;
    let resume = TrainOptions {
        out_dir: Some(split.clone()),
        resume: Some(split.join(CHECKPOINT_FILE)),
        ..Default::default()
    };
    let report = train(&c, &corpus, &cfg, &resume)?;
    println!("resumed at step {} and ran to {}", report.start_step, report.total_steps);

    let same_metrics = std::fs::read(full.join(METRICS_FILE)).ok() == std::fs::read(split.join(METRICS_FILE)).ok();
    let mut max_diff = 0f32;
    for (name, va) in a.store().vars() {
        let vc = c.store().get(&name).expect("same architecture");
        let d = (va.as_tensor() - vc.as_tensor())?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?;
        max_diff = max_diff.max(d);
    }
    println!("metrics.csv identical: {same_metrics}, max parameter difference: {max_diff:e}");
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
