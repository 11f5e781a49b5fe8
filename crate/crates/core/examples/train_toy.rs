//! Train the toy x2 model on synthetic band-limited images and compare it
//! with bicubic upscaling on a held-out set.
//!
//! cargo run --release --example train_toy -- [out_dir] [steps]

use candle_core::DType;
use fiwhn::datapipe::synthetic_corpus;
use fiwhn::evaluation::evaluate;
use fiwhn::training::{train, TrainConfig, TrainOptions};
use fiwhn::{Fiwhn, FiwhnConfig};

fn main() -> fiwhn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out_dir = args.get(1).map(std::path::PathBuf::from);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);

    let train_set = synthetic_corpus(8, 64, 2, 1)?;
    let test_set = synthetic_corpus(4, 64, 2, 99)?;
    let model = Fiwhn::new(&FiwhnConfig::toy(2), DType::F32, 0)?;
    println!("toy x2 model: {} params", model.num_params());

    let cfg = TrainConfig {
        batch: 4,
        steps_per_epoch: steps,
        lr_patch: 16,
        ..TrainConfig::default()
    };
    let opts = TrainOptions {
        out_dir: out_dir.clone(),
        ..TrainOptions::default()
    };
    let start = std::time::Instant::now();
    let report = train(&model, &train_set, &cfg, &opts)?;
    for (step, lr, loss) in report.history.iter().filter(|h| h.0 % 25 == 0 || h.0 == 1) {
        println!("step {step:4}  lr {lr:.2e}  loss {loss:.5}");
    }
    println!("trained {steps} steps in {:.1}s", start.elapsed().as_secs_f64());

    let m = evaluate(&model, &test_set, "held-out")?;
    println!(
        "held-out PSNR {:.3} dB (bicubic {:.3} dB), SSIM {:.4} (bicubic {:.4})",
        m.psnr_db, m.bicubic_psnr_db, m.ssim, m.bicubic_ssim
    );
    if let Some(path) = report.checkpoint {
        println!("checkpoint written to {}", path.display());
    }
    Ok(())
}
