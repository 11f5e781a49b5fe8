//! Y-channel PSNR and SSIM of a checkpoint on a synthetic test set, next to
//! the bicubic baseline. Without a checkpoint the zero network is used,
//! which reproduces bicubic exactly.
//!
//! cargo run --release --example evaluate -- [checkpoint]

use candle_core::DType;
use fiwhn::checkpoint;
use fiwhn::datapipe::synthetic_corpus;
use fiwhn::evaluation::evaluate;
use fiwhn::{Fiwhn, FiwhnConfig};
use std::path::Path;

fn main() -> fiwhn::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => checkpoint::load_model(Path::new(&path), DType::F32)?,
        None => {
            let model = Fiwhn::new(&FiwhnConfig::toy(2), DType::F32, 0)?;
            model.store().zero_keep_residual_scalars()?;
            model
        }
    };
    let pairs = synthetic_corpus(4, 64, model.config().scale, 99)?;
    let report = evaluate(&model, &pairs, "synthetic")?;
    println!("{:<18} {:>9} {:>8} {:>9} {:>8}", "image", "psnr", "ssim", "bic psnr", "bic ssim");
    for r in &report.rows {
        println!("{:<18} {:>9.3} {:>8.4} {:>9.3} {:>8.4}", r.id, r.psnr_db, r.ssim, r.bicubic_psnr_db, r.bicubic_ssim);
    }
    println!("{:<18} {:>9.3} {:>8.4} {:>9.3} {:>8.4}", "mean", report.psnr_db, report.ssim, report.bicubic_psnr_db, report.bicubic_ssim);
    Ok(())
}
