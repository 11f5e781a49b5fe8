//! Upscale a PNG with a trained checkpoint and report how far the result
//! is from plain bicubic interpolation.
//!
//! cargo run --release --example super_resolve -- <checkpoint> <input.png> <output.png>

use candle_core::DType;
use fiwhn::checkpoint;
use fiwhn::datapipe::{load_png, save_png};
use fiwhn::evaluation::{bicubic_upscale, super_resolve};
use std::path::Path;

fn main() -> fiwhn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 4 {
        eprintln!("usage: super_resolve <checkpoint> <input.png> <output.png>");
        std::process::exit(2);
    }
    let model = checkpoint::load_model(Path::new(&args[1]), DType::F32)?;
    let scale = model.config().scale;
    let lr = load_png(Path::new(&args[2]))?;
    let (_, h, w) = lr.dim();

    let start = std::time::Instant::now();
    let sr = super_resolve(&model, &lr)?;
    println!("{w}x{h} -> {}x{} (x{scale}, {} topology) in {:.2}s", w * scale, h * scale, model.config().topology, start.elapsed().as_secs_f64());

    let bic = bicubic_upscale(&lr, scale)?;
    let diff = sr.iter().zip(bic.iter()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / sr.len() as f64;
    println!("mean |SR - bicubic| = {diff:.5}");
    save_png(&sr, Path::new(&args[3]))
}
