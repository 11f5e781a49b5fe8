//! Parameter and multi-add counts of the default model, the most expensive
//! layers, and a latency measurement on a small input.
//!
//! cargo run --release --example profile -- [scale]

use candle_core::DType;
use fiwhn::cli::profile_summary;
use fiwhn::evaluation::{profile, LatencySpec, PROFILE_RESOLUTION};
use fiwhn::{Fiwhn, FiwhnConfig};

fn main() -> fiwhn::Result<()> {
    let scale: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let cfg = FiwhnConfig::with_scale(scale);
    let model = Fiwhn::new(&cfg, DType::F32, 0)?;
    let latency = LatencySpec { input: (32, 32), runs: 5 };
    let report = profile(&model, PROFILE_RESOLUTION, Some(latency))?;
    print!("{}", profile_summary(&cfg, &report));

    let mut layers = report.layers.clone();
    layers.sort_by(|a, b| b.macs.cmp(&a.macs));
    println!("\nmost expensive layers:");
    for l in layers.iter().take(8) {
        println!("  {:<40} {:<10} {:>8} params {:>8.2}G", l.path, format!("{:?}", l.kind), l.params, l.macs as f64 / 1e9);
    }
    Ok(())
}
