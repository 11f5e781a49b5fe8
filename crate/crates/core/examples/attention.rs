//! Split-token attention: each of the n groups attends only within itself,
//! so the score matrix shrinks from T² to T²/n entries per head.
//!
//! cargo run --release --example attention

use candle_core::{DType, Device, Tensor};
use fiwhn::transformer::{attention_entries_per_head, dense_attention, split_attention, split_attention_with_weights};

fn main() -> fiwhn::Result<()> {
    let dev = Device::Cpu;
    let (t, d, heads) = (1024, 32, 4);
    let q = Tensor::randn(0f32, 1.0, (1, t, d), &dev)?;
    let k = Tensor::randn(0f32, 1.0, (1, t, d), &dev)?;
    let v = Tensor::randn(0f32, 1.0, (1, t, d), &dev)?;

    let dense = dense_attention(&q, &k, &v, heads)?;
    let one = split_attention(&q, &k, &v, heads, 1)?;
    let diff = (dense - one)?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("n = 1 vs dense: max |diff| = {diff:.2e}");

    println!("{:>6} {:>12} {:>10}", "splits", "entries/head", "time");
    for splits in [1, 2, 4, 8, 16] {
        let start = std::time::Instant::now();
        split_attention(&q, &k, &v, heads, splits)?;
        println!(
            "{splits:>6} {:>12} {:>8.1}ms",
            attention_entries_per_head(t, splits),
            start.elapsed().as_secs_f64() * 1e3
        );
    }

    // Token counts that do not divide evenly are padded, and the padding is masked.
    let out = split_attention_with_weights(&q.narrow(1, 0, 1000)?, &k.narrow(1, 0, 1000)?, &v.narrow(1, 0, 1000)?, heads, 16)?;
    let rows = out.weights.sum(4)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let worst = rows.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    println!("1000 tokens in 16 groups: padded to {}, worst row-sum error {worst:.1e}", out.padded_tokens);
    Ok(())
}
