//! Separable bicubic resampling (Keys kernel, `a = -0.5`).
//!
//! Pixel `j` covers `[j, j + 1)`; output pixel `i` is centred at
//! `(i + 0.5) · in / out`. On downscale the kernel is stretched by the scale
//! factor (antialias), and every row of weights is normalised to sum to one.
//! Out-of-range taps are clamped to the border pixel.

use candle_core::Tensor;
use ndarray::Array3;

use crate::error::{Error, Result};

pub const CUBIC_A: f64 = -0.5;

pub fn cubic(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Sparse resampling weights: for each output index, `(input index, weight)`.
pub fn resize_weights(in_len: usize, out_len: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if in_len == 0 || out_len == 0 {
        return Err(Error::config(format!(
            "cannot resize {in_len} samples to {out_len}"
        )));
    }
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    let mut rows = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let center = (i as f64 + 0.5) * scale;
        let lo = (center - support).floor() as i64 - 1;
        let hi = (center + support).ceil() as i64 + 1;
        let mut taps: Vec<(usize, f64)> = Vec::new();
        let mut total = 0.0;
        for j in lo..=hi {
            let w = cubic((j as f64 + 0.5 - center) / stretch);
            if w == 0.0 {
                continue;
            }
            let idx = j.clamp(0, in_len as i64 - 1) as usize;
            total += w;
            match taps.iter_mut().find(|(k, _)| *k == idx) {
                Some(t) => t.1 += w,
                None => taps.push((idx, w)),
            }
        }
        for t in &mut taps {
            t.1 /= total;
        }
        rows.push(taps);
    }
    Ok(rows)
}

/// Dense `[out_len, in_len]` weight matrix, row-major.
pub fn resize_matrix(in_len: usize, out_len: usize) -> Result<Vec<f64>> {
    let rows = resize_weights(in_len, out_len)?;
    let mut m = vec![0.0; out_len * in_len];
    for (i, taps) in rows.iter().enumerate() {
        for &(j, w) in taps {
            m[i * in_len + j] += w;
        }
    }
    Ok(m)
}

/// Resize a `[C, H, W]` image.
pub fn bicubic_resize(img: &Array3<f32>, out_h: usize, out_w: usize) -> Result<Array3<f32>> {
    let (c, h, w) = img.dim();
    if out_h == 0 || out_w == 0 {
        return Err(Error::config(format!("zero-size output {out_h}x{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let rows_w = resize_weights(w, out_w)?;
    let rows_h = resize_weights(h, out_h)?;
    // Horizontal pass in f64, then vertical.
    let mut tmp = vec![0f64; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            for (x, taps) in rows_w.iter().enumerate() {
                let mut acc = 0.0;
                for &(j, wgt) in taps {
                    acc += wgt * img[[ch, y, j]] as f64;
                }
                tmp[(ch * h + y) * out_w + x] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (y, taps) in rows_h.iter().enumerate() {
            for x in 0..out_w {
                let mut acc = 0.0;
                for &(j, wgt) in taps {
                    acc += wgt * tmp[(ch * h + j) * out_w + x];
                }
                out[[ch, y, x]] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Differentiable bicubic resize of a `[N, C, H, W]` tensor by two matrix
/// products.
pub fn bicubic_resize_tensor(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dev = x.device();
    let dt = x.dtype();
    let mw = Tensor::from_vec(resize_matrix(w, out_w)?, (out_w, w), dev)?.to_dtype(dt)?;
    let mh = Tensor::from_vec(resize_matrix(h, out_h)?, (out_h, h), dev)?.to_dtype(dt)?;
    let y = x.broadcast_matmul(&mw.t()?)?;
    Ok(mh.broadcast_matmul(&y)?)
}
