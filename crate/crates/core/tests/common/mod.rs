#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use fiwhn::core_blocks::{UnitKind, WdibConfig};
use fiwhn::datapipe::Image;
use fiwhn::params::ParamStore;
use fiwhn::transformer::EtConfig;
use fiwhn::{FiwhnConfig, Topology};
use rand::{Rng, SeedableRng};
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64, dtype: DType) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    to_vec(a)
        .iter()
        .zip(to_vec(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Gradient-check configuration: 1 FSWG × 1 WDIB, 1 ET, C = 8, D = 16.
pub fn grad_config(topology: Topology) -> FiwhnConfig {
    FiwhnConfig {
        scale: 2,
        n_fswg: 1,
        wdibs_per_fswg: 1,
        n_et: 1,
        topology,
        wdib: WdibConfig {
            channels: 8,
            wide_channels: 16,
            ccl_reduction: 4,
            ..WdibConfig::default()
        },
        et: EtConfig {
            dim: 16,
            heads: 2,
            splits: 4,
            mlp_ratio: 2.0,
        },
        ..FiwhnConfig::default()
    }
}

pub fn small_wdib(unit: UnitKind) -> WdibConfig {
    WdibConfig {
        channels: 8,
        wide_channels: 16,
        ccl_reduction: 4,
        unit,
        ..WdibConfig::default()
    }
}

/// One coordinate of a finite-difference check.
#[derive(Debug, Clone)]
pub struct FdPoint {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// One-sided differences disagree: the coordinate sits on a kink.
    pub kink: bool,
}

pub const FD_EPS: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

fn get_elem(var: &Var, index: usize) -> f64 {
    to_vec(var.as_tensor())[index]
}

fn set_elem(var: &Var, index: usize, value: f64) {
    let mut data = to_vec(var.as_tensor());
    data[index] = value;
    let t = Tensor::from_vec(data, var.shape(), &Device::Cpu)
        .unwrap()
        .to_dtype(var.dtype())
        .unwrap();
    var.set(&t).unwrap();
}

/// Compare autodiff gradients of `loss` with central differences at the
/// given `(parameter, flat index)` coordinates.
pub fn fd_check(
    store: &ParamStore,
    coords: &[(String, usize)],
    loss: &dyn Fn() -> Tensor,
) -> Vec<FdPoint> {
    fd_check_with_step(store, coords, loss, FD_EPS)
}

pub fn fd_check_with_step(
    store: &ParamStore,
    coords: &[(String, usize)],
    loss: &dyn Fn() -> Tensor,
    eps: f64,
) -> Vec<FdPoint> {
    let l = loss();
    let grads = l.backward().unwrap();
    let eval = || loss().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    let l0 = eval();
    coords
        .iter()
        .map(|(name, index)| {
            let var = store.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
            let analytic = grads
                .get(&var)
                .map(|g| to_vec(g)[*index])
                .unwrap_or(0.0);
            let orig = get_elem(&var, *index);
            set_elem(&var, *index, orig + eps);
            let lp = eval();
            set_elem(&var, *index, orig - eps);
            let lm = eval();
            set_elem(&var, *index, orig);
            let numeric = (lp - lm) / (2.0 * eps);
            let fwd = (lp - l0) / eps;
            let bwd = (l0 - lm) / eps;
            let kink = (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()) + 1e-4;
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            FdPoint {
                name: name.clone(),
                index: *index,
                analytic,
                numeric,
                rel_err,
                kink,
            }
        })
        .collect()
}

/// Fourth-order central difference `(−f(+2h) + 8f(+h) − 8f(−h) + f(−2h)) / 12h`
/// at one coordinate. Resolves gradients far below what a two-point
/// difference can in f64.
pub fn five_point(store: &ParamStore, name: &str, index: usize, loss: &dyn Fn() -> Tensor, h: f64) -> f64 {
    let var = store.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let orig = get_elem(&var, index);
    let at = |d: f64| {
        set_elem(&var, index, orig + d);
        loss().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    };
    let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
    set_elem(&var, index, orig);
    (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
}

/// Coordinates covering every element of the parameters selected by
/// `always`, plus `extra` random coordinates from the rest.
pub fn sample_coords(
    store: &ParamStore,
    always: &dyn Fn(&str) -> bool,
    extra: usize,
    seed: u64,
) -> Vec<(String, usize)> {
    let mut coords = Vec::new();
    let mut rest = Vec::new();
    for (name, var) in store.vars() {
        let n = var.elem_count();
        if always(&name) {
            coords.extend((0..n).map(|i| (name.clone(), i)));
        } else {
            rest.push((name, n));
        }
    }
    let total: usize = rest.iter().map(|r| r.1).sum();
    let mut r = rng(seed);
    for _ in 0..extra.min(total) {
        let mut k = r.random_range(0..total);
        for (name, n) in &rest {
            if k < *n {
                coords.push((name.clone(), k));
                break;
            }
            k -= n;
        }
    }
    coords
}

/// Smooth scalar loss `Σ out ⊙ w` with fixed random weights.
pub fn linear_functional(out: &Tensor, seed: u64) -> Tensor {
    let w = uniform(out.dims(), seed, -1.0, 1.0, out.dtype());
    (out * w).unwrap().sum_all().unwrap()
}

pub fn summarize(points: &[FdPoint]) -> (f64, usize, usize) {
    let checked: Vec<&FdPoint> = points.iter().filter(|p| !p.kink).collect();
    let worst = checked.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    (worst, checked.len(), points.len() - checked.len())
}

pub fn noise(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.0f32..1.0))
}

pub fn luma(img: &Image, y: usize, x: usize) -> f64 {
    0.299 * img[[0, y, x]] as f64 + 0.587 * img[[1, y, x]] as f64 + 0.114 * img[[2, y, x]] as f64
}

pub fn oracle_psnr(a: &Image, b: &Image, border: usize) -> f64 {
    let (_, h, w) = a.dim();
    let mut se = 0.0;
    let mut n = 0.0;
    for y in border..h - border {
        for x in border..w - border {
            se += (luma(a, y, x) - luma(b, y, x)).powi(2);
            n += 1.0;
        }
    }
    -10.0 * (se / n).log10()
}

/// Windowed statistics computed directly over each 11×11 neighbourhood.
pub fn oracle_ssim(a: &Image, b: &Image, border: usize) -> f64 {
    let (_, h, w) = a.dim();
    let g1: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let mut win = [[0.0; 11]; 11];
    let mut z = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            win[i][j] = g1[i] * g1[j];
            z += win[i][j];
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (y0, x0) = (border, border);
    let (ch, cw) = (h - 2 * border, w - 2 * border);
    let mut total = 0.0;
    let mut count = 0.0;
    for oy in 0..=ch - 11 {
        for ox in 0..=cw - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = win[i][j] / z;
                    let va = luma(a, y0 + oy + i, x0 + ox + j);
                    let vb = luma(b, y0 + oy + i, x0 + ox + j);
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    total / count
}
