//! Y-channel PSNR/SSIM, closed-form complexity profiling with measured
//! latency, and the ablation runner.
//!
//! Luma uses the BT.601 full-range weights `Y = 0.2990 R + 0.5870 G + 0.1140 B`
//! on `[0, 1]` RGB. Both metrics crop `scale` pixels from every border first.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::bicubic::bicubic_resize;
use crate::checkpoint::write_atomic;
use crate::complexity::{CostKind, CostSheet, LayerCost};
use crate::core_blocks::UnitKind;
use crate::datapipe::{from_tensor, synthetic_corpus, to_tensor, Image, ImagePair};
use crate::error::{Error, Result};
use crate::network::{Fiwhn, FiwhnConfig, Topology};
use crate::training::{train, TrainConfig, TrainOptions};

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Luma plane of a `[3, H, W]` image, in f64.
pub fn rgb_to_y(img: &Image) -> Array2<f64> {
    let (_, h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        LUMA[0] * img[[0, y, x]] as f64 + LUMA[1] * img[[1, y, x]] as f64 + LUMA[2] * img[[2, y, x]] as f64
    })
}

fn cropped_y(sr: &Image, hr: &Image, border: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if sr.dim() != hr.dim() {
        return Err(Error::shape(format!(
            "sr {:?} vs hr {:?}",
            sr.dim(),
            hr.dim()
        )));
    }
    if sr.dim().0 != 3 {
        return Err(Error::shape("metrics expect RGB images"));
    }
    let (_, h, w) = sr.dim();
    if h <= 2 * border || w <= 2 * border {
        return Err(Error::shape(format!(
            "{h}x{w} image leaves nothing after a {border}-pixel border crop"
        )));
    }
    let crop = |img: &Image| rgb_to_y(img).slice(s![border..h - border, border..w - border]).to_owned();
    Ok((crop(sr), crop(hr)))
}

/// PSNR of the luma channel in dB; identical images give `f64::INFINITY`.
pub fn psnr_y(sr: &Image, hr: &Image, scale: usize) -> Result<f64> {
    let (a, b) = cropped_y(sr, hr, scale)?;
    let mse = (&a - &b).mapv(|d| d * d).mean().unwrap_or(0.0);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" Gaussian filter.
fn filter_valid(x: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let k = g.len();
    let (h, w) = x.dim();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for xo in 0..ow {
            rows[[y, xo]] = (0..k).map(|i| g[i] * x[[y, xo + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for yo in 0..oh {
        for xo in 0..ow {
            out[[yo, xo]] = (0..k).map(|i| g[i] * rows[[yo + i, xo]]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma channel (11×11 Gaussian window, σ = 1.5, dynamic
/// range 1, valid-region average).
pub fn ssim_y(sr: &Image, hr: &Image, scale: usize) -> Result<f64> {
    let (a, b) = cropped_y(sr, hr, scale)?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "{h}x{w} luma plane is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = filter_valid(&a, &g);
    let mu_b = filter_valid(&b, &g);
    let aa = filter_valid(&(&a * &a), &g);
    let bb = filter_valid(&(&b * &b), &g);
    let ab = filter_valid(&(&a * &b), &g);
    let mut total = 0.0;
    for ((((&ma, &mb), &saa), &sbb), &sab) in mu_a.iter().zip(&mu_b).zip(&aa).zip(&bb).zip(&ab) {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetric {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub bicubic_psnr_db: f64,
    pub bicubic_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub scale: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub bicubic_psnr_db: f64,
    pub bicubic_ssim: f64,
    pub n_images: usize,
    pub rows: Vec<ImageMetric>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim,bicubic_psnr_db,bicubic_ssim\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.id, r.psnr_db, r.ssim, r.bicubic_psnr_db, r.bicubic_ssim
            );
        }
        out
    }
}

/// Super-resolve one `[3, h, w]` image; the result is clamped to `[0, 1]`.
pub fn super_resolve(model: &Fiwhn, lr: &Image) -> Result<Image> {
    let x = to_tensor(&[lr], model.dtype())?;
    let y = model.forward(&x)?.clamp(0.0, 1.0)?;
    Ok(from_tensor(&y)?.remove(0))
}

pub fn bicubic_upscale(lr: &Image, scale: usize) -> Result<Image> {
    let (_, h, w) = lr.dim();
    Ok(bicubic_resize(lr, h * scale, w * scale)?.mapv(|v| v.clamp(0.0, 1.0)))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Evaluate a model on a set of pairs alongside the bicubic baseline.
pub fn evaluate(model: &Fiwhn, pairs: &[ImagePair], dataset: &str) -> Result<MetricReport> {
    let scale = model.config().scale;
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.scale != scale {
            return Err(Error::config(format!(
                "{} is a x{} pair but the model is x{scale}",
                pair.id, pair.scale
            )));
        }
        let sr = super_resolve(model, &pair.lr)?;
        let bic = bicubic_upscale(&pair.lr, scale)?;
        rows.push(ImageMetric {
            id: pair.id.clone(),
            psnr_db: psnr_y(&sr, &pair.hr, scale)?,
            ssim: ssim_y(&sr, &pair.hr, scale)?,
            bicubic_psnr_db: psnr_y(&bic, &pair.hr, scale)?,
            bicubic_ssim: ssim_y(&bic, &pair.hr, scale)?,
        });
    }
    Ok(MetricReport {
        dataset: dataset.to_string(),
        scale,
        psnr_db: mean(rows.iter().map(|r| r.psnr_db)),
        ssim: mean(rows.iter().map(|r| r.ssim)),
        bicubic_psnr_db: mean(rows.iter().map(|r| r.bicubic_psnr_db)),
        bicubic_ssim: mean(rows.iter().map(|r| r.bicubic_ssim)),
        n_images: rows.len(),
        rows,
    })
}

/// Output resolution used for headline complexity numbers.
pub const PROFILE_RESOLUTION: (usize, usize) = (1280, 720);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub params: usize,
    /// Convolution and linear-layer multiply-adds at `resolution`.
    pub multi_adds: u64,
    /// Attention score and weighted-sum multiply-adds, reported separately.
    pub attention_macs: u64,
    /// Median latency, when measured.
    pub ms_per_image: Option<f64>,
    /// Output `(width, height)` the counts refer to.
    pub resolution: (usize, usize),
    /// LR `(width, height)` the latency was measured at.
    pub latency_input: Option<(usize, usize)>,
    pub layers: Vec<LayerCost>,
}

impl ComplexityReport {
    /// Per-layer breakdown as CSV.
    pub fn layers_csv(&self) -> String {
        let mut out = String::from("layer,kind,params,multi_adds\n");
        for l in &self.layers {
            let kind = match l.kind {
                CostKind::Conv => "conv",
                CostKind::Linear => "linear",
                CostKind::Attention => "attention",
                CostKind::Other => "other",
            };
            let _ = writeln!(out, "{},{kind},{},{}", l.path, l.params, l.macs);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySpec {
    /// LR input `(width, height)`.
    pub input: (usize, usize),
    pub runs: usize,
}

impl Default for LatencySpec {
    fn default() -> Self {
        Self {
            input: (64, 64),
            runs: 20,
        }
    }
}

pub fn complexity(model: &Fiwhn, resolution: (usize, usize)) -> ComplexityReport {
    let sheet: CostSheet = model.cost_at_output(resolution.0, resolution.1);
    ComplexityReport {
        params: sheet.params(),
        multi_adds: sheet.multi_adds(),
        attention_macs: sheet.attention_macs(),
        ms_per_image: None,
        resolution,
        latency_input: None,
        layers: sheet.layers,
    }
}

/// Median wall-clock milliseconds of `runs` forward passes (after one warm-up).
pub fn measure_latency(model: &Fiwhn, spec: LatencySpec) -> Result<f64> {
    let runs = spec.runs.max(1);
    let (w, h) = spec.input;
    let x = Tensor::full(0.5f32, (1, 3, h, w), &candle_core::Device::Cpu)?.to_dtype(model.dtype())?;
    model.forward(&x)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        let y = model.forward(&x)?;
        // Force evaluation before stopping the clock.
        y.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}

/// Closed-form complexity at `resolution` plus optional measured latency.
pub fn profile(model: &Fiwhn, resolution: (usize, usize), latency: Option<LatencySpec>) -> Result<ComplexityReport> {
    let mut report = complexity(model, resolution);
    if let Some(spec) = latency {
        report.ms_per_image = Some(measure_latency(model, spec)?);
        report.latency_input = Some(spec.input);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    Topology,
    WideWidth,
    WdibParts,
    WdibCount,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 4] = [
        AblationSuite::Topology,
        AblationSuite::WideWidth,
        AblationSuite::WdibParts,
        AblationSuite::WdibCount,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationSuite::Topology => "topology",
            AblationSuite::WideWidth => "wide_width",
            AblationSuite::WdibParts => "wdib_parts",
            AblationSuite::WdibCount => "wdib_count",
        }
    }

    /// Named configurations compared by this suite.
    pub fn variants(&self, base: &FiwhnConfig) -> Vec<(String, FiwhnConfig)> {
        match self {
            AblationSuite::Topology => Topology::ALL
                .iter()
                .map(|&t| {
                    (
                        t.name().to_string(),
                        FiwhnConfig {
                            topology: t,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
            AblationSuite::WideWidth => {
                let c = base.cnn_channels();
                let plain = {
                    let mut cfg = base.clone();
                    cfg.wdib.unit = UnitKind::Plain;
                    ("plain".to_string(), cfg)
                };
                // Expansion ratios 2x and 3.75x of the block width.
                let mut rows = vec![plain];
                for wide in [2 * c, (15 * c).div_ceil(4)] {
                    let mut cfg = base.clone();
                    cfg.wdib.unit = UnitKind::Wide;
                    cfg.wdib.wide_channels = wide;
                    rows.push((format!("wide_{wide}"), cfg));
                }
                rows
            }
            AblationSuite::WdibParts => {
                let off = {
                    let mut cfg = base.clone();
                    cfg.wdib.unit = UnitKind::Plain;
                    cfg.wdib.scf = false;
                    cfg.wdib.interaction = false;
                    cfg.wdib.adaptive = false;
                    cfg
                };
                let with = |f: &dyn Fn(&mut FiwhnConfig)| {
                    let mut cfg = off.clone();
                    f(&mut cfg);
                    cfg
                };
                vec![
                    ("baseline".to_string(), off.clone()),
                    ("+wrdc".to_string(), with(&|c| c.wdib.unit = UnitKind::Wide)),
                    ("+scf".to_string(), with(&|c| c.wdib.scf = true)),
                    ("+bi".to_string(), with(&|c| c.wdib.interaction = true)),
                    ("+adaptive".to_string(), with(&|c| c.wdib.adaptive = true)),
                    (
                        "full".to_string(),
                        with(&|c| {
                            c.wdib.unit = UnitKind::Wide;
                            c.wdib.scf = true;
                            c.wdib.interaction = true;
                            c.wdib.adaptive = true;
                        }),
                    ),
                ]
            }
            AblationSuite::WdibCount => (2..=4)
                .map(|n| {
                    (
                        format!("wdib_x{n}"),
                        FiwhnConfig {
                            wdibs_per_fswg: n,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
        }
    }
}

impl std::str::FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationSuite::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown ablation suite `{s}` (expected topology, wide_width, wdib_parts or wdib_count)"
                ))
            })
    }
}

/// Shared training and data budget for every variant of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationBudget {
    pub base: FiwhnConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub train_images: usize,
    pub test_images: usize,
    pub hr_size: usize,
    pub data_seed: u64,
}

impl Default for AblationBudget {
    fn default() -> Self {
        Self {
            base: FiwhnConfig::toy(2),
            train: TrainConfig {
                batch: 4,
                epochs: 1,
                steps_per_epoch: 120,
                lr_patch: 16,
                lr0: 2e-3,
                lr_min: 2e-5,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2],
            train_images: 8,
            test_images: 4,
            hr_size: 64,
            data_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub rank: usize,
    pub params: usize,
    pub multi_adds: u64,
    pub psnr_mean: f64,
    pub psnr_sd: f64,
    pub ssim_mean: f64,
    pub ssim_sd: f64,
    pub psnr_per_seed: Vec<f64>,
    pub complexity: ComplexityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: AblationSuite,
    pub seeds: Vec<u64>,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
    /// Rows in the suite's declaration order.
    pub rows: Vec<AblationRow>,
}

/// Sample mean and standard deviation (n − 1 denominator).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,rank,params,multi_adds,psnr_mean,psnr_sd,ssim_mean,ssim_sd\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4},{:.4},{:.6},{:.6}",
                r.variant, r.rank, r.params, r.multi_adds, r.psnr_mean, r.psnr_sd, r.ssim_mean, r.ssim_sd
            );
        }
        out
    }

    /// Aligned plain-text table sorted by rank.
    pub fn to_text(&self) -> String {
        let header = ["rank", "variant", "params", "multi-adds (G)", "PSNR (dB)", "SSIM"];
        let mut ranked: Vec<&AblationRow> = self.rows.iter().collect();
        ranked.sort_by_key(|r| r.rank);
        let body: Vec<[String; 6]> = ranked
            .iter()
            .map(|r| {
                [
                    r.rank.to_string(),
                    r.variant.clone(),
                    r.params.to_string(),
                    format!("{:.2}", r.multi_adds as f64 / 1e9),
                    format!("{:.3} ± {:.3}", r.psnr_mean, r.psnr_sd),
                    format!("{:.4} ± {:.4}", r.ssim_mean, r.ssim_sd),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: Vec<&str>| -> String {
            cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = format!(
            "suite {} | seeds {:?} | bicubic {:.3} dB / {:.4}\n",
            self.suite.name(),
            self.seeds,
            self.bicubic_psnr,
            self.bicubic_ssim
        );
        out.push_str(&line(header.to_vec()));
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for row in &body {
            out.push_str(&line(row.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let name = self.suite.name();
        write_atomic(&dir.join(format!("ablation_{name}.csv")), self.to_csv().as_bytes())?;
        write_atomic(&dir.join(format!("ablation_{name}.txt")), self.to_text().as_bytes())
    }
}

/// Train and evaluate every variant of `suite` under `budget`.
pub fn ablate(suite: AblationSuite, budget: &AblationBudget) -> Result<AblationTable> {
    if budget.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let scale = budget.base.scale;
    let train_set = synthetic_corpus(budget.train_images, budget.hr_size, scale, budget.data_seed)?;
    let test_set = synthetic_corpus(budget.test_images, budget.hr_size, scale, budget.data_seed + 1_000_003)?;
    let mut rows = Vec::new();
    let mut bicubic = (f64::NAN, f64::NAN);
    for (variant, cfg) in suite.variants(&budget.base) {
        let mut psnrs = Vec::new();
        let mut ssims = Vec::new();
        let mut complexity_report = None;
        for &seed in &budget.seeds {
            let model = Fiwhn::new(&cfg, DType::F32, seed)?;
            let train_cfg = TrainConfig {
                seed,
                ..budget.train.clone()
            };
            train(&model, &train_set, &train_cfg, &TrainOptions::default())?;
            let report = evaluate(&model, &test_set, "synthetic")?;
            log::info!("{} {variant} seed {seed}: {:.3} dB", suite.name(), report.psnr_db);
            psnrs.push(report.psnr_db);
            ssims.push(report.ssim);
            bicubic = (report.bicubic_psnr_db, report.bicubic_ssim);
            complexity_report.get_or_insert_with(|| complexity(&model, PROFILE_RESOLUTION));
        }
        let (psnr_mean, psnr_sd) = mean_sd(&psnrs);
        let (ssim_mean, ssim_sd) = mean_sd(&ssims);
        let complexity = complexity_report.expect("at least one seed");
        rows.push(AblationRow {
            variant,
            rank: 0,
            params: complexity.params,
            multi_adds: complexity.multi_adds,
            psnr_mean,
            psnr_sd,
            ssim_mean,
            ssim_sd,
            psnr_per_seed: psnrs,
            complexity,
        });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].psnr_mean.total_cmp(&rows[a].psnr_mean));
    for (rank, idx) in order.into_iter().enumerate() {
        rows[idx].rank = rank + 1;
    }
    Ok(AblationTable {
        suite,
        seeds: budget.seeds.clone(),
        bicubic_psnr: bicubic.0,
        bicubic_ssim: bicubic.1,
        rows,
    })
}
