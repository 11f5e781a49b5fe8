//! Dataset ingestion, bicubic degradation, aligned patch sampling with
//! rotation/flip augmentation, and synthetic band-limited corpora.
//!
//! Folder layout understood by [`load_corpus`]:
//!
//! ```text
//! root/
//!   HR/                  8-bit RGB PNGs (any names)
//!   LR_bicubic/X{s}/     optional; `{stem}x{s}.png` or `{stem}.png`
//!   manifest.txt         optional; one HR path per line, relative to HR/
//! ```
//!
//! When `HR/` is missing the PNGs directly under `root` are the HR set. Missing
//! LR images are generated on the fly with [`bicubic_resize`].

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::bicubic::bicubic_resize;
use crate::error::{Error, Result};

/// `[3, H, W]` image with values in `[0, 1]`.
pub type Image = Array3<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub lr: Image,
    pub hr: Image,
    pub scale: usize,
    pub id: String,
}

impl ImagePair {
    /// Crop `hr` to a multiple of `scale` and degrade it with bicubic
    /// downsampling.
    pub fn from_hr(hr: &Image, scale: usize, id: impl Into<String>) -> Result<Self> {
        let hr = crop_to_multiple(hr, scale)?;
        let (_, h, w) = hr.dim();
        let lr = bicubic_resize(&hr, h / scale, w / scale)?;
        Ok(Self {
            lr,
            hr,
            scale,
            id: id.into(),
        })
    }

    pub fn check(&self) -> Result<()> {
        let (_, h, w) = self.lr.dim();
        let (_, hh, hw) = self.hr.dim();
        if hh != h * self.scale || hw != w * self.scale {
            return Err(Error::shape(format!(
                "{}: hr {hh}x{hw} is not {}x lr {h}x{w}",
                self.id, self.scale
            )));
        }
        Ok(())
    }
}

pub fn crop_to_multiple(img: &Image, scale: usize) -> Result<Image> {
    let (_, h, w) = img.dim();
    let (ch, cw) = (h - h % scale, w - w % scale);
    if ch == 0 || cw == 0 {
        return Err(Error::shape(format!(
            "{h}x{w} image is smaller than scale {scale}"
        )));
    }
    Ok(img.slice(s![.., ..ch, ..cw]).to_owned())
}

/// Patch sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    pub lr_patch: usize,
    /// Random quarter-turn rotation and horizontal flip.
    pub augment: bool,
    pub seed: u64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            lr_patch: 48,
            augment: true,
            seed: 0,
        }
    }
}

/// Where and how a patch was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchDraw {
    pub lr_y: usize,
    pub lr_x: usize,
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    pub hflip: bool,
}

/// Deterministic generator for one stream position, e.g. `(seed, epoch, index)`.
pub fn stream_rng(parts: &[u64]) -> ChaCha8Rng {
    // SplitMix64 over the parts.
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Draw an aligned LR/HR crop; the RNG is fully determined by
/// `(spec.seed, draw_index)`.
pub fn sample_patch(pair: &ImagePair, spec: &PatchSpec, draw_index: u64) -> Result<(ImagePair, PatchDraw)> {
    let (_, h, w) = pair.lr.dim();
    let p = spec.lr_patch;
    if p == 0 || h < p || w < p {
        return Err(Error::shape(format!(
            "{}: lr image {h}x{w} smaller than patch {p}",
            pair.id
        )));
    }
    let mut rng = stream_rng(&[spec.seed, draw_index]);
    let lr_y = rng.random_range(0..=h - p);
    let lr_x = rng.random_range(0..=w - p);
    let (quarter_turns, hflip) = if spec.augment {
        (rng.random_range(0..4u8), rng.random_bool(0.5))
    } else {
        (0, false)
    };
    let draw = PatchDraw {
        lr_y,
        lr_x,
        quarter_turns,
        hflip,
    };
    let s = pair.scale;
    let lr = pair.lr.slice(s![.., lr_y..lr_y + p, lr_x..lr_x + p]).to_owned();
    let hr = pair
        .hr
        .slice(s![.., lr_y * s..(lr_y + p) * s, lr_x * s..(lr_x + p) * s])
        .to_owned();
    let lr = augment(&lr, quarter_turns, hflip);
    let hr = augment(&hr, quarter_turns, hflip);
    Ok((
        ImagePair {
            lr,
            hr,
            scale: s,
            id: pair.id.clone(),
        },
        draw,
    ))
}

pub fn augment(img: &Image, quarter_turns: u8, hflip: bool) -> Image {
    let mut out = rotate90(img, quarter_turns);
    if hflip {
        out = flip_horizontal(&out);
    }
    out
}

/// Rotate by `k` counter-clockwise quarter turns.
pub fn rotate90(img: &Image, k: u8) -> Image {
    match k % 4 {
        0 => img.clone(),
        1 => {
            // (y, x) -> (W-1-x, y)
            let mut v = img.view();
            v.swap_axes(1, 2);
            v.invert_axis(Axis(1));
            v.to_owned()
        }
        2 => {
            let mut v = img.view();
            v.invert_axis(Axis(1));
            v.invert_axis(Axis(2));
            v.to_owned()
        }
        _ => {
            let mut v = img.view();
            v.swap_axes(1, 2);
            v.invert_axis(Axis(2));
            v.to_owned()
        }
    }
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut v = img.view();
    v.invert_axis(Axis(2));
    v.to_owned()
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut out = Image::zeros((3, h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Quantise to 8 bits (values clamped to `[0, 1]`) and write a PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            px[ch] = quantize(img[[ch, y as usize, x as usize]]);
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One file that could not be turned into a pair.
#[derive(Debug, Clone)]
pub struct LoadFailure {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub pairs: Vec<ImagePair>,
    pub failures: Vec<LoadFailure>,
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn hr_dir(root: &Path) -> PathBuf {
    let hr = root.join("HR");
    if hr.is_dir() {
        hr
    } else {
        root.to_path_buf()
    }
}

pub fn lr_dir(root: &Path, scale: usize) -> PathBuf {
    root.join("LR_bicubic").join(format!("X{scale}"))
}

/// HR files in load order: the manifest when present, otherwise all PNGs
/// sorted by name.
pub fn hr_files(root: &Path) -> Result<Vec<PathBuf>> {
    let hr = hr_dir(root);
    let manifest = root.join("manifest.txt");
    if manifest.is_file() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| hr.join(l))
            .collect());
    }
    list_pngs(&hr)
}

fn lr_candidates(root: &Path, hr_path: &Path, scale: usize) -> Vec<PathBuf> {
    let dir = lr_dir(root, scale);
    let stem = hr_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    vec![
        dir.join(format!("{stem}x{scale}.png")),
        dir.join(format!("{stem}.png")),
    ]
}

fn load_pair(root: &Path, hr_path: &Path, scale: usize) -> Result<ImagePair> {
    let id = hr_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let hr = load_png(hr_path)?;
    match lr_candidates(root, hr_path, scale).into_iter().find(|p| p.is_file()) {
        Some(lr_path) => {
            let lr = load_png(&lr_path)?;
            let (_, h, w) = lr.dim();
            let (_, hh, hw) = hr.dim();
            if hh < h * scale || hw < w * scale {
                return Err(Error::shape(format!(
                    "hr {hh}x{hw} smaller than {scale}x lr {h}x{w}"
                )));
            }
            let hr = hr.slice(s![.., ..h * scale, ..w * scale]).to_owned();
            Ok(ImagePair { lr, hr, scale, id })
        }
        None => ImagePair::from_hr(&hr, scale, id),
    }
}

/// Load every HR image under `root` with its LR counterpart. Files that fail
/// are reported in [`Corpus::failures`] and skipped.
pub fn load_corpus(root: &Path, scale: usize) -> Result<Corpus> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus root is not a directory"),
        ));
    }
    let mut corpus = Corpus::default();
    for path in hr_files(root)? {
        match load_pair(root, &path, scale) {
            Ok(pair) => corpus.pairs.push(pair),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                corpus.failures.push(LoadFailure {
                    path,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrepareReport {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
    pub failures: Vec<(PathBuf, String)>,
}

/// Generate `LR_bicubic/X{s}/{stem}x{s}.png` for every HR image that lacks
/// one. Existing files are left untouched.
pub fn prepare_lr(root: &Path, scale: usize) -> Result<PrepareReport> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data root is not a directory"),
        ));
    }
    let out_dir = lr_dir(root, scale);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut report = PrepareReport::default();
    for path in hr_files(root)? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let target = out_dir.join(format!("{stem}x{scale}.png"));
        if target.is_file() {
            report.skipped.push(target);
            continue;
        }
        let result = load_png(&path)
            .and_then(|hr| ImagePair::from_hr(&hr, scale, stem))
            .and_then(|pair| save_png(&pair.lr, &target));
        match result {
            Ok(()) => report.written.push(target),
            Err(e) => report.failures.push((path, e.to_string())),
        }
    }
    Ok(report)
}

/// Smooth random image: a sum of 2D cosines whose spatial frequencies stay
/// below `max_freq` cycles per pixel, mapped into `[0.05, 0.95]`.
pub fn synthetic_image(h: usize, w: usize, max_freq: f64, seed: u64) -> Image {
    let mut rng = stream_rng(&[0x5EED, seed]);
    let waves: Vec<[f64; 6]> = (0..12)
        .map(|_| {
            let r = rng.random_range(0.02..max_freq);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            [
                r * theta.cos(),
                r * theta.sin(),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.2..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let mut img = Image::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut rgb = [0.0f64; 3];
            for wv in &waves {
                let v = wv[3]
                    * (std::f64::consts::TAU * (wv[0] * x as f64 + wv[1] * y as f64) + wv[2]).cos();
                rgb[0] += v;
                rgb[1] += v * (0.7 + 0.3 * wv[4]);
                rgb[2] += v * (0.7 + 0.3 * wv[5]);
            }
            for (c, val) in rgb.iter().enumerate() {
                img[[c, y, x]] = *val as f32;
            }
        }
    }
    let (lo, hi) = img
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-6);
    img.mapv_inplace(|v| 0.05 + 0.9 * (v - lo) / span);
    img
}

/// `n` synthetic pairs with square HR images of side `hr_size`.
pub fn synthetic_corpus(n: usize, hr_size: usize, scale: usize, seed: u64) -> Result<Vec<ImagePair>> {
    (0..n)
        .map(|i| {
            let hr = synthetic_image(hr_size, hr_size, 0.2, seed.wrapping_mul(1000).wrapping_add(i as u64));
            ImagePair::from_hr(&hr, scale, format!("synthetic_{seed}_{i:03}"))
        })
        .collect()
}

/// Stack equally sized images into `[N, 3, H, W]`.
pub fn to_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::shape("cannot batch zero images"))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.dim() != (c, h, w) {
            return Err(Error::shape(format!(
                "batch mixes {:?} and {:?}",
                (c, h, w),
                img.dim()
            )));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn from_tensor(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((0..n)
        .map(|i| {
            let chunk = flat[i * c * h * w..(i + 1) * c * h * w].to_vec();
            Image::from_shape_vec((c, h, w), chunk).expect("shape matches chunk")
        })
        .collect())
}
