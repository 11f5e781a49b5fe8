//! L1 training with a cosine-annealed learning rate, Adam, atomic checkpoints
//! and deterministic resume.
//!
//! The loss curve goes to `metrics.csv` (`step,lr,loss`), which is fully
//! deterministic for a fixed seed. Wall-clock time per step is kept apart in
//! `timings.csv` (`step,wall_ms`) so the metrics file can be compared byte for
//! byte across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic, TrainState};
use crate::datapipe::{sample_patch, stream_rng, to_tensor, ImagePair, PatchSpec};
use crate::error::{Error, Result};
use crate::network::Fiwhn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_patch: usize,
    pub augment: bool,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            lr_min: 6.25e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 16,
            epochs: 1,
            steps_per_epoch: 100,
            lr_patch: 48,
            augment: true,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr_min > 0.0 && self.lr_min < self.lr0) {
            return Err(Error::config(format!(
                "need 0 < lr_min < lr0, got lr_min={} lr0={}",
                self.lr_min, self.lr0
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps must be positive"));
        }
        if self.batch == 0 || self.lr_patch == 0 {
            return Err(Error::config("batch and lr_patch must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Mean absolute error over all elements.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!(
            "l1_loss: {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("cosine schedule needs total > 0"));
    }
    if step > total {
        return Err(Error::config(format!("step {step} beyond schedule end {total}")));
    }
    let t = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Adam without weight decay. Parameters with no gradient are left alone.
pub struct Adam {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, v)| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            params,
            m,
            v,
            t: 0,
            beta1,
            beta2,
            eps,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64, clip: Option<f64>) -> Result<()> {
        let scale = match clip {
            Some(max_norm) => {
                let norm = global_grad_norm(&self.params, grads)?;
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let g = g.detach();
            let g = if scale != 1.0 { (g * scale)? } else { g };
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn state(&self, step: usize, train_config: Option<String>) -> TrainState {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            m.insert(name.clone(), self.m[i].clone());
            v.insert(name.clone(), self.v[i].clone());
        }
        TrainState {
            step,
            adam_t: self.t,
            m,
            v,
            train_config,
        }
    }

    pub fn restore(&mut self, state: &TrainState) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            let fetch = |map: &BTreeMap<String, Tensor>| -> Result<Tensor> {
                let t = map
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("no optimizer moments for `{name}`")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("moment shape mismatch for `{name}`")));
                }
                Ok(t.to_dtype(var.dtype())?)
            };
            self.m[i] = fetch(&state.m)?;
            self.v[i] = fetch(&state.v)?;
        }
        self.t = state.adam_t;
        Ok(())
    }
}

fn global_grad_norm(params: &[(String, Var)], grads: &GradStore) -> Result<f64> {
    let mut total = 0.0;
    for (_, var) in params {
        if let Some(g) = grads.get(var) {
            total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// One training batch and where it came from.
pub struct Batch {
    pub lr: Tensor,
    pub hr: Tensor,
    pub ids: Vec<String>,
}

/// Deterministic batch for a given step.
pub fn make_batch(model: &Fiwhn, corpus: &[ImagePair], cfg: &TrainConfig, step: usize) -> Result<Batch> {
    if corpus.is_empty() {
        return Err(Error::config("training corpus is empty"));
    }
    let spec = PatchSpec {
        lr_patch: cfg.lr_patch,
        augment: cfg.augment,
        seed: cfg.seed ^ 0xA5A5_5A5A,
    };
    let mut lrs = Vec::with_capacity(cfg.batch);
    let mut hrs = Vec::with_capacity(cfg.batch);
    let mut ids = Vec::with_capacity(cfg.batch);
    for slot in 0..cfg.batch {
        let mut rng = stream_rng(&[cfg.seed, step as u64, slot as u64]);
        let pair = &corpus[rng.random_range(0..corpus.len())];
        let draw = (step * cfg.batch + slot) as u64;
        let (patch, _) = sample_patch(pair, &spec, draw)?;
        ids.push(format!("{}#{draw}", pair.id));
        lrs.push(patch.lr);
        hrs.push(patch.hr);
    }
    let dtype = model.dtype();
    Ok(Batch {
        lr: to_tensor(&lrs.iter().collect::<Vec<_>>(), dtype)?,
        hr: to_tensor(&hrs.iter().collect::<Vec<_>>(), dtype)?,
        ids,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for metrics and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from this training checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop once this many steps are done. The schedule still spans the full
    /// run, so a later resume continues exactly where this left off.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// `(step, lr, loss)` for the steps run in this call.
    pub history: Vec<(usize, f64, f64)>,
    pub start_step: usize,
    pub total_steps: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.2).collect()
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

fn metric_row(step: usize, lr: f64, loss: f64) -> String {
    format!("{step},{lr:e},{loss:e}\n")
}

/// Rows of an existing metrics file up to and including `step`.
fn metrics_prefix(path: &Path, step: usize) -> Result<String> {
    let mut out = String::from("step,lr,loss\n");
    if step == 0 || !path.is_file() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for line in text.lines().skip(1) {
        let s: usize = line
            .split(',')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Other(format!("malformed metrics row `{line}`")))?;
        if s <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Train `model` in place.
pub fn train(model: &Fiwhn, corpus: &[ImagePair], cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::config("training corpus is empty"));
    }
    let total = cfg.total_steps();
    let mut adam = Adam::new(model.store().vars(), cfg.beta1, cfg.beta2, cfg.eps)?;
    let train_toml = toml::to_string(cfg).ok();

    let mut start = 0;
    if let Some(path) = &opts.resume {
        let ckpt = checkpoint::load(path)?;
        if &ckpt.config != model.config() {
            return Err(Error::Checkpoint(format!(
                "{} was written for a different model configuration",
                path.display()
            )));
        }
        let state = ckpt
            .train
            .as_ref()
            .ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state", path.display())))?;
        for (name, t) in &ckpt.params {
            model.store().set(name, t)?;
        }
        adam.restore(state)?;
        start = state.step.min(total);
        log::info!("resuming at step {start} of {total}");
    }

    let mut metrics = String::new();
    let mut timings = String::from("step,wall_ms\n");
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        metrics = metrics_prefix(&dir.join(METRICS_FILE), start)?;
    }

    let mut history = Vec::new();
    let mut checkpoint_path = None;
    let end = opts.stop_after.map_or(total, |s| s.clamp(start, total));
    for step in start..end {
        let t0 = Instant::now();
        let lr = cosine_lr(step, total, cfg.lr0, cfg.lr_min)?;
        let batch = make_batch(model, corpus, cfg, step)?;
        let pred = model.forward(&batch.lr)?;
        let loss = l1_loss(&pred, &batch.hr)?;
        let loss_val = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !loss_val.is_finite() {
            if let Some(dir) = &opts.out_dir {
                let snapshot = format!("step {}\nloss {loss_val}\nbatch {}\n", step + 1, batch.ids.join(" "));
                write_atomic(&dir.join("nonfinite_batch.txt"), snapshot.as_bytes())?;
            }
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                loss: loss_val,
                batch_ids: batch.ids,
            });
        }
        let grads = loss.backward()?;
        adam.step(&grads, lr, cfg.grad_clip)?;
        let done = step + 1;
        history.push((done, lr, loss_val));
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        log::debug!("step {done}/{total} lr {lr:.3e} loss {loss_val:.6} ({wall_ms:.0} ms)");

        if let Some(dir) = &opts.out_dir {
            metrics.push_str(&metric_row(done, lr, loss_val));
            let _ = writeln!(timings, "{done},{wall_ms:.3}");
            let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
            if periodic || done == end {
                write_atomic(&dir.join(METRICS_FILE), metrics.as_bytes())?;
                let path = dir.join(CHECKPOINT_FILE);
                checkpoint::save(model, &path, Some(&adam.state(done, train_toml.clone())))?;
                checkpoint_path = Some(path);
            }
        }
    }

    if let Some(dir) = &opts.out_dir {
        write_atomic(&dir.join(METRICS_FILE), metrics.as_bytes())?;
        write_atomic(&dir.join(TIMINGS_FILE), timings.as_bytes())?;
        if checkpoint_path.is_none() {
            let path = dir.join(CHECKPOINT_FILE);
            checkpoint::save(model, &path, Some(&adam.state(history.last().map_or(start, |h| h.0), train_toml)))?;
            checkpoint_path = Some(path);
        }
    }

    Ok(TrainReport {
        history,
        start_step: start,
        total_steps: total,
        checkpoint: checkpoint_path,
    })
}
