//! Command-line front end: `prepare`, `train`, `eval`, `sr`, `profile` and
//! `ablate`.
//!
//! Every command that writes artifacts drops a `manifest.json`
//! ([`RunManifest`]) in its `--out` directory before doing any work and
//! completes it when the work ends.
//!
//! Run configuration is TOML with three optional tables:
//!
//! ```toml
//! [model]        # FiwhnConfig
//! scale = 2
//! [train]        # TrainConfig
//! steps_per_epoch = 200
//! [data]
//! root = "data/DIV2K"          # DIV2K-style folder
//! synthetic_images = 8         # used when no root is available
//! synthetic_hr_size = 64
//! synthetic_seed = 1
//! ```
//!
//! Flags override file values. The data root falls back to the
//! `FIWHN_DATA_ROOT` environment variable.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic};
use crate::datapipe::{load_corpus, load_png, prepare_lr, save_png, synthetic_corpus, Corpus, ImagePair, PrepareReport};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablate, evaluate, profile, super_resolve, AblationBudget, AblationSuite, AblationTable, ComplexityReport,
    LatencySpec, MetricReport, PROFILE_RESOLUTION,
};
use crate::network::{Fiwhn, FiwhnConfig, Topology};
use crate::training::{train, TrainConfig, TrainOptions, TrainReport};

pub const DATA_ROOT_ENV: &str = "FIWHN_DATA_ROOT";

/// Published `(scale, params, multi-adds)` of the reference model.
pub const PUBLISHED_REFERENCE: [(usize, usize, f64); 3] = [(2, 705_000, 137.7e9), (3, 713_000, 62.0e9), (4, 725_000, 35.6e9)];

pub fn published_reference(scale: usize) -> Option<(usize, f64)> {
    PUBLISHED_REFERENCE
        .iter()
        .find(|r| r.0 == scale)
        .map(|r| (r.1, r.2))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub synthetic_images: Option<usize>,
    pub synthetic_hr_size: usize,
    pub synthetic_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: FiwhnConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.scale {
            self.model.scale = s;
        }
        if let Some(t) = o.topology {
            self.model.topology = t;
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(steps) = o.steps {
            self.train.epochs = 1;
            self.train.steps_per_epoch = steps;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Flags shared by commands that build or train a model.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    /// Upscaling factor (2, 3 or 4).
    #[arg(long)]
    pub scale: Option<usize>,
    /// ct, tc, parallel or interactive.
    #[arg(long)]
    pub topology: Option<Topology>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total optimizer steps (one epoch of this length).
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Parser)]
#[command(name = "fiwhn", version, about = "Lightweight hybrid CNN/Transformer super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate LR_bicubic/X{s} images for an HR folder.
    Prepare {
        /// Data root; defaults to $FIWHN_DATA_ROOT.
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        scale: usize,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data root; overrides the config file and $FIWHN_DATA_ROOT.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps without shortening the schedule.
        #[arg(long)]
        stop_after: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a dataset folder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Super-resolve one PNG.
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Parameter and multi-add counts plus measured latency.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// LR width and height for the latency measurement.
        #[arg(long, num_args = 2, default_values_t = [64, 64])]
        latency_input: Vec<usize>,
        /// Timed forward passes (median reported).
        #[arg(long, default_value_t = 20)]
        runs: usize,
        /// Skip the latency measurement.
        #[arg(long)]
        no_latency: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train and compare architecture variants at toy scale.
    Ablate {
        /// topology, wide_width, wdib_parts or wdib_count.
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// TOML file holding an ablation budget.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Provenance record written next to every command's artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub git_describe: String,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    pub outputs: Vec<PathBuf>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn begin(out: &Path, command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        let manifest = Self {
            command: command.to_string(),
            config: serde_json::to_value(config).map_err(|e| Error::Other(e.to_string()))?,
            seed,
            git_describe: git_describe(),
            started: chrono::Utc::now().to_rfc3339(),
            finished: None,
            status: "running".into(),
            outputs: Vec::new(),
        };
        manifest.write(out)?;
        Ok(manifest)
    }

    pub fn finish(mut self, out: &Path, ok: bool, outputs: Vec<PathBuf>) -> Result<()> {
        self.finished = Some(chrono::Utc::now().to_rfc3339());
        self.status = if ok { "ok" } else { "failed" }.into();
        self.outputs = outputs;
        self.write(out)
    }

    fn write(&self, out: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Other(e.to_string()))?;
        write_atomic(&out.join(MANIFEST_FILE), json.as_bytes())
    }
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Resolve a data root: flag, then config, then environment.
pub fn data_root(flag: Option<&Path>, config: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
}

fn with_manifest<T>(
    out: &Path,
    command: &str,
    config: &impl Serialize,
    seed: Option<u64>,
    work: impl FnOnce() -> Result<(T, Vec<PathBuf>)>,
) -> Result<T> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = RunManifest::begin(out, command, config, seed)?;
    match work() {
        Ok((value, outputs)) => {
            manifest.finish(out, true, outputs)?;
            Ok(value)
        }
        Err(e) => {
            manifest.finish(out, false, Vec::new())?;
            Err(e)
        }
    }
}

/// Generate missing LR images; existing files are never rewritten.
pub fn cmd_prepare(root: &Path, scale: usize) -> Result<PrepareReport> {
    if !(2..=4).contains(&scale) {
        return Err(Error::config(format!("scale {scale} not in {{2, 3, 4}}")));
    }
    prepare_lr(root, scale)
}

#[derive(Debug, Clone, Default)]
pub struct TrainRequest {
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub stop_after: Option<usize>,
    pub overrides: Overrides,
}

fn training_corpus(cfg: &RunConfig, flag: Option<&Path>) -> Result<Vec<ImagePair>> {
    let scale = cfg.model.scale;
    if let Some(root) = data_root(flag, cfg.data.root.as_deref()) {
        let Corpus { pairs, failures } = load_corpus(&root, scale)?;
        for f in &failures {
            log::warn!("skipped {}: {}", f.path.display(), f.reason);
        }
        if pairs.is_empty() {
            return Err(Error::config(format!("no usable images under {}", root.display())));
        }
        return Ok(pairs);
    }
    match cfg.data.synthetic_images {
        Some(n) if n > 0 => {
            let size = if cfg.data.synthetic_hr_size == 0 { 64 } else { cfg.data.synthetic_hr_size };
            synthetic_corpus(n, size, scale, cfg.data.synthetic_seed)
        }
        _ => Err(Error::config(format!(
            "no training data: pass --data, set [data] root or synthetic_images, or set {DATA_ROOT_ENV}"
        ))),
    }
}

pub fn cmd_train(req: &TrainRequest) -> Result<TrainReport> {
    let mut cfg = RunConfig::load_or_default(req.config.as_deref())?;
    cfg.apply(&req.overrides);
    // Reject bad configurations before touching the output directory.
    cfg.validate()?;
    let seed = cfg.train.seed;
    with_manifest(&req.out, "train", &cfg, Some(seed), || {
        let corpus = training_corpus(&cfg, req.data.as_deref())?;
        let model = Fiwhn::new(&cfg.model, DType::F32, seed)?;
        let report = train(
            &model,
            &corpus,
            &cfg.train,
            &TrainOptions {
                out_dir: Some(req.out.clone()),
                resume: req.resume.clone(),
                stop_after: req.stop_after,
            },
        )?;
        let mut outputs = vec![req.out.join(crate::training::METRICS_FILE)];
        outputs.extend(report.checkpoint.clone());
        Ok((report, outputs))
    })
}

/// Evaluate a checkpoint; load failures are returned alongside the report.
pub fn cmd_eval(checkpoint_path: &Path, dataset: &Path, out: Option<&Path>) -> Result<(MetricReport, Corpus)> {
    let model = checkpoint::load_model(checkpoint_path, DType::F32)?;
    let run = || -> Result<((MetricReport, Corpus), Vec<PathBuf>)> {
        let mut corpus = load_corpus(dataset, model.config().scale)?;
        let name = dataset
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("dataset")
            .to_string();
        let pairs = std::mem::take(&mut corpus.pairs);
        let report = evaluate(&model, &pairs, &name)?;
        corpus.pairs = pairs;
        let mut outputs = Vec::new();
        if let Some(dir) = out {
            let path = dir.join("eval.csv");
            write_atomic(&path, report.to_csv().as_bytes())?;
            outputs.push(path);
        }
        Ok(((report, corpus), outputs))
    };
    match out {
        Some(dir) => with_manifest(dir, "eval", &serde_json::json!({
            "checkpoint": checkpoint_path,
            "dataset": dataset,
        }), None, run),
        None => run().map(|(v, _)| v),
    }
}

pub fn cmd_sr(checkpoint_path: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = checkpoint::load_model(checkpoint_path, DType::F32)?;
    let lr = load_png(input)?;
    let sr = super_resolve(&model, &lr)?;
    save_png(&sr, output)
}

#[derive(Debug, Clone)]
pub struct ProfileRequest {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub latency: Option<LatencySpec>,
    pub overrides: Overrides,
}

pub fn cmd_profile(req: &ProfileRequest) -> Result<ComplexityReport> {
    let mut cfg = RunConfig::load_or_default(req.config.as_deref())?;
    cfg.apply(&req.overrides);
    cfg.model.validate()?;
    let run = || -> Result<(ComplexityReport, Vec<PathBuf>)> {
        let model = Fiwhn::new(&cfg.model, DType::F32, cfg.train.seed)?;
        let report = profile(&model, PROFILE_RESOLUTION, req.latency)?;
        let mut outputs = Vec::new();
        if let Some(dir) = &req.out {
            let layers = dir.join("profile_layers.csv");
            write_atomic(&layers, report.layers_csv().as_bytes())?;
            let summary = dir.join("profile.txt");
            write_atomic(&summary, profile_summary(&cfg.model, &report).as_bytes())?;
            outputs.extend([layers, summary]);
        }
        Ok((report, outputs))
    };
    match &req.out {
        Some(dir) => with_manifest(dir, "profile", &cfg.model, Some(cfg.train.seed), run),
        None => run().map(|(r, _)| r),
    }
}

pub fn profile_summary(cfg: &FiwhnConfig, r: &ComplexityReport) -> String {
    let mut s = format!(
        "topology      {}\nscale         x{}\nresolution    {}x{} output\nparams        {}\nmulti-adds    {:.2}G (conv + linear)\nattention     {:.2}G (QK^T and AV products, not in multi-adds)\n",
        cfg.topology,
        cfg.scale,
        r.resolution.0,
        r.resolution.1,
        r.params,
        r.multi_adds as f64 / 1e9,
        r.attention_macs as f64 / 1e9,
    );
    if let (Some(ms), Some((w, h))) = (r.ms_per_image, r.latency_input) {
        s.push_str(&format!("latency       {ms:.1} ms median ({w}x{h} input)\n"));
    }
    if let Some((params, madds)) = published_reference(cfg.scale) {
        s.push_str(&format!(
            "reference     {}K params ({:+.1}%), {:.1}G multi-adds ({:+.1}%)\n",
            params / 1000,
            100.0 * (r.params as f64 / params as f64 - 1.0),
            madds / 1e9,
            100.0 * (r.multi_adds as f64 / madds - 1.0),
        ));
    }
    s
}

pub fn cmd_ablate(suite: &str, out: &Path, config: Option<&Path>, overrides: &Overrides) -> Result<AblationTable> {
    let suite: AblationSuite = suite.parse()?;
    let mut budget = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<AblationBudget>(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => AblationBudget::default(),
    };
    if let Some(s) = overrides.scale {
        budget.base.scale = s;
    }
    if let Some(t) = overrides.topology {
        budget.base.topology = t;
    }
    if let Some(seed) = overrides.seed {
        budget.seeds = vec![seed, seed + 1, seed + 2];
    }
    if let Some(steps) = overrides.steps {
        budget.train.epochs = 1;
        budget.train.steps_per_epoch = steps;
    }
    budget.base.validate()?;
    budget.train.validate()?;
    with_manifest(out, "ablate", &budget, budget.seeds.first().copied(), || {
        let table = ablate(suite, &budget)?;
        table.write(out)?;
        let name = suite.name();
        Ok((
            table,
            vec![
                out.join(format!("ablation_{name}.csv")),
                out.join(format!("ablation_{name}.txt")),
            ],
        ))
    })
}

/// Run a parsed command line, returning the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Cmd::Prepare { root, scale } => {
            let root = data_root(root.as_deref(), None)
                .ok_or_else(|| Error::config(format!("no data root: pass --root or set {DATA_ROOT_ENV}")))?;
            let report = cmd_prepare(&root, scale)?;
            println!(
                "wrote {} LR images, kept {} existing",
                report.written.len(),
                report.skipped.len()
            );
            for (path, reason) in &report.failures {
                eprintln!("failed: {}: {reason}", path.display());
            }
            Ok(if report.failures.is_empty() { 0 } else { 1 })
        }
        Cmd::Train {
            config,
            data,
            out,
            resume,
            stop_after,
            overrides,
        } => {
            let report = cmd_train(&TrainRequest {
                config,
                data,
                out: out.clone(),
                resume,
                stop_after,
                overrides,
            })?;
            if let Some(&(step, _, loss)) = report.history.last() {
                println!("step {step}/{} loss {loss:.6}", report.total_steps);
            }
            println!("artifacts in {}", out.display());
            Ok(0)
        }
        Cmd::Eval { checkpoint, data, out } => {
            let data = data_root(data.as_deref(), None)
                .ok_or_else(|| Error::config(format!("no dataset: pass --data or set {DATA_ROOT_ENV}")))?;
            let (report, corpus) = cmd_eval(&checkpoint, &data, out.as_deref())?;
            print!("{}", report.to_csv());
            println!(
                "{} x{}: {:.3} dB / {:.4} (bicubic {:.3} dB / {:.4}) over {} images",
                report.dataset,
                report.scale,
                report.psnr_db,
                report.ssim,
                report.bicubic_psnr_db,
                report.bicubic_ssim,
                report.n_images
            );
            for f in &corpus.failures {
                eprintln!("failed: {}: {}", f.path.display(), f.reason);
            }
            Ok(if corpus.failures.is_empty() { 0 } else { 1 })
        }
        Cmd::Sr {
            checkpoint,
            input,
            output,
        } => {
            cmd_sr(&checkpoint, &input, &output)?;
            println!("wrote {}", output.display());
            Ok(0)
        }
        Cmd::Profile {
            config,
            out,
            latency_input,
            runs,
            no_latency,
            overrides,
        } => {
            let latency = (!no_latency).then(|| LatencySpec {
                input: (latency_input[0], latency_input[1]),
                runs,
            });
            let cfg = {
                let mut c = RunConfig::load_or_default(config.as_deref())?;
                c.apply(&overrides);
                c.model
            };
            let report = cmd_profile(&ProfileRequest {
                config,
                out,
                latency,
                overrides,
            })?;
            print!("{}", profile_summary(&cfg, &report));
            Ok(0)
        }
        Cmd::Ablate {
            suite,
            out,
            config,
            overrides,
        } => {
            let table = cmd_ablate(&suite, &out, config.as_deref(), &overrides)?;
            print!("{}", table.to_text());
            Ok(0)
        }
    }
}
