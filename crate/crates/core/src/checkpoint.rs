//! Portable checkpoint archive.
//!
//! A checkpoint is a single safetensors file. Every tensor is stored as
//! little-endian `F32` with its shape. Keys:
//!
//! * model parameters use their dotted parameter path, e.g.
//!   `fswg.0.wdib.1.wirw.0.feature.up.weight_v` (see [`crate::params`]);
//! * optional optimizer moments use `optim.m.<param path>` and
//!   `optim.v.<param path>`.
//!
//! Header metadata (string → string):
//!
//! | key            | value                                         |
//! |----------------|-----------------------------------------------|
//! | `format`       | [`FORMAT_TAG`]                                |
//! | `config`       | model configuration as TOML                   |
//! | `step`         | optimizer steps taken (training checkpoints)  |
//! | `optim.t`      | Adam step counter                             |
//! | `train_config` | training configuration as TOML                |

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::network::{Fiwhn, FiwhnConfig};

pub const FORMAT_TAG: &str = "fiwhn-checkpoint-v1";
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

/// Optimizer bookkeeping carried by training checkpoints.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub adam_t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub train_config: Option<String>,
}

/// Decoded contents of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: FiwhnConfig,
    pub params: BTreeMap<String, Tensor>,
    pub train: Option<TrainState>,
}

impl Checkpoint {
    /// Total element count of the model parameters.
    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.elem_count()).sum()
    }

    /// Rebuild the model described by the archive and load its weights.
    pub fn into_model(&self, dtype: DType) -> Result<Fiwhn> {
        let model = Fiwhn::new(&self.config, dtype, 0)?;
        let expected = model.store().names();
        if expected.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} tensors, archive has {}",
                expected.len(),
                self.params.len()
            )));
        }
        for name in expected {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            model.store().set(&name, t)?;
        }
        Ok(model)
    }
}

fn to_bytes(t: &Tensor) -> Result<(Vec<usize>, Vec<u8>)> {
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok((t.dims().to_vec(), bytes))
}

fn from_view(view: &TensorView<'_>) -> Result<Tensor> {
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!(
            "expected F32 tensors, found {:?}",
            view.dtype()
        )));
    }
    let data: Vec<f32> = view
        .data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(data, view.shape(), &Device::Cpu)?)
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serialize a model (and optionally optimizer state) to `path` atomically.
pub fn save(model: &Fiwhn, path: &Path, train: Option<&TrainState>) -> Result<()> {
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, var) in model.store().vars() {
        let (shape, bytes) = to_bytes(var.as_tensor())?;
        owned.push((name, shape, bytes));
    }
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT_TAG.to_string());
    let config = toml::to_string(model.config())
        .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    meta.insert("config".to_string(), config);
    if let Some(ts) = train {
        meta.insert("step".to_string(), ts.step.to_string());
        meta.insert("optim.t".to_string(), ts.adam_t.to_string());
        if let Some(tc) = &ts.train_config {
            meta.insert("train_config".to_string(), tc.clone());
        }
        for (prefix, map) in [(OPTIM_M, &ts.m), (OPTIM_V, &ts.v)] {
            for (name, t) in map {
                let (shape, bytes) = to_bytes(t)?;
                owned.push((format!("{prefix}{name}"), shape, bytes));
            }
        }
    }
    let views = owned
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header.metadata().clone().unwrap_or_default();
    match meta.get("format").map(String::as_str) {
        Some(FORMAT_TAG) => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format tag {other:?}",
                path.display()
            )))
        }
    }
    let config: FiwhnConfig = toml::from_str(
        meta.get("config")
            .ok_or_else(|| Error::Checkpoint("missing config record".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
    config.validate()?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = from_view(&view)?;
        if let Some(p) = name.strip_prefix(OPTIM_M) {
            m.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix(OPTIM_V) {
            v.insert(p.to_string(), t);
        } else {
            params.insert(name, t);
        }
    }
    let train = match meta.get("step") {
        Some(step) => {
            let parse = |key: &str, s: &str| {
                s.parse::<u64>()
                    .map_err(|e| Error::Checkpoint(format!("bad `{key}` value `{s}`: {e}")))
            };
            let adam_t = parse("optim.t", meta.get("optim.t").map(String::as_str).unwrap_or("0"))?;
            Some(TrainState {
                step: parse("step", step)? as usize,
                adam_t,
                m,
                v,
                train_config: meta.get("train_config").cloned(),
            })
        }
        None => None,
    };
    Ok(Checkpoint { config, params, train })
}

/// Load a checkpoint and rebuild its model.
pub fn load_model(path: &Path, dtype: DType) -> Result<Fiwhn> {
    load(path)?.into_model(dtype)
}

/// Sum of model-parameter array sizes in a checkpoint file.
pub fn element_count(path: &Path) -> Result<usize> {
    Ok(load(path)?.num_params())
}
