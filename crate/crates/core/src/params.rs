//! Named, seeded parameter storage shared by every block of the network.
//!
//! Parameters live in a flat map from dotted path strings (for example
//! `fswg.0.block.1.scf.fuse.weight`) to trainable candle variables. The same
//! paths are used as checkpoint keys.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("tensors", &self.len())
            .field("elements", &self.total_elements())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters, sorted by path.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    pub fn total_elements(&self) -> usize {
        self.vars
            .lock()
            .unwrap()
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    /// Overwrite one parameter in place. The shape must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn fill(&self, name: &str, value: f64) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        let t = Tensor::full(value, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Fill every parameter whose final path segment equals `leaf`.
    pub fn fill_leaf(&self, leaf: &str, value: f64) -> Result<usize> {
        let names: Vec<String> = self
            .names()
            .into_iter()
            .filter(|n| n.rsplit('.').next() == Some(leaf))
            .collect();
        for n in &names {
            self.fill(n, value)?;
        }
        Ok(names.len())
    }

    pub fn zero_all(&self) -> Result<()> {
        for name in self.names() {
            self.fill(&name, 0.0)?;
        }
        Ok(())
    }

    /// Zero every learnable tensor, then put all `lambda_res` multipliers
    /// back to one. This is the "zero network" used throughout the tests.
    pub fn zero_keep_residual_scalars(&self) -> Result<()> {
        self.zero_all()?;
        self.fill_leaf("lambda_res", 1.0)?;
        Ok(())
    }

    fn insert(&self, name: String, var: Var) -> Result<()> {
        let mut vars = self.vars.lock().unwrap();
        if vars.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        vars.insert(name, var);
        Ok(())
    }

    fn sample_uniform(&self, n: usize, bound: f64) -> Vec<f64> {
        let mut rng = self.rng.lock().unwrap();
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
    }
}

/// A path prefix into a [`ParamStore`], used while constructing blocks.
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn path(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn full_name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    /// Uniform `U(-bound, bound)` initialisation.
    pub fn uniform(&self, leaf: &str, shape: impl Into<Shape>, bound: f64) -> Result<Var> {
        let shape = shape.into();
        let values = self.store.sample_uniform(shape.elem_count(), bound);
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        self.from_tensor(leaf, &t)
    }

    pub fn constant(&self, leaf: &str, shape: impl Into<Shape>, value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        self.from_tensor(leaf, &t)
    }

    pub fn from_tensor(&self, leaf: &str, t: &Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t.to_dtype(self.store.dtype)?)?;
        self.store.insert(self.full_name(leaf), var.clone())?;
        Ok(var)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
