//! Closed-form parameter and multiply-accumulate accounting.
//!
//! Every block reports its own cost sheet from configuration arithmetic alone;
//! nothing here runs a forward pass.

use serde::{Deserialize, Serialize};

/// What kind of arithmetic a cost line describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Conv,
    Linear,
    /// Token-token products inside self-attention (QK^T and AV).
    Attention,
    /// Learnable scalars and normalisation affine terms.
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub path: String,
    pub kind: CostKind,
    pub params: usize,
    pub macs: u64,
}

/// Ordered list of per-layer costs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CostSheet {
    pub layers: Vec<LayerCost>,
}

impl CostSheet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, path: impl Into<String>, kind: CostKind, params: usize, macs: u64) {
        self.layers.push(LayerCost {
            path: path.into(),
            kind,
            params,
            macs,
        });
    }

    pub fn extend(&mut self, other: CostSheet) {
        self.layers.extend(other.layers);
    }

    /// Same layers with multiply-adds multiplied by `calls` (a module run
    /// several times per forward pass).
    pub fn scaled(mut self, calls: u64) -> Self {
        for l in &mut self.layers {
            l.macs *= calls;
        }
        self
    }

    /// Same layers with parameters dropped (a module reused elsewhere).
    pub fn without_params(mut self) -> Self {
        for l in &mut self.layers {
            l.params = 0;
        }
        self
    }

    pub fn params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    /// Multiply-adds of convolutions and linear layers.
    pub fn multi_adds(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, CostKind::Conv | CostKind::Linear))
            .map(|l| l.macs)
            .sum()
    }

    pub fn attention_macs(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.kind == CostKind::Attention)
            .map(|l| l.macs)
            .sum()
    }
}

/// `k² · C_in · C_out / groups` weights plus `C_out` biases.
pub fn conv_params(c_in: usize, c_out: usize, kernel: usize, groups: usize) -> usize {
    kernel * kernel * c_in * c_out / groups + c_out
}

/// `H_out · W_out · k² · C_in · C_out / groups`.
pub fn conv_macs(h: usize, w: usize, c_in: usize, c_out: usize, kernel: usize, groups: usize) -> u64 {
    (h * w) as u64 * (kernel * kernel * c_in * c_out / groups) as u64
}
