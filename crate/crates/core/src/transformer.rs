//! Efficient Transformer branch.
//!
//! Tokens are one per pixel (row-major fold of the spatial grid). Attention is
//! computed independently inside `n` contiguous groups of tokens, so each head
//! materialises `n · (T/n)² = T²/n` attention weights instead of `T²`.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::complexity::{CostKind, CostSheet};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvOpts, LayerNorm, Linear};
use crate::params::Scope;

/// Added to the scores of padding keys before the softmax.
const MASK_VALUE: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtConfig {
    pub dim: usize,
    pub heads: usize,
    pub splits: usize,
    pub mlp_ratio: f64,
}

impl Default for EtConfig {
    fn default() -> Self {
        Self {
            dim: 144,
            heads: 4,
            splits: 4,
            mlp_ratio: 2.0,
        }
    }
}

impl EtConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "et.dim {} not divisible by et.heads {}",
                self.dim, self.heads
            )));
        }
        if self.splits == 0 {
            return Err(Error::config("et.splits must be >= 1"));
        }
        if self.mlp_hidden() == 0 {
            return Err(Error::config("et.mlp_ratio gives an empty MLP"));
        }
        Ok(())
    }
}

/// Tokens `[N, T, D]` together with the `(H, W)` grid they were folded from.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub data: Tensor,
    pub height: usize,
    pub width: usize,
}

impl TokenSequence {
    /// `[N, D, H, W] -> [N, H·W, D]`.
    pub fn fold(map: &Tensor) -> Result<Self> {
        let (n, d, h, w) = map.dims4()?;
        let data = map.reshape((n, d, h * w))?.transpose(1, 2)?.contiguous()?;
        Ok(Self {
            data,
            height: h,
            width: w,
        })
    }

    /// `[N, H·W, D] -> [N, D, H, W]`.
    pub fn unfold(&self) -> Result<Tensor> {
        let (n, t, d) = self.data.dims3()?;
        if t != self.height * self.width {
            return Err(Error::shape(format!(
                "{t} tokens cannot unfold to {}x{}",
                self.height, self.width
            )));
        }
        Ok(self
            .data
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, d, self.height, self.width))?)
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn with_data(&self, data: Tensor) -> Self {
        Self {
            data,
            height: self.height,
            width: self.width,
        }
    }

    pub fn add(&self, other: &TokenSequence) -> Result<Self> {
        if self.data.dims() != other.data.dims()
            || self.height != other.height
            || self.width != other.width
        {
            return Err(Error::shape(format!(
                "token sequences {:?} ({}x{}) and {:?} ({}x{})",
                self.data.dims(),
                self.height,
                self.width,
                other.data.dims(),
                other.height,
                other.width
            )));
        }
        Ok(self.with_data((&self.data + &other.data)?))
    }
}

/// Result of [`split_attention_with_weights`].
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `[N, T, D]`.
    pub output: Tensor,
    /// Softmax weights `[N, groups, heads, T_g, T_g]`.
    pub weights: Tensor,
    pub padded_tokens: usize,
}

/// `Concat_i softmax(Q_i K_iᵀ / √d_k) V_i` over `splits` contiguous token
/// groups and `heads` heads. Inputs are already projected, `[N, T, D]`.
pub fn split_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, splits: usize) -> Result<Tensor> {
    Ok(split_attention_with_weights(q, k, v, heads, splits)?.output)
}

pub fn split_attention_with_weights(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    splits: usize,
) -> Result<AttentionOutput> {
    if q.dims() != k.dims() || q.dims() != v.dims() {
        return Err(Error::shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let (n, t, d) = q.dims3()?;
    if heads == 0 || d % heads != 0 || splits == 0 {
        return Err(Error::config(format!(
            "cannot split dim {d} into {heads} heads and {splits} groups"
        )));
    }
    let dk = d / heads;
    let group = t.div_ceil(splits);
    let padded = group * splits;
    let pad = padded - t;

    let pad_tokens = |x: &Tensor| -> Result<Tensor> {
        if pad == 0 {
            return Ok(x.clone());
        }
        let zeros = Tensor::zeros((n, pad, d), x.dtype(), x.device())?;
        Ok(Tensor::cat(&[x, &zeros], 1)?)
    };
    // [N, T_pad, D] -> [N·groups·heads, T_g, d_k]
    let to_groups = |x: &Tensor| -> Result<Tensor> {
        Ok(pad_tokens(x)?
            .reshape((n, splits, group, heads, dk))?
            .transpose(2, 3)?
            .contiguous()?
            .reshape((n * splits * heads, group, dk))?)
    };
    let qg = to_groups(q)?;
    let kg = to_groups(k)?;
    let vg = to_groups(v)?;

    let scores = (qg.matmul(&kg.transpose(1, 2)?.contiguous()?)? / (dk as f64).sqrt())?
        .reshape((n, splits, heads, group, group))?;
    let scores = if pad > 0 {
        // Only the last group holds padding keys.
        let mut mask = vec![0f64; splits * group];
        for m in mask.iter_mut().skip(t) {
            *m = MASK_VALUE;
        }
        let mask = Tensor::from_vec(mask, (1, splits, 1, 1, group), q.device())?.to_dtype(q.dtype())?;
        scores.broadcast_add(&mask)?
    } else {
        scores
    };
    let weights = softmax_last(&scores)?;
    let out = weights
        .reshape((n * splits * heads, group, group))?
        .matmul(&vg)?
        .reshape((n, splits, heads, group, dk))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((n, padded, d))?
        .narrow(1, 0, t)?;
    Ok(AttentionOutput {
        output: out,
        weights,
        padded_tokens: padded,
    })
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Attention weights materialised per head: `splits · ⌈T/splits⌉²`.
pub fn attention_entries_per_head(tokens: usize, splits: usize) -> usize {
    let g = tokens.div_ceil(splits);
    splits * g * g
}

#[derive(Debug, Clone)]
pub struct SplitMha {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    heads: usize,
    splits: usize,
    dim: usize,
}

impl SplitMha {
    pub fn new(scope: &Scope<'_>, cfg: &EtConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            q: Linear::new(&scope.pp("q"), d, d)?,
            k: Linear::new(&scope.pp("k"), d, d)?,
            v: Linear::new(&scope.pp("v"), d, d)?,
            proj: Linear::new(&scope.pp("proj"), d, d)?,
            heads: cfg.heads,
            splits: cfg.splits,
            dim: d,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = split_attention(
            &self.q.forward(x)?,
            &self.k.forward(x)?,
            &self.v.forward(x)?,
            self.heads,
            self.splits,
        )?;
        self.proj.forward(&out)
    }

    fn cost(&self, path: &str, tokens: usize) -> CostSheet {
        let mut s = self.q.cost(tokens);
        s.extend(self.k.cost(tokens));
        s.extend(self.v.cost(tokens));
        let g = tokens.div_ceil(self.splits);
        // QKᵀ and AV: per group and head, 2 · T_g² · d_k; summed over heads
        // that is 2 · T_g² · D per group.
        let macs = (2 * self.splits * g * g * self.dim) as u64;
        s.push(format!("{path}.matmul"), CostKind::Attention, 0, macs);
        s.extend(self.proj.cost(tokens));
        s
    }
}

/// Pre-norm Transformer block: `t + MHA(LN(t))`, then `+ MLP(LN(·))` with a
/// GELU MLP.
#[derive(Debug, Clone)]
pub struct EtBlock {
    path: String,
    norm1: LayerNorm,
    attn: SplitMha,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EtBlock {
    pub fn new(scope: &Scope<'_>, cfg: &EtConfig) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.mlp_hidden();
        Ok(Self {
            path: scope.path().to_string(),
            norm1: LayerNorm::new(&scope.pp("norm1"), cfg.dim)?,
            attn: SplitMha::new(&scope.pp("attn"), cfg)?,
            norm2: LayerNorm::new(&scope.pp("norm2"), cfg.dim)?,
            fc1: Linear::new(&scope.pp("mlp.fc1"), cfg.dim, hidden)?,
            fc2: Linear::new(&scope.pp("mlp.fc2"), hidden, cfg.dim)?,
        })
    }

    pub fn forward(&self, t: &TokenSequence) -> Result<TokenSequence> {
        let x = &t.data;
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?;
        let x = (&x + self.fc2.forward(&h)?)?;
        Ok(t.with_data(x))
    }

    pub fn cost(&self, tokens: usize) -> CostSheet {
        let mut s = self.norm1.cost();
        s.extend(self.attn.cost(&format!("{}.attn", self.path), tokens));
        s.extend(self.norm2.cost());
        s.extend(self.fc1.cost(tokens));
        s.extend(self.fc2.cost(tokens));
        s
    }
}

/// Image -> tokens: 3×3 convolution `3 -> D`, then fold.
#[derive(Debug, Clone)]
pub struct Embed {
    conv: Conv2d,
}

impl Embed {
    pub fn new(scope: &Scope<'_>, in_ch: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&scope.pp("conv"), in_ch, dim, 3, ConvOpts::default())?,
        })
    }

    pub fn forward(&self, img: &Tensor) -> Result<TokenSequence> {
        TokenSequence::fold(&self.conv.forward(img)?)
    }

    pub fn cost(&self, h: usize, w: usize) -> CostSheet {
        self.conv.cost(h, w)
    }
}

/// CNN map -> tokens: 1×1 convolution `C -> D`, then fold.
#[derive(Debug, Clone)]
pub struct CrTransform {
    conv: Conv2d,
}

impl CrTransform {
    pub fn new(scope: &Scope<'_>, cnn_ch: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(scope, cnn_ch, dim, 1, ConvOpts::default())?,
        })
    }

    pub fn forward(&self, f: &Tensor) -> Result<TokenSequence> {
        TokenSequence::fold(&self.conv.forward(f)?)
    }

    /// Fold onto an existing token grid, checking the spatial dims agree.
    pub fn forward_onto(&self, f: &Tensor, grid: &TokenSequence) -> Result<TokenSequence> {
        let (_, _, h, w) = f.dims4()?;
        if (h, w) != (grid.height, grid.width) {
            return Err(Error::shape(format!(
                "feature map {h}x{w} does not match token grid {}x{}",
                grid.height, grid.width
            )));
        }
        self.forward(f)
    }

    pub fn cost(&self, h: usize, w: usize) -> CostSheet {
        self.conv.cost(h, w)
    }
}

/// Tokens -> CNN map: unfold, then 1×1 convolution `D -> C`.
#[derive(Debug, Clone)]
pub struct RcTransform {
    conv: Conv2d,
}

impl RcTransform {
    pub fn new(scope: &Scope<'_>, dim: usize, cnn_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(scope, dim, cnn_ch, 1, ConvOpts::default())?,
        })
    }

    pub fn forward(&self, t: &TokenSequence) -> Result<Tensor> {
        self.conv.forward(&t.unfold()?)
    }

    pub fn cost(&self, h: usize, w: usize) -> CostSheet {
        self.conv.cost(h, w)
    }
}

/// Dense softmax attention over all tokens, single group. Used as a
/// reference in tests and benchmarks.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, t, d) = q.dims3()?;
    let dk = d / heads;
    let split = |x: &Tensor| -> Result<Tensor> {
        Ok(x.reshape((n, t, heads, dk))?.transpose(1, 2)?.contiguous()?)
    };
    let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);
    let s = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? / (dk as f64).sqrt())?;
    let a = softmax_last(&s)?;
    Ok(a.matmul(&vh)?.transpose(1, 2)?.contiguous()?.reshape((n, t, d))?)
}
