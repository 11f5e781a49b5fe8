//! Primitive layers and tensor helpers: convolutions (optionally weight
//! normalised), linear maps, layer norm, learnable scalars and the
//! parameter-free rearrangements used by the network.

use candle_core::{DType, Tensor, Var, D};

use crate::complexity::{conv_macs, conv_params, CostKind, CostSheet};
use crate::error::{Error, Result};
use crate::params::Scope;

const WEIGHT_NORM_EPS: f64 = 1e-12;
const STD_POOL_EPS: f64 = 1e-10;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOpts {
    pub groups: usize,
    pub weight_norm: bool,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            groups: 1,
            weight_norm: false,
        }
    }
}

impl ConvOpts {
    pub fn wn() -> Self {
        Self {
            groups: 1,
            weight_norm: true,
        }
    }

    pub fn grouped(groups: usize) -> Self {
        Self {
            groups,
            weight_norm: false,
        }
    }
}

#[derive(Debug, Clone)]
enum ConvWeight {
    Plain(Var),
    /// `w = g · v / ‖v‖`, norm taken per output channel.
    Normalized { v: Var, g: Var },
}

/// Stride-1, zero-padded 2D convolution with `padding = kernel / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    path: String,
    weight: ConvWeight,
    bias: Var,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    groups: usize,
}

impl Conv2d {
    pub fn new(
        scope: &Scope<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        opts: ConvOpts,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || opts.groups == 0 {
            return Err(Error::config(format!(
                "{}: empty convolution {in_ch}->{out_ch}",
                scope.path()
            )));
        }
        if !in_ch.is_multiple_of(opts.groups) || !out_ch.is_multiple_of(opts.groups) {
            return Err(Error::config(format!(
                "{}: channels {in_ch}->{out_ch} not divisible by {} groups",
                scope.path(),
                opts.groups
            )));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::config("only odd kernels keep spatial dims"));
        }
        let fan_in = in_ch / opts.groups * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let shape = (out_ch, in_ch / opts.groups, kernel, kernel);
        let weight = if opts.weight_norm {
            let v = scope.uniform("weight_v", shape, bound)?;
            let norm = v
                .as_tensor()
                .sqr()?
                .sum_keepdim((1, 2, 3))?
                .sqrt()?;
            let g = scope.from_tensor("weight_g", &norm)?;
            ConvWeight::Normalized { v, g }
        } else {
            ConvWeight::Plain(scope.uniform("weight", shape, bound)?)
        };
        let bias = scope.uniform("bias", out_ch, bound)?;
        Ok(Self {
            path: scope.path().to_string(),
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            groups: opts.groups,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    /// Effective kernel, after weight normalisation if enabled.
    pub fn weight(&self) -> Result<Tensor> {
        Ok(match &self.weight {
            ConvWeight::Plain(w) => w.as_tensor().clone(),
            ConvWeight::Normalized { v, g } => {
                let v = v.as_tensor();
                let norm = (v.sqr()?.sum_keepdim((1, 2, 3))? + WEIGHT_NORM_EPS)?.sqrt()?;
                v.broadcast_div(&norm)?.broadcast_mul(g.as_tensor())?
            }
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_ch {
            return Err(Error::config(format!(
                "{}: expected {} input channels, got {c}",
                self.path, self.in_ch
            )));
        }
        let y = x.conv2d(&self.weight()?, self.kernel / 2, 1, 1, self.groups)?;
        let b = self.bias.as_tensor().reshape((1, self.out_ch, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    pub fn params(&self) -> usize {
        let wn = match self.weight {
            ConvWeight::Normalized { .. } => self.out_ch,
            ConvWeight::Plain(_) => 0,
        };
        conv_params(self.in_ch, self.out_ch, self.kernel, self.groups) + wn
    }

    pub fn cost(&self, h: usize, w: usize) -> CostSheet {
        let mut s = CostSheet::new();
        s.push(
            self.path.clone(),
            CostKind::Conv,
            self.params(),
            conv_macs(h, w, self.in_ch, self.out_ch, self.kernel, self.groups),
        );
        s
    }
}

/// Affine map over the last axis; weight stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    path: String,
    weight: Var,
    bias: Var,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(scope: &Scope<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            path: scope.path().to_string(),
            weight: scope.uniform("weight", (out_dim, in_dim), bound)?,
            bias: scope.uniform("bias", out_dim, bound)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(D::Minus1)?;
        if d != self.in_dim {
            return Err(Error::shape(format!(
                "{}: expected last dim {}, got {d}",
                self.path, self.in_dim
            )));
        }
        let y = x.broadcast_matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn cost(&self, tokens: usize) -> CostSheet {
        let mut s = CostSheet::new();
        s.push(
            self.path.clone(),
            CostKind::Linear,
            self.params(),
            (tokens * self.in_dim * self.out_dim) as u64,
        );
        s
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    path: String,
    gamma: Var,
    beta: Var,
    dim: usize,
}

impl LayerNorm {
    pub fn new(scope: &Scope<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            path: scope.path().to_string(),
            gamma: scope.constant("weight", dim, 1.0)?,
            beta: scope.constant("bias", dim, 0.0)?,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.dim as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / n)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / n)?;
        let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }

    pub fn params(&self) -> usize {
        2 * self.dim
    }

    pub fn cost(&self) -> CostSheet {
        let mut s = CostSheet::new();
        s.push(self.path.clone(), CostKind::Other, self.params(), 0);
        s
    }
}

/// A multiplier that is either learned or pinned.
#[derive(Debug, Clone)]
pub enum Scalar {
    Learned(Var),
    Fixed(f64),
}

impl Scalar {
    pub fn new(scope: &Scope<'_>, leaf: &str, init: f64, learnable: bool) -> Result<Self> {
        if learnable {
            Ok(Scalar::Learned(scope.constant(leaf, 1, init)?))
        } else {
            Ok(Scalar::Fixed(init))
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Scalar::Learned(v) => x.broadcast_mul(v.as_tensor())?,
            Scalar::Fixed(c) => (x * *c)?,
        })
    }

    pub fn params(&self) -> usize {
        match self {
            Scalar::Learned(_) => 1,
            Scalar::Fixed(_) => 0,
        }
    }

    pub fn value(&self) -> Result<f64> {
        Ok(match self {
            Scalar::Learned(v) => v.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?[0],
            Scalar::Fixed(c) => *c,
        })
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Per-channel spatial mean, shape `[N, C, 1, 1]`.
pub fn avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim((2, 3))?)
}

/// Per-channel population standard deviation over spatial positions.
pub fn std_pool(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((2, 3))?;
    Ok((var + STD_POOL_EPS)?.sqrt()?)
}

/// ShuffleNet channel shuffle: `[N, g·k, H, W]` viewed as `[g, k]` and
/// transposed, so channel `i·k + j` moves to position `j·g + i`.
pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(format!(
            "cannot shuffle {c} channels in {groups} groups"
        )));
    }
    Ok(x
        .reshape((n, groups, c / groups, h, w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, c, h, w))?)
}

/// Sub-pixel rearrangement `[N, C·r², H, W] -> [N, C, rH, rW]` with
/// `out[c, h·r + i, w·r + j] = in[c·r² + i·r + j, h, w]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    Ok(candle_nn::ops::pixel_shuffle(x, r)?)
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(parts, 1)?)
}

pub fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn channel_shuffle_interleaves_two_groups() {
        let x = t((0..6).map(|v| v as f64).collect(), &[1, 6, 1, 1]);
        let y: Vec<f64> = channel_shuffle(&x, 2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(y, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn pixel_shuffle_matches_hand_layout() {
        // Four 2x2 channels a, b, c, d with values 10*ch + pos.
        let v: Vec<f64> = (0..4)
            .flat_map(|c| (0..4).map(move |p| (10 * c + p) as f64))
            .collect();
        let x = t(v, &[1, 4, 2, 2]);
        let y: Vec<f64> = pixel_shuffle(&x, 2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        #[rustfmt::skip]
        let expected = vec![
             0.0, 10.0,  1.0, 11.0,
            20.0, 30.0, 21.0, 31.0,
             2.0, 12.0,  3.0, 13.0,
            22.0, 32.0, 23.0, 33.0,
        ];
        assert_eq!(y, expected);
    }

    #[test]
    fn std_pool_of_binary_pattern_is_half() {
        let x = t(vec![0.0, 1.0, 1.0, 0.0], &[1, 1, 2, 2]);
        let s: Vec<f64> = std_pool(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let m: Vec<f64> = avg_pool(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!((s[0] - 0.5).abs() < 1e-9);
        assert_eq!(m[0], 0.5);
    }

    #[test]
    fn weight_norm_reproduces_init_and_counts_gain() {
        let store = ParamStore::new(DType::F64, 3);
        let conv = Conv2d::new(&store.root().pp("c"), 4, 6, 3, ConvOpts::wn()).unwrap();
        let v = store.get("c.weight_v").unwrap();
        let w = conv.weight().unwrap();
        let diff = (w - v.as_tensor()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-9);
        assert_eq!(conv.params(), 9 * 4 * 6 + 6 + 6);
        assert_eq!(conv.params(), store.total_elements());
    }

    #[test]
    fn zeroed_weight_norm_conv_is_zero_not_nan() {
        let store = ParamStore::new(DType::F64, 3);
        let conv = Conv2d::new(&store.root().pp("c"), 2, 2, 3, ConvOpts::wn()).unwrap();
        store.zero_all().unwrap();
        let x = Tensor::ones((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let y: Vec<f64> = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_rejects_wrong_width() {
        let store = ParamStore::new(DType::F32, 0);
        let conv = Conv2d::new(&store.root().pp("c"), 3, 4, 1, ConvOpts::default()).unwrap();
        let x = Tensor::zeros((1, 5, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(conv.forward(&x), Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_normalises_last_axis() {
        let store = ParamStore::new(DType::F64, 0);
        let ln = LayerNorm::new(&store.root().pp("ln"), 4).unwrap();
        let x = t(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 4]);
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
