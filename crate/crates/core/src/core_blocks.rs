//! CNN building blocks: wide-activation residual weighting units, combination
//! coefficient learning gates, paired skip connections, distillation
//! branches, self-calibrating fusion and the assembled distillation
//! interaction block (WDIB).
//!
//! All convolutions are stride 1 with `padding = kernel / 2`, so every block
//! preserves `(N, H, W)`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::complexity::{CostKind, CostSheet};
use crate::error::{Error, Result};
use crate::layers::{
    avg_pool, concat_channels, ensure_same_shape, sigmoid, std_pool, Conv2d, ConvOpts, Scalar,
};
use crate::params::Scope;

/// Main path of a residual weighting unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    /// 1×1 up to `wide_channels`, ReLU, 1×1 down, 3×3.
    Wide,
    /// Two 3×3 convolutions with a ReLU between them.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WdibConfig {
    pub channels: usize,
    pub distill_ratio: f64,
    pub wide_channels: usize,
    pub ccl_reduction: usize,
    pub unit: UnitKind,
    /// One WIRW and one WCRW instance reused at every position of the block
    /// instead of separate instances per position.
    pub share_units: bool,
    /// Self-calibrating fusion of the two branches; a plain concat + 1×1
    /// convolution when off.
    pub scf: bool,
    /// Multiplicative coarse-fine interaction; additive when off.
    pub interaction: bool,
    /// Learnable λ multipliers; pinned to 1 when off.
    pub adaptive: bool,
}

impl Default for WdibConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            distill_ratio: 0.5,
            wide_channels: 120,
            ccl_reduction: 4,
            unit: UnitKind::Wide,
            share_units: true,
            scf: true,
            interaction: true,
            adaptive: true,
        }
    }
}

impl WdibConfig {
    /// `(remain, distill)` channel counts. The remain part takes the larger
    /// half when `C · ratio` falls on a half.
    pub fn split_sizes(&self) -> (usize, usize) {
        split_sizes(self.channels, self.distill_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("wdib.channels must be >= 1"));
        }
        if !(self.distill_ratio > 0.0 && self.distill_ratio < 1.0) {
            return Err(Error::config(format!(
                "wdib.distill_ratio {} outside (0, 1)",
                self.distill_ratio
            )));
        }
        let (remain, distill) = self.split_sizes();
        if remain == 0 || distill == 0 {
            return Err(Error::config(format!(
                "distill ratio {} leaves an empty part of {} channels",
                self.distill_ratio, self.channels
            )));
        }
        if self.unit == UnitKind::Wide && self.wide_channels <= self.channels {
            return Err(Error::config(format!(
                "wide_channels ({}) must exceed channels ({})",
                self.wide_channels, self.channels
            )));
        }
        if self.ccl_reduction == 0 {
            return Err(Error::config("ccl_reduction must be >= 1"));
        }
        Ok(())
    }
}

pub fn split_sizes(channels: usize, ratio: f64) -> (usize, usize) {
    let remain = ((channels as f64) * (1.0 - ratio) - 1e-9).ceil().max(0.0) as usize;
    let remain = remain.min(channels);
    (remain, channels - remain)
}

/// Contiguous channel split: first `remain` channels, then `distill`.
pub fn channel_split(x: &Tensor, ratio: f64) -> Result<(Tensor, Tensor)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let c = x.dim(1)?;
    let (remain, distill) = split_sizes(c, ratio);
    if remain == 0 || distill == 0 {
        return Err(Error::config(format!(
            "split ratio {ratio} leaves an empty part of {c} channels"
        )));
    }
    Ok((x.narrow(1, 0, remain)?, x.narrow(1, remain, distill)?))
}

/// The wide-activation feature path `conv3(down(relu(up(x))))`, all convs
/// weight normalised.
#[derive(Debug, Clone)]
pub struct WideFeature {
    up: Conv2d,
    down: Conv2d,
    conv3: Conv2d,
}

impl WideFeature {
    pub fn new(scope: &Scope<'_>, in_ch: usize, out_ch: usize, wide: usize) -> Result<Self> {
        Ok(Self {
            up: Conv2d::new(&scope.pp("up"), in_ch, wide, 1, ConvOpts::wn())?,
            down: Conv2d::new(&scope.pp("down"), wide, out_ch, 1, ConvOpts::wn())?,
            conv3: Conv2d::new(&scope.pp("conv3"), out_ch, out_ch, 3, ConvOpts::wn())?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_preactivation(x)?.0)
    }

    /// Output together with the wide tensor fed to the ReLU.
    pub fn forward_with_preactivation(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let pre = self.up.forward(x)?;
        let y = self.conv3.forward(&self.down.forward(&pre.relu()?)?)?;
        Ok((y, pre))
    }

    fn cost(&self, h: usize, w: usize) -> CostSheet {
        let mut s = self.up.cost(h, w);
        s.extend(self.down.cost(h, w));
        s.extend(self.conv3.cost(h, w));
        s
    }
}

#[derive(Debug, Clone)]
struct PlainFeature {
    conv_a: Conv2d,
    conv_b: Conv2d,
}

impl PlainFeature {
    fn new(scope: &Scope<'_>, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv_a: Conv2d::new(&scope.pp("conv_a"), in_ch, out_ch, 3, ConvOpts::default())?,
            conv_b: Conv2d::new(&scope.pp("conv_b"), out_ch, out_ch, 3, ConvOpts::default())?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv_b.forward(&self.conv_a.forward(x)?.relu()?)
    }

    fn cost(&self, h: usize, w: usize) -> CostSheet {
        let mut s = self.conv_a.cost(h, w);
        s.extend(self.conv_b.cost(h, w));
        s
    }
}

#[derive(Debug, Clone)]
enum MainPath {
    Wide(WideFeature),
    Plain(PlainFeature),
}

/// `λ_x · F(x) + λ_res · S(x)`, where `S` is the identity (WIRW) or a 3×3
/// convolution that restores the full width (WCRW).
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    path: String,
    main: MainPath,
    shortcut: Option<Conv2d>,
    lambda_x: Scalar,
    lambda_res: Scalar,
    in_ch: usize,
    out_ch: usize,
}

impl ResidualUnit {
    /// Identity-shortcut unit (WIRW), `C -> C`.
    pub fn wirw(scope: &Scope<'_>, cfg: &WdibConfig) -> Result<Self> {
        Self::new(scope, cfg, cfg.channels, cfg.channels)
    }

    /// Convolutional-shortcut unit (WCRW), `C_remain -> C`.
    pub fn wcrw(scope: &Scope<'_>, cfg: &WdibConfig) -> Result<Self> {
        let (remain, _) = cfg.split_sizes();
        Self::new(scope, cfg, remain, cfg.channels)
    }

    fn new(scope: &Scope<'_>, cfg: &WdibConfig, in_ch: usize, out_ch: usize) -> Result<Self> {
        let main = match cfg.unit {
            UnitKind::Wide => MainPath::Wide(WideFeature::new(
                &scope.pp("body"),
                in_ch,
                out_ch,
                cfg.wide_channels,
            )?),
            UnitKind::Plain => MainPath::Plain(PlainFeature::new(&scope.pp("body"), in_ch, out_ch)?),
        };
        let shortcut = if in_ch != out_ch {
            let opts = match cfg.unit {
                UnitKind::Wide => ConvOpts::wn(),
                UnitKind::Plain => ConvOpts::default(),
            };
            Some(Conv2d::new(&scope.pp("shortcut"), in_ch, out_ch, 3, opts)?)
        } else {
            None
        };
        Ok(Self {
            path: scope.path().to_string(),
            main,
            shortcut,
            lambda_x: Scalar::new(scope, "lambda_x", 1.0, cfg.adaptive)?,
            lambda_res: Scalar::new(scope, "lambda_res", 1.0, cfg.adaptive)?,
            in_ch,
            out_ch,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn wide_feature(&self) -> Option<&WideFeature> {
        match &self.main {
            MainPath::Wide(w) => Some(w),
            MainPath::Plain(_) => None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_ch {
            return Err(Error::config(format!(
                "{}: expected {} channels, got {c}",
                self.path, self.in_ch
            )));
        }
        let main = match &self.main {
            MainPath::Wide(w) => w.forward(x)?,
            MainPath::Plain(p) => p.forward(x)?,
        };
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((self.lambda_x.apply(&main)? + self.lambda_res.apply(&skip)?)?)
    }

    fn cost(&self, h: usize, w: usize) -> CostSheet {
        let mut s = match &self.main {
            MainPath::Wide(m) => m.cost(h, w),
            MainPath::Plain(p) => p.cost(h, w),
        };
        if let Some(conv) = &self.shortcut {
            s.extend(conv.cost(h, w));
        }
        let scalars = self.lambda_x.params() + self.lambda_res.params();
        if scalars > 0 {
            s.push(format!("{}.lambda", self.path), CostKind::Other, scalars, 0);
        }
        s
    }
}

/// Combination coefficient learning: a channel gate averaging the sigmoid
/// responses to average-pooled and standard-deviation-pooled statistics.
/// Both statistics pass through the same reduce/expand convolutions.
#[derive(Debug, Clone)]
pub struct Ccl {
    reduce: Conv2d,
    expand: Conv2d,
}

impl Ccl {
    pub fn new(scope: &Scope<'_>, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = channels.div_ceil(reduction.max(1));
        Ok(Self {
            reduce: Conv2d::new(&scope.pp("reduce"), channels, hidden, 1, ConvOpts::default())?,
            expand: Conv2d::new(&scope.pp("expand"), hidden, channels, 1, ConvOpts::default())?,
        })
    }

    /// Gate of shape `[N, C, 1, 1]`, every entry in `(0, 1)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let branch = |stat: Tensor| -> Result<Tensor> {
            sigmoid(&self.expand.forward(&self.reduce.forward(&stat)?)?)
        };
        let gp = branch(avg_pool(x)?)?;
        let sdp = branch(std_pool(x)?)?;
        Ok(((gp + sdp)? * 0.5)?)
    }

    fn cost(&self) -> CostSheet {
        let mut s = self.reduce.cost(1, 1);
        s.extend(self.expand.cost(1, 1));
        s.scaled(2)
    }
}

/// `Θ(x, y) = x + y ⊙ M(y)`.
pub fn paired_skip(x: &Tensor, y: &Tensor, gate: &Ccl) -> Result<Tensor> {
    ensure_same_shape(x, y, "paired skip")?;
    Ok((x + y.broadcast_mul(&gate.forward(y)?)?)?)
}

/// `sigmoid(conv3x3(x_distill))`, widening `C_distill -> C`.
#[derive(Debug, Clone)]
pub struct DistillBranch {
    conv: Conv2d,
}

impl DistillBranch {
    pub fn new(scope: &Scope<'_>, distill_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&scope.pp("conv"), distill_ch, out_ch, 3, ConvOpts::default())?,
        })
    }

    pub fn forward(&self, xd: &Tensor) -> Result<Tensor> {
        sigmoid(&self.conv.forward(xd)?)
    }

    fn cost(&self, h: usize, w: usize) -> CostSheet {
        self.conv.cost(h, w)
    }
}

/// Self-calibrating fusion: the concatenated inputs are squeezed by a 1×1
/// convolution, a CCL gate `g` of that map weights the inputs as
/// `g ⊙ a + (1 − g) ⊙ b`, and a 3×3 convolution refines the sum.
#[derive(Debug, Clone)]
pub struct Scf {
    fuse: Conv2d,
    gate: Ccl,
    refine: Conv2d,
}

impl Scf {
    pub fn new(scope: &Scope<'_>, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            fuse: Conv2d::new(&scope.pp("fuse"), 2 * channels, channels, 1, ConvOpts::default())?,
            gate: Ccl::new(&scope.pp("gate"), channels, reduction)?,
            refine: Conv2d::new(&scope.pp("refine"), channels, channels, 3, ConvOpts::default())?,
        })
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ensure_same_shape(a, b, "scf")?;
        let fused = self.fuse.forward(&concat_channels(&[a, b])?)?;
        let g = self.gate.forward(&fused)?;
        let one_minus = g.affine(-1.0, 1.0)?;
        let mixed = (a.broadcast_mul(&g)? + b.broadcast_mul(&one_minus)?)?;
        self.refine.forward(&mixed)
    }

    fn cost(&self, h: usize, w: usize) -> CostSheet {
        let mut s = self.fuse.cost(h, w);
        s.extend(self.gate.cost());
        s.extend(self.refine.cost(h, w));
        s
    }
}

#[derive(Debug, Clone)]
enum Fusion {
    Scf(Scf),
    Concat(Conv2d),
}

impl Fusion {
    fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        match self {
            Fusion::Scf(s) => s.forward(a, b),
            Fusion::Concat(conv) => {
                ensure_same_shape(a, b, "fusion")?;
                conv.forward(&concat_channels(&[a, b])?)
            }
        }
    }

    fn cost(&self, h: usize, w: usize) -> CostSheet {
        match self {
            Fusion::Scf(s) => s.cost(h, w),
            Fusion::Concat(conv) => conv.cost(h, w),
        }
    }
}

/// Every intermediate of one WDIB forward pass.
#[derive(Debug, Clone)]
pub struct WdibTrace {
    pub x1: Tensor,
    pub x2: Tensor,
    pub v_prev: Tensor,
    pub u_prev: Tensor,
    pub v: Tensor,
    pub u: Tensor,
    pub distill_u: Tensor,
    pub distill_d: Tensor,
    pub xi: Tensor,
    pub xj: Tensor,
    pub out: Tensor,
    pub distill_events: usize,
}

/// Wide-residual distillation interaction block.
#[derive(Debug, Clone)]
pub struct Wdib {
    cfg: WdibConfig,
    path: String,
    /// One shared instance, or four: head, second branch, and the two
    /// pre-fusion units.
    wirw: Vec<ResidualUnit>,
    /// One shared instance, or one per branch.
    wcrw: Vec<ResidualUnit>,
    /// `M^u_{i-1}`, `M^d_{i-1}`, `M^u_i`, `M^d_i`.
    gates: [Ccl; 4],
    distill: [DistillBranch; 2],
    fusion: Fusion,
}

impl Wdib {
    pub fn new(scope: &Scope<'_>, cfg: &WdibConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let (_, distill_ch) = cfg.split_sizes();
        let (n_wirw, n_wcrw) = if cfg.share_units { (1, 1) } else { (4, 2) };
        let wirw = (0..n_wirw)
            .map(|k| ResidualUnit::wirw(&scope.pp(format!("wirw.{k}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        let wcrw = (0..n_wcrw)
            .map(|k| ResidualUnit::wcrw(&scope.pp(format!("wcrw.{k}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        let gate = |k: usize| Ccl::new(&scope.pp(format!("ccl.{k}")), c, cfg.ccl_reduction);
        let gates = [gate(0)?, gate(1)?, gate(2)?, gate(3)?];
        let distill = [
            DistillBranch::new(&scope.pp("distill.0"), distill_ch, c)?,
            DistillBranch::new(&scope.pp("distill.1"), distill_ch, c)?,
        ];
        let fusion = if cfg.scf {
            Fusion::Scf(Scf::new(&scope.pp("scf"), c, cfg.ccl_reduction)?)
        } else {
            Fusion::Concat(Conv2d::new(
                &scope.pp("fuse"),
                2 * c,
                c,
                1,
                ConvOpts::default(),
            )?)
        };
        Ok(Self {
            cfg: cfg.clone(),
            path: scope.path().to_string(),
            wirw,
            wcrw,
            gates,
            distill,
            fusion,
        })
    }

    pub fn config(&self) -> &WdibConfig {
        &self.cfg
    }

    fn wirw_at(&self, position: usize) -> &ResidualUnit {
        &self.wirw[position.min(self.wirw.len() - 1)]
    }

    fn wcrw_at(&self, position: usize) -> &ResidualUnit {
        &self.wcrw[position.min(self.wcrw.len() - 1)]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x)?.out)
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<WdibTrace> {
        let c = x.dim(1)?;
        if c != self.cfg.channels {
            return Err(Error::config(format!(
                "{}: expected {} channels, got {c}",
                self.path, self.cfg.channels
            )));
        }
        let ratio = self.cfg.distill_ratio;
        let [m_u_prev, m_d_prev, m_u, m_d] = &self.gates;

        // Upper branch and first paired skip.
        let (remain1, distill1) = channel_split(&self.wirw_at(0).forward(x)?, ratio)?;
        let x1 = self.wcrw_at(0).forward(&remain1)?;
        let v_prev = paired_skip(x, &x1, m_u_prev)?;
        let u_prev = paired_skip(&x1, x, m_d_prev)?;

        // Lower branch and second paired skip.
        let (remain2, distill2) = channel_split(&self.wirw_at(1).forward(&v_prev)?, ratio)?;
        let x2 = self.wcrw_at(1).forward(&remain2)?;
        let v = paired_skip(&x2, &u_prev, m_u)?;
        let u = paired_skip(&u_prev, &x2, m_d)?;

        // Coarse features and their interaction with the fine ones.
        let distill_u = self.distill[0].forward(&distill1)?;
        let distill_d = self.distill[1].forward(&distill2)?;
        let (xi, xj) = if self.cfg.interaction {
            ((&u * &distill_u)?, (&v * &distill_d)?)
        } else {
            ((&u + &distill_u)?, (&v + &distill_d)?)
        };

        let fused = self
            .fusion
            .forward(&self.wirw_at(2).forward(&xi)?, &self.wirw_at(3).forward(&xj)?)?;
        let out = (fused + x)?;
        Ok(WdibTrace {
            x1,
            x2,
            v_prev,
            u_prev,
            v,
            u,
            distill_u,
            distill_d,
            xi,
            xj,
            out,
            distill_events: 2,
        })
    }

    pub fn cost(&self, h: usize, w: usize) -> CostSheet {
        let mut s = CostSheet::new();
        let wirw_calls = 4 / self.wirw.len() as u64;
        for unit in &self.wirw {
            s.extend(unit.cost(h, w).scaled(wirw_calls));
        }
        let wcrw_calls = 2 / self.wcrw.len() as u64;
        for unit in &self.wcrw {
            s.extend(unit.cost(h, w).scaled(wcrw_calls));
        }
        for g in &self.gates {
            s.extend(g.cost());
        }
        for d in &self.distill {
            s.extend(d.cost(h, w));
        }
        s.extend(self.fusion.cost(h, w));
        s
    }

    pub fn params(&self) -> usize {
        self.cost(1, 1).params()
    }
}
