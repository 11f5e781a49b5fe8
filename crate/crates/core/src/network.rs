//! The full hybrid network: shallow convolution and token embedding, feature
//! shuffle weighted groups (FSWG), the CNN/Transformer trunk in one of four
//! topologies, and pixel-shuffle reconstruction over a bicubic baseline.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::bicubic::bicubic_resize_tensor;
use crate::complexity::{CostKind, CostSheet};
use crate::core_blocks::{Wdib, WdibConfig};
use crate::error::{Error, Result};
use crate::layers::{channel_shuffle, concat_channels, ensure_same_shape, pixel_shuffle, Conv2d, ConvOpts, Scalar};
use crate::params::{ParamStore, Scope};
use crate::transformer::{CrTransform, Embed, EtBlock, EtConfig, RcTransform, TokenSequence};

/// How the CNN and Transformer branches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// FSWGs, then the Transformer on the CNN output.
    CtSeries,
    /// Transformer first, then FSWGs on its output.
    TcSeries,
    /// Independent branches fused at the end.
    Parallel,
    /// Mid-trunk exchange: the second WDIB output of the first FSWG feeds the
    /// Transformer, whose output feeds the next FSWG and the final fusion.
    Interactive,
}

impl Topology {
    pub const ALL: [Topology; 4] = [
        Topology::CtSeries,
        Topology::TcSeries,
        Topology::Parallel,
        Topology::Interactive,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Topology::CtSeries => "ct_series",
            Topology::TcSeries => "tc_series",
            Topology::Parallel => "parallel",
            Topology::Interactive => "interactive",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ct" | "ct_series" => Ok(Topology::CtSeries),
            "tc" | "tc_series" => Ok(Topology::TcSeries),
            "parallel" => Ok(Topology::Parallel),
            "interactive" => Ok(Topology::Interactive),
            other => Err(Error::config(format!("unknown topology `{other}`"))),
        }
    }
}

/// How the Transformer output enters the FSWG after the first one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    Add,
    /// Concatenate and squeeze back to `C` with a 1×1 convolution.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiwhnConfig {
    pub scale: usize,
    pub n_fswg: usize,
    pub wdibs_per_fswg: usize,
    /// Stacked Efficient Transformer blocks.
    pub n_et: usize,
    pub topology: Topology,
    pub coupling: Coupling,
    /// Groups of the grouped 1×1 convolution and channel shuffle in FSWG.
    pub shuffle_groups: usize,
    pub wdib: WdibConfig,
    pub et: EtConfig,
}

impl Default for FiwhnConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            n_fswg: 2,
            wdibs_per_fswg: 3,
            n_et: 2,
            topology: Topology::Interactive,
            coupling: Coupling::Add,
            shuffle_groups: 2,
            wdib: WdibConfig::default(),
            et: EtConfig::default(),
        }
    }
}

impl FiwhnConfig {
    pub fn with_scale(scale: usize) -> Self {
        Self {
            scale,
            ..Self::default()
        }
    }

    /// Desk-sized configuration used by examples and quick tests.
    pub fn toy(scale: usize) -> Self {
        Self {
            scale,
            n_fswg: 2,
            wdibs_per_fswg: 2,
            n_et: 1,
            wdib: WdibConfig {
                channels: 12,
                wide_channels: 24,
                ccl_reduction: 4,
                ..WdibConfig::default()
            },
            et: EtConfig {
                dim: 16,
                heads: 2,
                splits: 4,
                mlp_ratio: 2.0,
            },
            ..Self::default()
        }
    }

    pub fn cnn_channels(&self) -> usize {
        self.wdib.channels
    }

    pub fn t_dim(&self) -> usize {
        self.et.dim
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::config(format!(
                "scale {} not in {{2, 3, 4}}",
                self.scale
            )));
        }
        if self.n_fswg == 0 {
            return Err(Error::config("n_fswg must be >= 1"));
        }
        if self.wdibs_per_fswg == 0 {
            return Err(Error::config("wdibs_per_fswg must be >= 1"));
        }
        if self.n_et == 0 {
            return Err(Error::config("n_et must be >= 1"));
        }
        let c = self.cnn_channels();
        if self.shuffle_groups == 0 || !(2 * c).is_multiple_of(self.shuffle_groups) || !c.is_multiple_of(self.shuffle_groups) {
            return Err(Error::config(format!(
                "shuffle_groups {} incompatible with {c} channels",
                self.shuffle_groups
            )));
        }
        self.wdib.validate()?;
        self.et.validate()?;
        Ok(())
    }

    /// LR grid that yields the given output resolution (rounded up).
    pub fn lr_size(&self, out_w: usize, out_h: usize) -> (usize, usize) {
        (out_w.div_ceil(self.scale), out_h.div_ceil(self.scale))
    }
}

/// `Shuffle(GConv(Concat[a, b]))`: grouped 1×1 convolution `2C -> C`, then
/// channel shuffle with the same group count.
#[derive(Debug, Clone)]
pub struct CgsFuse {
    gconv: Conv2d,
    groups: usize,
}

impl CgsFuse {
    pub fn new(scope: &Scope<'_>, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            gconv: Conv2d::new(scope, 2 * channels, channels, 1, ConvOpts::grouped(groups))?,
            groups,
        })
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ensure_same_shape(a, b, "cgs fuse")?;
        let y = self.gconv.forward(&concat_channels(&[a, b])?)?;
        channel_shuffle(&y, self.groups)
    }

    fn cost(&self, h: usize, w: usize) -> CostSheet {
        self.gconv.cost(h, w)
    }
}

/// Output of one FSWG pass.
#[derive(Debug, Clone)]
pub struct FswgOutput {
    pub out: Tensor,
    /// Output of every WDIB in order.
    pub taps: Vec<Tensor>,
}

/// Feature shuffle weighted group: WDIBs run in sequence, their outputs are
/// progressively fused pairwise, and
/// `out = λ_x (F_cgs + W_last) + λ_res x`.
///
/// With a single WDIB the fusion chain is empty and `F_cgs = W_1`.
#[derive(Debug, Clone)]
pub struct Fswg {
    path: String,
    blocks: Vec<Wdib>,
    fuse: Vec<CgsFuse>,
    lambda_x: Scalar,
    lambda_res: Scalar,
}

impl Fswg {
    pub fn new(scope: &Scope<'_>, cfg: &FiwhnConfig) -> Result<Self> {
        let c = cfg.cnn_channels();
        let blocks = (0..cfg.wdibs_per_fswg)
            .map(|i| Wdib::new(&scope.pp(format!("block.{i}")), &cfg.wdib))
            .collect::<Result<Vec<_>>>()?;
        let fuse = (0..cfg.wdibs_per_fswg.saturating_sub(1))
            .map(|i| CgsFuse::new(&scope.pp(format!("fuse.{i}")), c, cfg.shuffle_groups))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            path: scope.path().to_string(),
            blocks,
            fuse,
            lambda_x: Scalar::new(scope, "lambda_x", 1.0, cfg.wdib.adaptive)?,
            lambda_res: Scalar::new(scope, "lambda_res", 1.0, cfg.wdib.adaptive)?,
        })
    }

    pub fn blocks(&self) -> &[Wdib] {
        &self.blocks
    }

    pub fn fuse_units(&self) -> usize {
        self.fuse.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<FswgOutput> {
        let mut taps = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h)?;
            taps.push(h.clone());
        }
        let mut fused = taps[0].clone();
        for (unit, next) in self.fuse.iter().zip(taps.iter().skip(1)) {
            fused = unit.forward(&fused, next)?;
        }
        let last = taps.last().expect("at least one WDIB");
        let out = (self.lambda_x.apply(&(fused + last)?)? + self.lambda_res.apply(x)?)?;
        Ok(FswgOutput { out, taps })
    }

    pub fn cost(&self, h: usize, w: usize) -> CostSheet {
        let mut s = CostSheet::new();
        for b in &self.blocks {
            s.extend(b.cost(h, w));
        }
        for f in &self.fuse {
            s.extend(f.cost(h, w));
        }
        let scalars = self.lambda_x.params() + self.lambda_res.params();
        if scalars > 0 {
            s.push(format!("{}.lambda", self.path), CostKind::Other, scalars, 0);
        }
        s
    }
}

/// Trunk output plus structural bookkeeping used by tests.
#[derive(Debug, Clone)]
pub struct TrunkOutput {
    pub features: Tensor,
    /// How many times the interaction tap was consumed.
    pub tap_reads: usize,
    pub tokens: TokenSequence,
}

/// A built network and the parameters it owns.
pub struct Fiwhn {
    cfg: FiwhnConfig,
    store: ParamStore,
    head: Conv2d,
    embed: Embed,
    fswgs: Vec<Fswg>,
    ets: Vec<EtBlock>,
    cr: Option<CrTransform>,
    rc: RcTransform,
    rc_inject: Option<RcTransform>,
    coupling: Option<Conv2d>,
    fuse: Conv2d,
    recon: Conv2d,
}

impl fmt::Debug for Fiwhn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fiwhn")
            .field("topology", &self.cfg.topology)
            .field("scale", &self.cfg.scale)
            .field("params", &self.store.total_elements())
            .finish()
    }
}

impl Fiwhn {
    /// Build a model with freshly initialised parameters.
    pub fn new(cfg: &FiwhnConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        let c = cfg.cnn_channels();
        let d = cfg.t_dim();
        let head = Conv2d::new(&root.pp("head"), 3, c, 3, ConvOpts::default())?;
        let embed = Embed::new(&root.pp("embed"), 3, d)?;
        let fswgs = (0..cfg.n_fswg)
            .map(|i| Fswg::new(&root.pp(format!("fswg.{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        let ets = (0..cfg.n_et)
            .map(|i| EtBlock::new(&root.pp(format!("et.{i}")), &cfg.et))
            .collect::<Result<Vec<_>>>()?;
        let cr = match cfg.topology {
            Topology::Parallel => None,
            _ => Some(CrTransform::new(&root.pp("cr"), c, d)?),
        };
        let rc = RcTransform::new(&root.pp("rc"), d, c)?;
        let interactive = cfg.topology == Topology::Interactive;
        let rc_inject = if interactive {
            Some(RcTransform::new(&root.pp("rc_inject"), d, c)?)
        } else {
            None
        };
        let coupling = if interactive && cfg.coupling == Coupling::Concat {
            Some(Conv2d::new(&root.pp("coupling"), 2 * c, c, 1, ConvOpts::default())?)
        } else {
            None
        };
        let fuse = Conv2d::new(&root.pp("fuse"), 2 * c, c, 1, ConvOpts::default())?;
        let s2 = cfg.scale * cfg.scale;
        let recon = Conv2d::new(&root.pp("recon"), c, 3 * s2, 3, ConvOpts::default())?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            head,
            embed,
            fswgs,
            ets,
            cr,
            rc,
            rc_inject,
            coupling,
            fuse,
            recon,
        })
    }

    pub fn config(&self) -> &FiwhnConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn fswgs(&self) -> &[Fswg] {
        &self.fswgs
    }

    /// Total learnable elements.
    pub fn num_params(&self) -> usize {
        self.store.total_elements()
    }

    /// Super-resolve `[N, 3, H, W]` images to `[N, 3, sH, sW]`. The output is
    /// not clamped.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let img = img.to_dtype(self.dtype())?;
        let (_, c, _, _) = img.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected a 3-channel image, got {c}")));
        }
        let f_c = self.head.forward(&img)?;
        let f_t = self.embed.forward(&img)?;
        let f_d = self.trunk(&f_c, &f_t)?.features;
        self.upsample_reconstruct(&f_d, &f_c, &img)
    }

    /// `pixel_shuffle(conv3x3(F_D + F_C)) + bicubic(I_LR)`.
    pub fn upsample_reconstruct(&self, f_d: &Tensor, shallow: &Tensor, img: &Tensor) -> Result<Tensor> {
        ensure_same_shape(f_d, shallow, "upsample input")?;
        let s = self.cfg.scale;
        let (_, _, h, w) = img.dims4()?;
        let residual = pixel_shuffle(&self.recon.forward(&(f_d + shallow)?)?, s)?;
        let base = bicubic_resize_tensor(img, h * s, w * s)?;
        Ok((residual + base)?)
    }

    fn transformer(&self, t: &TokenSequence) -> Result<TokenSequence> {
        let mut t = t.clone();
        for et in &self.ets {
            t = et.forward(&t)?;
        }
        Ok(t)
    }

    fn run_fswgs(&self, groups: &[Fswg], x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for g in groups {
            h = g.forward(&h)?.out;
        }
        Ok(h)
    }

    fn final_fuse(&self, local: &Tensor, global: &Tensor) -> Result<Tensor> {
        self.fuse.forward(&concat_channels(&[local, global])?)
    }

    /// Deep features `F_D` from shallow CNN features and embedded tokens.
    pub fn trunk(&self, f_c: &Tensor, f_t: &TokenSequence) -> Result<TrunkOutput> {
        match self.cfg.topology {
            Topology::CtSeries => {
                let local = self.run_fswgs(&self.fswgs, f_c)?;
                let cr = self.cr.as_ref().expect("series topologies carry cr");
                let tokens = self.transformer(&cr.forward_onto(&local, f_t)?.add(f_t)?)?;
                let global = self.rc.forward(&tokens)?;
                Ok(TrunkOutput {
                    features: self.final_fuse(&local, &global)?,
                    tap_reads: 0,
                    tokens,
                })
            }
            Topology::TcSeries => {
                let cr = self.cr.as_ref().expect("series topologies carry cr");
                let tokens = self.transformer(&cr.forward_onto(f_c, f_t)?.add(f_t)?)?;
                let global = self.rc.forward(&tokens)?;
                let local = self.run_fswgs(&self.fswgs, &(f_c + &global)?)?;
                Ok(TrunkOutput {
                    features: self.final_fuse(&local, &global)?,
                    tap_reads: 0,
                    tokens,
                })
            }
            Topology::Parallel => {
                let local = self.run_fswgs(&self.fswgs, f_c)?;
                let tokens = self.transformer(f_t)?;
                let global = self.rc.forward(&tokens)?;
                Ok(TrunkOutput {
                    features: self.final_fuse(&local, &global)?,
                    tap_reads: 0,
                    tokens,
                })
            }
            Topology::Interactive => self.interaction_forward(f_c, f_t),
        }
    }

    /// Interactive trunk:
    /// `T = ET(…ET(G_CR(W_2) + F_T))`, the next FSWG consumes
    /// `O_1 + G_RC'(T)`, and `F_D = conv1x1(concat(O_last, G_RC(T)))`.
    pub fn interaction_forward(&self, f_c: &Tensor, f_t: &TokenSequence) -> Result<TrunkOutput> {
        if self.cfg.topology != Topology::Interactive {
            return Err(Error::config("interaction_forward needs the interactive topology"));
        }
        let (first, rest) = self.fswgs.split_first().expect("n_fswg >= 1");
        let FswgOutput { out: o1, taps } = first.forward(f_c)?;
        let tap = &taps[1.min(taps.len() - 1)];
        let mut tap_reads = 0;
        let cr = self.cr.as_ref().expect("interactive topology carries cr");
        let injected = cr.forward_onto(tap, f_t)?;
        tap_reads += 1;
        let tokens = self.transformer(&injected.add(f_t)?)?;

        let inject = self
            .rc_inject
            .as_ref()
            .expect("interactive topology carries rc_inject")
            .forward(&tokens)?;
        let local_in = match &self.coupling {
            Some(conv) => conv.forward(&concat_channels(&[&o1, &inject])?)?,
            None => (&o1 + &inject)?,
        };
        let local = self.run_fswgs(rest, &local_in)?;
        let global = self.rc.forward(&tokens)?;
        Ok(TrunkOutput {
            features: self.final_fuse(&local, &global)?,
            tap_reads,
            tokens,
        })
    }

    /// Closed-form per-layer parameters and multiply-adds for an LR input of
    /// `h × w`.
    pub fn cost(&self, h: usize, w: usize) -> CostSheet {
        let mut s = self.head.cost(h, w);
        s.extend(self.embed.cost(h, w));
        for g in &self.fswgs {
            s.extend(g.cost(h, w));
        }
        for et in &self.ets {
            s.extend(et.cost(h * w));
        }
        if let Some(cr) = &self.cr {
            s.extend(cr.cost(h, w));
        }
        s.extend(self.rc.cost(h, w));
        if let Some(rc) = &self.rc_inject {
            s.extend(rc.cost(h, w));
        }
        if let Some(c) = &self.coupling {
            s.extend(c.cost(h, w));
        }
        s.extend(self.fuse.cost(h, w));
        s.extend(self.recon.cost(h, w));
        s
    }

    /// Cost at a given *output* resolution.
    pub fn cost_at_output(&self, out_w: usize, out_h: usize) -> CostSheet {
        let (w, h) = self.cfg.lr_size(out_w, out_h);
        self.cost(h, w)
    }
}

/// Build a model for a topology, keeping everything else in `cfg`.
pub fn build_topology(cfg: &FiwhnConfig, topology: Topology, dtype: DType, seed: u64) -> Result<Fiwhn> {
    let cfg = FiwhnConfig {
        topology,
        ..cfg.clone()
    };
    Fiwhn::new(&cfg, dtype, seed)
}
