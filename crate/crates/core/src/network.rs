//! Full cloud-removal network: shallow feature extraction, `D` stacked
//! SGCI + SLFC blocks, and a reconstruction head with a global residual.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::blocks::{self, BlockShape, SgciLayout, SgciParams, SlfcParams, WindowPlan};
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Element, Tensor};

/// SAR input channels (VV, VH).
pub const SAR_BANDS: usize = 2;

/// Architecture variant; every variant except `Full` removes one mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Optical stream only.
    NoSar,
    /// SAR stacked onto the optical input of a single stream.
    Concat,
    /// No attention layers in the SGCI blocks.
    NoStl,
    /// Attention layers kept, SAR guidance of optical scores removed.
    NoGf,
    /// SLFC without dynamic filtering.
    NoDf,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoSar,
        Variant::Concat,
        Variant::NoStl,
        Variant::NoGf,
        Variant::NoDf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSar => "no_sar",
            Variant::Concat => "concat",
            Variant::NoStl => "no_stl",
            Variant::NoGf => "no_gf",
            Variant::NoDf => "no_df",
        }
    }

    /// Separate optical and SAR feature streams.
    pub fn two_stream(self) -> bool {
        !matches!(self, Variant::NoSar | Variant::Concat)
    }

    /// Whether the model consumes SAR input at all.
    pub fn uses_sar(self) -> bool {
        self != Variant::NoSar
    }

    fn sgci_layout(self) -> SgciLayout {
        SgciLayout {
            two_stream: self.two_stream(),
            attention: self != Variant::NoStl,
            guided: matches!(self, Variant::Full | Variant::NoDf),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Optical bands.
    pub bands: usize,
    /// Feature width `C`.
    pub channels: usize,
    /// Number of SGCI + SLFC pairs `D`.
    pub blocks: usize,
    /// Dense stages per SGCI stream.
    pub dense: usize,
    /// Window side `M`.
    pub window: usize,
    pub heads: usize,
    /// Dynamic filter size `k`.
    pub filter: usize,
    pub mlp_ratio: usize,
    pub shift: bool,
    pub variant: Variant,
    pub slfc_residual_on_filtered: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small CPU-friendly configuration.
    pub fn desk() -> Self {
        ModelConfig {
            bands: 13,
            channels: 16,
            blocks: 2,
            dense: 3,
            window: 8,
            heads: 4,
            filter: 3,
            mlp_ratio: 2,
            shift: true,
            variant: Variant::Full,
            slfc_residual_on_filtered: false,
        }
    }

    /// Published depth/width settings (`C` is not published; 96 is used).
    pub fn paper() -> Self {
        ModelConfig {
            channels: 96,
            blocks: 6,
            dense: 5,
            heads: 8,
            filter: 5,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.bands == 0 || self.channels == 0 || self.blocks == 0 || self.dense == 0 || self.mlp_ratio == 0 {
            return fail("bands, channels, blocks, dense and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.filter.is_multiple_of(2) {
            return fail(format!("filter size must be odd, got {}", self.filter));
        }
        if self.window == 0 || (self.shift && !self.window.is_multiple_of(2)) {
            return fail(format!("window {} must be positive and even when shifting", self.window));
        }
        Ok(())
    }

    fn shape(&self) -> BlockShape {
        BlockShape {
            channels: self.channels,
            dense: self.dense,
            window: self.window,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            filter: self.filter,
        }
    }

    fn input_bands(&self) -> usize {
        if self.variant == Variant::Concat {
            self.bands + SAR_BANDS
        } else {
            self.bands
        }
    }

    /// Ordered `(key, value)` description used in checkpoint headers.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("bands", self.bands.to_string()),
            ("channels", self.channels.to_string()),
            ("blocks", self.blocks.to_string()),
            ("dense", self.dense.to_string()),
            ("window", self.window.to_string()),
            ("heads", self.heads.to_string()),
            ("filter", self.filter.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("shift", self.shift.to_string()),
            ("variant", self.variant.to_string()),
            ("slfc_residual_on_filtered", self.slfc_residual_on_filtered.to_string()),
        ]
    }

    /// Apply one `key = value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected true/false, got {v:?}")))
        }
        match key {
            "bands" => self.bands = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "dense" => self.dense = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "filter" => self.filter = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "shift" => self.shift = flag(key, value)?,
            "variant" => self.variant = value.parse()?,
            "slfc_residual_on_filtered" => self.slfc_residual_on_filtered = flag(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// First field whose value differs from `other`, as `(key, ours, theirs)`.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<(&'static str, String, String)> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .find(|(a, b)| a.1 != b.1)
            .map(|(a, b)| (a.0, a.1, b.1))
    }
}

/// Exact trainable scalar count for `config`:
///
/// ```text
/// conv(i, o, k)  = i*o*k^2 + o
/// sfe            = conv(bands_in, C, 3) + [two-stream] conv(2, C, 3)
/// stream         = sum_{j=1..n} conv(C*j, C, 3) + conv(C*n, C, 1)
/// stl            = 2*2C + (3C^2 + 3C) + (2M-1)^2*heads + (C^2 + C)
///                  + (r*C^2 + r*C) + (r*C^2 + C)
/// sgci           = streams * (stream + [attention] n*stl) + [guided] n*(heads^2 + heads)
/// slfc           = [dynamic filter] (conv(2C, C, 3) + 4 conv(C, C, 3) + conv(C, C*k^2, 1))
///                  + 2 conv(C, C, 1)                          (two-stream only)
/// head           = conv(D*C, C, 1) + conv(C, bands, 3)
/// total          = sfe + D*(sgci + slfc) + head
/// ```
pub fn count_params(config: &ModelConfig) -> usize {
    let c = config.channels;
    let v = config.variant;
    let mut total = Conv::param_count(config.input_bands(), c, 3);
    if v.two_stream() {
        total += Conv::param_count(SAR_BANDS, c, 3);
    }
    let per_block = SgciParams::param_count(config.shape(), v.sgci_layout())
        + if v.two_stream() {
            SlfcParams::param_count(c, config.filter, v != Variant::NoDf)
        } else {
            0
        };
    total += config.blocks * per_block;
    total + Conv::param_count(config.blocks * c, c, 1) + Conv::param_count(c, config.bands, 3)
}

#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub sgci: SgciParams,
    pub slfc: Option<SlfcParams>,
}

/// Network structure plus its parameters.
#[derive(Debug, Clone)]
pub struct GlfcrModel<T: Element> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub sfe_opt: Conv,
    pub sfe_sar: Option<Conv>,
    pub blocks: Vec<FusionBlock>,
    pub head_fuse: Conv,
    pub head_out: Conv,
}

impl<T: Element> GlfcrModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let c = config.channels;
        let v = config.variant;
        let sfe_opt = Conv::new(&mut store, "sfe.opt", config.input_bands(), c, 3)?;
        let sfe_sar = if v.two_stream() {
            Some(Conv::new(&mut store, "sfe.sar", SAR_BANDS, c, 3)?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let sgci = SgciParams::new(&mut store, &format!("blocks.{i}.sgci"), config.shape(), v.sgci_layout())?;
            let slfc = if v.two_stream() {
                Some(SlfcParams::new(
                    &mut store,
                    &format!("blocks.{i}.slfc"),
                    c,
                    config.filter,
                    v != Variant::NoDf,
                    config.slfc_residual_on_filtered,
                )?)
            } else {
                None
            };
            blocks.push(FusionBlock { sgci, slfc });
        }
        let head_fuse = Conv::new(&mut store, "head.fuse", config.blocks * c, c, 1)?;
        let head_out = Conv::new(&mut store, "head.out", c, config.bands, 3)?;
        Ok(GlfcrModel {
            config,
            params: store,
            sfe_opt,
            sfe_sar,
            blocks,
            head_fuse,
            head_out,
        })
    }

    /// Zero the reconstruction head so the network returns its optical input.
    pub fn zero_head(&mut self) {
        for conv in [&self.head_fuse, &self.head_out] {
            for id in [conv.weight, conv.bias] {
                self.params.get_mut(id).value.data_mut().fill(T::ZERO);
            }
        }
    }

    /// Shallow features for each stream.
    pub fn sfe_forward(&self, g: &Graph<T>, p: &Bound, cloudy: Var, sar: Option<Var>) -> Result<(Var, Option<Var>)> {
        let v = self.config.variant;
        let cd = g.dims(cloudy);
        if cd.len() != 4 || cd[1] != self.config.bands {
            return Err(Error::shape("optical input", &cd, &[self.config.bands]));
        }
        let sar = match (v.uses_sar(), sar) {
            (true, None) => return Err(Error::Config(format!("variant {v} needs a SAR input"))),
            (true, Some(s)) => {
                let sd = g.dims(s);
                if sd.len() != 4 || sd[1] != SAR_BANDS || sd[0] != cd[0] || sd[2..] != cd[2..] {
                    return Err(Error::shape("sar input", &sd, &cd));
                }
                Some(s)
            }
            (false, _) => None,
        };
        match v {
            Variant::Concat => {
                let x = g.concat(&[cloudy, sar.expect("checked")], 1)?;
                Ok((self.sfe_opt.forward(g, p, x)?, None))
            }
            _ => {
                let f_opt = self.sfe_opt.forward(g, p, cloudy)?;
                let f_sar = match (&self.sfe_sar, sar) {
                    (Some(conv), Some(s)) => Some(conv.forward(g, p, s)?),
                    _ => None,
                };
                Ok((f_opt, f_sar))
            }
        }
    }

    /// Cloud-free estimate `I + H_IR([F^1_opt, ..., F^D_opt])`.
    pub fn forward(&self, g: &Graph<T>, p: &Bound, cloudy: Var, sar: Option<Var>) -> Result<Var> {
        let dims = g.dims(cloudy);
        if dims.len() != 4 {
            return Err(Error::shape("optical input", &dims, &[self.config.bands]));
        }
        let (h, w) = (dims[2], dims[3]);
        let m = self.config.window;
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape("input size vs window", &dims, &[m]));
        }
        let plan = WindowPlan::new(h, w, m, self.config.shift)?;
        let (mut f_opt, mut f_sar) = self.sfe_forward(g, p, cloudy, sar)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (o, s) = blocks::sgci_forward(g, p, &block.sgci, &plan, f_opt, f_sar)?;
            (f_opt, f_sar) = match (&block.slfc, s) {
                (Some(slfc), Some(s)) => {
                    let out = blocks::slfc_forward(g, p, slfc, o, s)?;
                    (out.opt, Some(out.sar))
                }
                (_, s) => (o, s),
            };
            outs.push(f_opt);
        }
        let cat = g.concat(&outs, 1)?;
        let x = g.relu(self.head_fuse.forward(g, p, cat)?);
        let x = self.head_out.forward(g, p, x)?;
        g.add(cloudy, x)
    }

    /// Inference on `[B, bands, H, W]` (and `[B, 2, H, W]` SAR), clamped to [0, 1].
    pub fn predict(&self, cloudy: &Tensor<T>, sar: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let c = g.constant(cloudy.clone());
        let s = sar.map(|s| g.constant(s.clone()));
        let out = self.forward(&g, &p, c, s)?;
        let out = g.tensor(out);
        Ok(out.map(|v| {
            if v < T::ZERO {
                T::ZERO
            } else if v > T::ONE {
                T::ONE
            } else {
                v
            }
        }))
    }
}

/// Free-function form of [`GlfcrModel::forward`].
pub fn glfcr_forward<T: Element>(g: &Graph<T>, p: &Bound, model: &GlfcrModel<T>, cloudy: Var, sar: Option<Var>) -> Result<Var> {
    model.forward(g, p, cloudy, sar)
}
