//! Two-stream fusion blocks.
//!
//! * SGCI: per-stream dense convolution stages, each followed by a paired
//!   windowed attention layer in which SAR scores refine optical scores.
//! * SLFC: SAR features are filtered by per-pixel dynamic filters, then
//!   exchanged with the optical features through two gated residuals.

use crate::attention::{self, AttentionGate, StlParams, WindowGrid};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::{Bound, ParamStore};
use crate::tensor::Element;

/// Unshifted and (optionally) half-window-shifted grids for one map size.
/// Stage `j` of a block uses the shifted grid when `j` is odd.
#[derive(Debug, Clone)]
pub struct WindowPlan {
    pub plain: WindowGrid,
    pub shifted: Option<WindowGrid>,
}

impl WindowPlan {
    pub fn new(height: usize, width: usize, window: usize, shift: bool) -> Result<Self> {
        let plain = WindowGrid::new(height, width, window, 0)?;
        let shifted = if shift {
            Some(WindowGrid::new(height, width, window, window / 2)?)
        } else {
            None
        };
        Ok(WindowPlan { plain, shifted })
    }

    pub fn stage(&self, j: usize) -> &WindowGrid {
        match &self.shifted {
            Some(s) if j % 2 == 1 => s,
            _ => &self.plain,
        }
    }
}

/// One stream of dense convolution stages plus the 1x1 fusion conv.
#[derive(Debug, Clone)]
pub struct DenseStream {
    pub convs: Vec<Conv>,
    pub fuse: Conv,
}

impl DenseStream {
    fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize, stages: usize) -> Result<Self> {
        let convs = (1..=stages)
            .map(|j| Conv::new(store, &format!("{name}.dense.{}", j - 1), c * j, c, 3))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv::new(store, &format!("{name}.fuse"), c * stages, c, 1)?;
        Ok(DenseStream { convs, fuse })
    }

    fn param_count(c: usize, stages: usize) -> usize {
        (1..=stages).map(|j| Conv::param_count(c * j, c, 3)).sum::<usize>() + Conv::param_count(c * stages, c, 1)
    }
}

/// Shape hyperparameters shared by the blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub channels: usize,
    pub dense: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub filter: usize,
}

/// Which parts of an SGCI block exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SgciLayout {
    pub two_stream: bool,
    pub attention: bool,
    pub guided: bool,
}

#[derive(Debug, Clone)]
pub struct SgciParams {
    pub opt: DenseStream,
    pub sar: Option<DenseStream>,
    /// Per stage; empty when the block has no attention layers.
    pub opt_stl: Vec<StlParams>,
    pub sar_stl: Vec<StlParams>,
    /// Per stage; empty unless SAR guidance is on.
    pub gates: Vec<AttentionGate>,
}

impl SgciParams {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, s: BlockShape, layout: SgciLayout) -> Result<Self> {
        if layout.guided && !(layout.two_stream && layout.attention) {
            return Err(Error::Config("SAR guidance needs two streams with attention".into()));
        }
        let opt = DenseStream::new(store, &format!("{name}.opt"), s.channels, s.dense)?;
        let sar = if layout.two_stream {
            Some(DenseStream::new(store, &format!("{name}.sar"), s.channels, s.dense)?)
        } else {
            None
        };
        let mut opt_stl = Vec::new();
        let mut sar_stl = Vec::new();
        let mut gates = Vec::new();
        if layout.attention {
            for j in 0..s.dense {
                opt_stl.push(StlParams::new(
                    store,
                    &format!("{name}.opt.stl.{j}"),
                    s.channels,
                    s.heads,
                    s.window,
                    s.mlp_ratio,
                )?);
                if layout.two_stream {
                    sar_stl.push(StlParams::new(
                        store,
                        &format!("{name}.sar.stl.{j}"),
                        s.channels,
                        s.heads,
                        s.window,
                        s.mlp_ratio,
                    )?);
                }
                if layout.guided {
                    gates.push(AttentionGate::new(store, &format!("{name}.gate.{j}"), s.heads)?);
                }
            }
        }
        Ok(SgciParams {
            opt,
            sar,
            opt_stl,
            sar_stl,
            gates,
        })
    }

    pub fn param_count(s: BlockShape, layout: SgciLayout) -> usize {
        let streams = if layout.two_stream { 2 } else { 1 };
        let stl = if layout.attention {
            s.dense * StlParams::param_count(s.channels, s.heads, s.window, s.mlp_ratio)
        } else {
            0
        };
        let gates = if layout.guided {
            s.dense * AttentionGate::param_count(s.heads)
        } else {
            0
        };
        streams * (DenseStream::param_count(s.channels, s.dense) + stl) + gates
    }
}

/// SGCI block. With a single stream (`f_sar = None`) the attention layers
/// run unguided on the optical stream alone.
pub fn sgci_forward<T: Element>(
    g: &Graph<T>,
    p: &Bound,
    params: &SgciParams,
    plan: &WindowPlan,
    f_opt: Var,
    f_sar: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    if params.sar.is_some() != f_sar.is_some() {
        return Err(Error::Config("SGCI stream count does not match its parameters".into()));
    }
    if let Some(s) = f_sar {
        let (a, b) = (g.dims(f_opt), g.dims(s));
        if a != b {
            return Err(Error::shape("sgci", &a, &b));
        }
    }
    let mut hist_opt = vec![f_opt];
    let mut hist_sar: Vec<Var> = f_sar.into_iter().collect();
    for (j, conv) in params.opt.convs.iter().enumerate() {
        let x = g.concat(&hist_opt, 1)?;
        let mut o = g.relu(conv.forward(g, p, x)?);
        let mut s = match &params.sar {
            Some(sar) => {
                let x = g.concat(&hist_sar, 1)?;
                Some(g.relu(sar.convs[j].forward(g, p, x)?))
            }
            None => None,
        };
        if !params.opt_stl.is_empty() {
            let grid = plan.stage(j);
            match s {
                Some(sv) => {
                    let gate = params.gates.get(j);
                    let (a, b) = attention::stl_pair_forward(g, p, &params.opt_stl[j], &params.sar_stl[j], gate, grid, o, sv)?;
                    o = a;
                    s = Some(b);
                }
                None => o = attention::stl_forward(g, p, &params.opt_stl[j], grid, o)?,
            }
        }
        hist_opt.push(o);
        if let Some(sv) = s {
            hist_sar.push(sv);
        }
    }
    let fuse = |stream: &DenseStream, hist: &[Var]| -> Result<Var> {
        let cat = g.concat(&hist[1..], 1)?;
        let y = stream.fuse.forward(g, p, cat)?;
        g.add(y, hist[0])
    };
    let out_opt = fuse(&params.opt, &hist_opt)?;
    let out_sar = match &params.sar {
        Some(sar) => Some(fuse(sar, &hist_sar)?),
        None => None,
    };
    Ok((out_opt, out_sar))
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    fn forward<T: Element>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.relu(self.conv1.forward(g, p, x)?);
        let h = self.conv2.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Dynamic filter generator: 3x3 head (2C -> C), two residual blocks,
/// 1x1 tail (C -> C k^2).
#[derive(Debug, Clone)]
pub struct DfgParams {
    pub head: Conv,
    pub res: [ResBlock; 2],
    pub tail: Conv,
    pub k: usize,
}

impl DfgParams {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("dynamic filter size must be odd, got {k}")));
        }
        let head = Conv::new(store, &format!("{name}.head"), 2 * c, c, 3)?;
        let mut res = Vec::with_capacity(2);
        for r in 0..2 {
            res.push(ResBlock {
                conv1: Conv::new(store, &format!("{name}.res.{r}.conv1"), c, c, 3)?,
                conv2: Conv::new(store, &format!("{name}.res.{r}.conv2"), c, c, 3)?,
            });
        }
        let tail = Conv::new(store, &format!("{name}.tail"), c, c * k * k, 1)?;
        let res: [ResBlock; 2] = res.try_into().expect("two residual blocks");
        Ok(DfgParams { head, res, tail, k })
    }

    pub fn param_count(c: usize, k: usize) -> usize {
        Conv::param_count(2 * c, c, 3) + 4 * Conv::param_count(c, c, 3) + Conv::param_count(c, c * k * k, 1)
    }
}

/// Per-position, per-channel filter bank `[B, H, W, C, k, k]`.
pub fn dfg_generate<T: Element>(g: &Graph<T>, p: &Bound, dfg: &DfgParams, f_opt: Var, f_sar: Var) -> Result<Var> {
    let (a, b) = (g.dims(f_opt), g.dims(f_sar));
    if a != b || a.len() != 4 {
        return Err(Error::shape("dfg", &a, &b));
    }
    let (nb, c, h, w) = (a[0], a[1], a[2], a[3]);
    let k = dfg.k;
    let x = g.concat(&[f_opt, f_sar], 1)?;
    let x = dfg.head.forward(g, p, x)?;
    let x = dfg.res[0].forward(g, p, x)?;
    let x = dfg.res[1].forward(g, p, x)?;
    let x = dfg.tail.forward(g, p, x)?;
    let x = g.reshape(x, vec![nb, c, k, k, h, w])?;
    g.permute(x, &[0, 4, 5, 1, 2, 3])
}

/// Apply per-pixel filters to SAR features (zero padding).
pub fn dynamic_filter_apply<T: Element>(g: &Graph<T>, f_sar: Var, filters: Var) -> Result<Var> {
    g.dynamic_filter(f_sar, filters)
}

#[derive(Debug, Clone)]
pub struct SlfcParams {
    pub dfg: Option<DfgParams>,
    pub gate_s2o: Conv,
    pub gate_o2s: Conv,
    /// Add the SAR update to the filtered instead of the raw SAR feature.
    pub residual_on_filtered: bool,
}

impl SlfcParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        k: usize,
        dynamic_filter: bool,
        residual_on_filtered: bool,
    ) -> Result<Self> {
        let dfg = if dynamic_filter {
            Some(DfgParams::new(store, &format!("{name}.dfg"), c, k)?)
        } else {
            None
        };
        Ok(SlfcParams {
            dfg,
            gate_s2o: Conv::new(store, &format!("{name}.gate_s2o"), c, c, 1)?,
            gate_o2s: Conv::new(store, &format!("{name}.gate_o2s"), c, c, 1)?,
            residual_on_filtered,
        })
    }

    pub fn param_count(c: usize, k: usize, dynamic_filter: bool) -> usize {
        let dfg = if dynamic_filter { DfgParams::param_count(c, k) } else { 0 };
        dfg + 2 * Conv::param_count(c, c, 1)
    }
}

/// Channel gate: 1x1 conv followed by a softmax over channels.
fn channel_gate<T: Element>(g: &Graph<T>, p: &Bound, conv: &Conv, x: Var) -> Result<Var> {
    let pre = conv.forward(g, p, x)?;
    g.softmax(pre, 1)
}

/// Intermediate tensors of an SLFC pass, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct SlfcOutput {
    pub opt: Var,
    pub sar: Var,
    pub filtered_sar: Var,
}

pub fn slfc_forward<T: Element>(g: &Graph<T>, p: &Bound, params: &SlfcParams, f_opt: Var, f_sar: Var) -> Result<SlfcOutput> {
    let (a, b) = (g.dims(f_opt), g.dims(f_sar));
    if a != b {
        return Err(Error::shape("slfc", &a, &b));
    }
    let filtered = match &params.dfg {
        Some(dfg) => {
            let filters = dfg_generate(g, p, dfg, f_opt, f_sar)?;
            dynamic_filter_apply(g, f_sar, filters)?
        }
        None => f_sar,
    };
    // opt' = F_opt + R * G(R) with R = F^_sar - F_opt, evaluated as
    // F^_sar - R * (1 - G) so that G = 1 yields F^_sar exactly.
    let r_so = g.sub(filtered, f_opt)?;
    let gate = channel_gate(g, p, &params.gate_s2o, r_so)?;
    let keep = g.affine(gate, -T::ONE, T::ONE);
    let damp = g.mul(r_so, keep)?;
    let opt = g.sub(filtered, damp)?;

    let r_os = g.sub(opt, filtered)?;
    let gate = channel_gate(g, p, &params.gate_o2s, r_os)?;
    let upd = g.mul(r_os, gate)?;
    let base = if params.residual_on_filtered { filtered } else { f_sar };
    let sar = g.add(base, upd)?;
    Ok(SlfcOutput {
        opt,
        sar,
        filtered_sar: filtered,
    })
}
