//! Windowed multi-head self-attention with relative positional bias,
//! cyclic shifts, and SAR-guided refinement of the optical attention scores.
//!
//! Token layout throughout is `[batch * windows, M*M, C]`, windows in
//! row-major order and tokens row-major inside each window.

use std::sync::Arc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv, LayerNorm, Linear};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Partition of an `H x W` map into `M x M` windows, optionally cyclically
/// shifted by `shift` before partitioning.
#[derive(Debug, Clone)]
pub struct WindowGrid {
    pub window: usize,
    pub height: usize,
    pub width: usize,
    pub shift: usize,
    /// `[windows, M*M, M*M]` additive mask, present iff `shift > 0`.
    mask: Option<Arc<Vec<f64>>>,
}

impl WindowGrid {
    pub fn new(height: usize, width: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
            return Err(Error::shape("window grid", &[height, width], &[window]));
        }
        if shift != 0 && (!window.is_multiple_of(2) || shift != window / 2) {
            return Err(Error::Config(format!("shift must be 0 or window/2 (window {window}), got {shift}")));
        }
        let mut grid = WindowGrid {
            window,
            height,
            width,
            shift,
            mask: None,
        };
        if shift > 0 {
            grid.mask = Some(Arc::new(grid.build_mask()));
        }
        Ok(grid)
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    /// Region labels in the shifted frame; tokens from different regions
    /// must not attend to each other.
    fn build_mask(&self) -> Vec<f64> {
        let (m, s) = (self.window, self.shift);
        let region = |v: usize, len: usize| -> usize {
            if v < len - m {
                0
            } else if v < len - s {
                1
            } else {
                2
            }
        };
        let n = self.tokens();
        let nww = self.width / m;
        let mut mask = vec![0.0; self.num_windows() * n * n];
        for win in 0..self.num_windows() {
            let (wy, wx) = (win / nww, win % nww);
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let (y, x) = (wy * m + t / m, wx * m + t % m);
                    region(y, self.height) * 3 + region(x, self.width)
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    if labels[i] != labels[j] {
                        mask[(win * n + i) * n + j] = -1.0e4;
                    }
                }
            }
        }
        mask
    }

    /// Additive attention mask `[1, windows, 1, N, N]`, or `None` without shift.
    pub fn mask_tensor<T: Element>(&self) -> Option<Tensor<T>> {
        self.mask.as_ref().map(|m| {
            let n = self.tokens();
            let data = m.iter().map(|&v| if v == 0.0 { T::ZERO } else { T::MASK_NEG }).collect();
            Tensor::new(vec![1, self.num_windows(), 1, n, n], data).expect("mask dims")
        })
    }

    /// Source offsets (into `[B, C, H, W]`) of each element of the
    /// `[B*windows, M*M, C]` partition.
    pub fn partition_index(&self, batch: usize, channels: usize) -> Vec<usize> {
        let (m, h, w, s) = (self.window, self.height, self.width, self.shift);
        let nww = w / m;
        let mut index = Vec::with_capacity(batch * channels * h * w);
        for b in 0..batch {
            for win in 0..self.num_windows() {
                let (wy, wx) = (win / nww, win % nww);
                for t in 0..m * m {
                    let y = (wy * m + t / m + s) % h;
                    let x = (wx * m + t % m + s) % w;
                    for c in 0..channels {
                        index.push(((b * channels + c) * h + y) * w + x);
                    }
                }
            }
        }
        index
    }

    /// Inverse of [`partition_index`](Self::partition_index).
    pub fn merge_index(&self, batch: usize, channels: usize) -> Vec<usize> {
        let forward = self.partition_index(batch, channels);
        let mut inverse = vec![0; forward.len()];
        for (dst, &src) in forward.iter().enumerate() {
            inverse[src] = dst;
        }
        inverse
    }

    fn check_map(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 4 || dims[2] != self.height || dims[3] != self.width {
            return Err(Error::shape("window partition", dims, &[self.height, self.width, self.window]));
        }
        Ok(())
    }
}

/// `[B, C, H, W]` -> `[B*windows, M*M, C]`, applying the cyclic shift first.
pub fn window_partition<T: Element>(g: &Graph<T>, x: Var, grid: &WindowGrid) -> Result<Var> {
    let dims = g.dims(x);
    grid.check_map(&dims)?;
    let (b, c) = (dims[0], dims[1]);
    let index = grid.partition_index(b, c);
    g.gather(x, Arc::new(index), vec![b * grid.num_windows(), grid.tokens(), c])
}

/// `[B*windows, M*M, C]` -> `[B, C, H, W]`, undoing the cyclic shift.
pub fn window_merge<T: Element>(g: &Graph<T>, tokens: Var, grid: &WindowGrid) -> Result<Var> {
    let dims = g.dims(tokens);
    let nw = grid.num_windows();
    if dims.len() != 3 || dims[1] != grid.tokens() || !dims[0].is_multiple_of(nw) {
        return Err(Error::shape("window merge", &dims, &[nw, grid.tokens()]));
    }
    let (b, c) = (dims[0] / nw, dims[2]);
    let index = grid.merge_index(b, c);
    g.gather(tokens, Arc::new(index), vec![b, c, grid.height, grid.width])
}

/// Learnable relative positional bias for an `M x M` window.
#[derive(Debug, Clone)]
pub struct RelPosBias {
    /// `[(2M-1)^2, heads]`
    pub table: ParamId,
    pub window: usize,
    pub heads: usize,
}

impl RelPosBias {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, window: usize, heads: usize) -> Result<Self> {
        let side = 2 * window - 1;
        let table = store.add(format!("{name}.rel_bias"), vec![side * side, heads], Init::TruncNormal(0.02))?;
        Ok(RelPosBias { table, window, heads })
    }

    /// Table row used for query token `i`, key token `j`; `[N*N]`.
    pub fn relative_index(window: usize) -> Vec<usize> {
        let n = window * window;
        let side = 2 * window - 1;
        let mut index = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dy = i / window + window - 1 - j / window;
                let dx = i % window + window - 1 - j % window;
                index.push(dy * side + dx);
            }
        }
        index
    }

    /// Bias `[heads, N, N]` looked up from the table.
    pub fn forward<T: Element>(&self, g: &Graph<T>, p: &Bound) -> Result<Var> {
        let n = self.window * self.window;
        let rel = Self::relative_index(self.window);
        let mut index = Vec::with_capacity(self.heads * n * n);
        for h in 0..self.heads {
            index.extend(rel.iter().map(|&r| r * self.heads + h));
        }
        g.gather(p.var(self.table), Arc::new(index), vec![self.heads, n, n])
    }
}

/// Parameters of one Swin-style layer for one stream.
#[derive(Debug, Clone)]
pub struct StlParams {
    pub dim: usize,
    pub heads: usize,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub bias: RelPosBias,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl StlParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: channels {dim} not divisible by heads {heads}")));
        }
        let hidden = dim * mlp_ratio;
        Ok(StlParams {
            dim,
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim)?,
            bias: RelPosBias::new(store, &format!("{name}.attn"), window, heads)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn param_count(dim: usize, heads: usize, window: usize, mlp_ratio: usize) -> usize {
        let side = 2 * window - 1;
        let hidden = dim * mlp_ratio;
        2 * LayerNorm::param_count(dim)
            + Linear::param_count(dim, 3 * dim)
            + side * side * heads
            + Linear::param_count(dim, dim)
            + Linear::param_count(dim, hidden)
            + Linear::param_count(hidden, dim)
    }
}

/// Gate over the head axis: 1x1 convolution heads -> heads, softmax over heads.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    pub conv: Conv,
}

impl AttentionGate {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, heads: usize) -> Result<Self> {
        Ok(AttentionGate {
            conv: Conv::new(store, name, heads, heads, 1)?,
        })
    }

    pub fn param_count(heads: usize) -> usize {
        Conv::param_count(heads, heads, 1)
    }

    /// Gate values in (0, 1) for a `[nW, heads, N, N]` map.
    pub fn forward<T: Element>(&self, g: &Graph<T>, p: &Bound, residual: Var) -> Result<Var> {
        let pre = self.conv.forward(g, p, residual)?;
        g.softmax(pre, 1)
    }
}

/// Scaled queries, keys and values (`[nW, heads, N, d]`) for already
/// normalized tokens `[nW, N, C]`.
pub fn attention_qkv<T: Element>(g: &Graph<T>, p: &Bound, stl: &StlParams, x: Var) -> Result<[Var; 3]> {
    let dims = g.dims(x);
    if dims.len() != 3 || dims[2] != stl.dim {
        return Err(Error::shape("window attention", &dims, &[stl.dim]));
    }
    let (nw, n, c) = (dims[0], dims[1], dims[2]);
    let h = stl.heads;
    let d = c / h;
    let qkv = stl.qkv.forward(g, p, x)?;
    let qkv = g.reshape(qkv, vec![nw, n, 3, h, d])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, nw, h, n, d]
    let take = |i: usize| -> Result<Var> {
        let part = g.narrow(qkv, 0, i, 1)?;
        g.reshape(part, vec![nw, h, n, d])
    };
    let (q, k, v) = (take(0)?, take(1)?, take(2)?);
    let q = g.scale(q, T::from_f64(1.0 / (d as f64).sqrt()));
    Ok([q, k, v])
}

/// Pre-softmax scores `M = Q K^T / sqrt(d) + B` (`[nW, heads, N, N]`) and
/// values `V` (`[nW, heads, N, d]`) for already normalized tokens.
pub fn attention_scores<T: Element>(g: &Graph<T>, p: &Bound, stl: &StlParams, x: Var) -> Result<(Var, Var)> {
    let [q, k, v] = attention_qkv(g, p, stl, x)?;
    let scores = g.matmul_nt(q, k)?;
    let bias = stl.bias.forward(g, p)?;
    let scores = g.add(scores, bias)?;
    Ok((scores, v))
}

/// `proj(Softmax(M + mask) V)` back in token layout `[nW, N, C]`.
pub fn attend<T: Element>(g: &Graph<T>, p: &Bound, stl: &StlParams, scores: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let sd = g.dims(scores);
    let (nw_total, h, n) = (sd[0], sd[1], sd[2]);
    let masked = match mask {
        Some(mask) => {
            let windows = g.dims(mask)[1];
            if nw_total % windows != 0 {
                return Err(Error::shape("attention mask", &sd, &g.dims(mask)));
            }
            let s5 = g.reshape(scores, vec![nw_total / windows, windows, h, n, n])?;
            let s5 = g.add(s5, mask)?;
            g.reshape(s5, sd.clone())?
        }
        None => scores,
    };
    let attn = g.softmax(masked, 3)?;
    let y = g.matmul(attn, v)?;
    merge_heads(g, p, stl, y)
}

/// `[nW, h, N, d]` head outputs -> projected tokens `[nW, N, C]`.
fn merge_heads<T: Element>(g: &Graph<T>, p: &Bound, stl: &StlParams, y: Var) -> Result<Var> {
    let d = g.dims(y);
    let y = g.permute(y, &[0, 2, 1, 3])?;
    let y = g.reshape(y, vec![d[0], d[2], stl.dim])?;
    stl.proj.forward(g, p, y)
}

/// Full windowed attention on normalized tokens. Returns the attended
/// output and the pre-softmax score tensor.
pub fn window_attention<T: Element>(g: &Graph<T>, p: &Bound, stl: &StlParams, x: Var, mask: Option<Var>) -> Result<(Var, Var)> {
    let (scores, v) = attention_scores(g, p, stl, x)?;
    let y = attend(g, p, stl, scores, v, mask)?;
    Ok((y, scores))
}

/// `M_opt + (M_sar - M_opt) * G(M_sar - M_opt)`.
///
/// Evaluated as `M_sar - R * (1 - G)`, which is the same expression and
/// returns `M_opt` exactly when `R = 0` and `M_sar` exactly when `G = 1`.
pub fn attention_refine<T: Element>(g: &Graph<T>, p: &Bound, gate: &AttentionGate, m_opt: Var, m_sar: Var) -> Result<Var> {
    let (a, b) = (g.dims(m_opt), g.dims(m_sar));
    if a != b {
        return Err(Error::shape("attention refine", &a, &b));
    }
    let residual = g.sub(m_sar, m_opt)?;
    let gates = gate.forward(g, p, residual)?;
    let keep = g.affine(gates, -T::ONE, T::ONE);
    let damp = g.mul(residual, keep)?;
    g.sub(m_sar, damp)
}

fn mlp_residual<T: Element>(g: &Graph<T>, p: &Bound, stl: &StlParams, t: Var) -> Result<Var> {
    let n = stl.norm2.forward(g, p, t)?;
    let hdn = stl.fc1.forward(g, p, n)?;
    let hdn = g.gelu(hdn);
    let out = stl.fc2.forward(g, p, hdn)?;
    g.add(t, out)
}

fn mask_var<T: Element>(g: &Graph<T>, grid: &WindowGrid) -> Option<Var> {
    grid.mask_tensor::<T>().map(|m| g.constant(m))
}

/// Shift mask as `[nW, N, N]` for the fused attention ops.
fn flat_mask<T: Element>(grid: &WindowGrid) -> Result<Option<Tensor<T>>> {
    let n = grid.tokens();
    grid.mask_tensor::<T>()
        .map(|m| m.reshape(vec![grid.num_windows(), n, n]))
        .transpose()
}

/// Single-stream Swin layer on `[B, C, H, W]`.
pub fn stl_forward<T: Element>(g: &Graph<T>, p: &Bound, stl: &StlParams, grid: &WindowGrid, x: Var) -> Result<Var> {
    let t = window_partition(g, x, grid)?;
    let n = stl.norm1.forward(g, p, t)?;
    let [q, k, v] = attention_qkv(g, p, stl, n)?;
    let bias = stl.bias.forward(g, p)?;
    let y = g.attention(q, k, v, bias, flat_mask(grid)?.as_ref())?;
    let y = merge_heads(g, p, stl, y)?;
    let t = g.add(t, y)?;
    let t = mlp_residual(g, p, stl, t)?;
    window_merge(g, t, grid)
}

/// [`stl_forward`] built from the unfused score, softmax and matmul ops.
pub fn stl_forward_composed<T: Element>(g: &Graph<T>, p: &Bound, stl: &StlParams, grid: &WindowGrid, x: Var) -> Result<Var> {
    let t = window_partition(g, x, grid)?;
    let n = stl.norm1.forward(g, p, t)?;
    let (y, _) = window_attention(g, p, stl, n, mask_var(g, grid))?;
    let t = g.add(t, y)?;
    let t = mlp_residual(g, p, stl, t)?;
    window_merge(g, t, grid)
}

/// Paired optical/SAR Swin layer. The SAR stream attends with its own
/// scores; the optical stream attends with scores refined by the SAR scores
/// when `gate` is given, and with its own scores otherwise.
#[allow(clippy::too_many_arguments)]
pub fn stl_pair_forward<T: Element>(
    g: &Graph<T>,
    p: &Bound,
    opt: &StlParams,
    sar: &StlParams,
    gate: Option<&AttentionGate>,
    grid: &WindowGrid,
    x_opt: Var,
    x_sar: Var,
) -> Result<(Var, Var)> {
    let (da, db) = (g.dims(x_opt), g.dims(x_sar));
    if da != db {
        return Err(Error::shape("stl pair", &da, &db));
    }
    let mask = flat_mask::<T>(grid)?;
    let t_opt = window_partition(g, x_opt, grid)?;
    let t_sar = window_partition(g, x_sar, grid)?;
    let n_opt = opt.norm1.forward(g, p, t_opt)?;
    let n_sar = sar.norm1.forward(g, p, t_sar)?;
    let [qo, ko, vo] = attention_qkv(g, p, opt, n_opt)?;
    let [qs, ks, vs] = attention_qkv(g, p, sar, n_sar)?;
    let (bo, bs) = (opt.bias.forward(g, p)?, sar.bias.forward(g, p)?);
    let (y_opt, y_sar) = match gate {
        Some(gate) => {
            let gate = [p.var(gate.conv.weight), p.var(gate.conv.bias)];
            let both = g.guided_attention([qo, ko, vo, bo], [qs, ks, vs, bs], gate, mask.as_ref())?;
            let dims = g.dims(qo);
            let half = |i| -> Result<Var> {
                let y = g.narrow(both, 0, i, 1)?;
                g.reshape(y, dims.clone())
            };
            (half(0)?, half(1)?)
        }
        None => (
            g.attention(qo, ko, vo, bo, mask.as_ref())?,
            g.attention(qs, ks, vs, bs, mask.as_ref())?,
        ),
    };
    let y_opt = merge_heads(g, p, opt, y_opt)?;
    let y_sar = merge_heads(g, p, sar, y_sar)?;
    finish_pair(g, p, opt, sar, grid, [t_opt, t_sar], [y_opt, y_sar])
}

fn finish_pair<T: Element>(
    g: &Graph<T>,
    p: &Bound,
    opt: &StlParams,
    sar: &StlParams,
    grid: &WindowGrid,
    tokens: [Var; 2],
    attended: [Var; 2],
) -> Result<(Var, Var)> {
    let t_opt = g.add(tokens[0], attended[0])?;
    let t_sar = g.add(tokens[1], attended[1])?;
    let t_opt = mlp_residual(g, p, opt, t_opt)?;
    let t_sar = mlp_residual(g, p, sar, t_sar)?;
    Ok((window_merge(g, t_opt, grid)?, window_merge(g, t_sar, grid)?))
}

/// [`stl_pair_forward`] built from the unfused ops, with the refinement
/// spelled out through [`attention_refine`].
#[allow(clippy::too_many_arguments)]
pub fn stl_pair_forward_composed<T: Element>(
    g: &Graph<T>,
    p: &Bound,
    opt: &StlParams,
    sar: &StlParams,
    gate: Option<&AttentionGate>,
    grid: &WindowGrid,
    x_opt: Var,
    x_sar: Var,
) -> Result<(Var, Var)> {
    let (da, db) = (g.dims(x_opt), g.dims(x_sar));
    if da != db {
        return Err(Error::shape("stl pair", &da, &db));
    }
    let mask = mask_var(g, grid);
    let t_opt = window_partition(g, x_opt, grid)?;
    let t_sar = window_partition(g, x_sar, grid)?;
    let n_opt = opt.norm1.forward(g, p, t_opt)?;
    let n_sar = sar.norm1.forward(g, p, t_sar)?;
    let (m_opt, v_opt) = attention_scores(g, p, opt, n_opt)?;
    let (m_sar, v_sar) = attention_scores(g, p, sar, n_sar)?;
    let m_hat = match gate {
        Some(gate) => attention_refine(g, p, gate, m_opt, m_sar)?,
        None => m_opt,
    };
    let y_opt = attend(g, p, opt, m_hat, v_opt, mask)?;
    let y_sar = attend(g, p, sar, m_sar, v_sar, mask)?;
    finish_pair(g, p, opt, sar, grid, [t_opt, t_sar], [y_opt, y_sar])
}
