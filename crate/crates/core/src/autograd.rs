//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as a node whose id is larger than the ids of
//! its inputs, so the tape order is a topological order and the graph is
//! acyclic by construction. [`Graph::backward`] walks the tape in reverse.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fused::{self, AttnGeom, Stream, StreamGrad};
use crate::kernels::{self, Broadcast, ConvGeom, MatRef};
use crate::tensor::{Element, Tensor};

static STRICT: AtomicBool = AtomicBool::new(true);

/// Select strict determinism (fixed summation order in every reduction).
///
/// All kernels in this crate are sequential, so they already satisfy strict
/// mode; the flag is recorded in run manifests and consulted by any future
/// parallel kernel.
pub fn set_strict(strict: bool) {
    STRICT.store(strict, Ordering::SeqCst);
}

pub fn is_strict() -> bool {
    STRICT.load(Ordering::SeqCst)
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Gather {
        input: Var,
        index: Arc<Vec<usize>>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    DynFilter {
        x: Var,
        filters: Var,
        k: usize,
    },
    Attention {
        qkvb: [Var; 4],
        mask: Option<Tensor<T>>,
        geom: AttnGeom,
    },
    GuidedAttention {
        opt: [Var; 4],
        sar: [Var; 4],
        gate: [Var; 2],
        mask: Option<Tensor<T>>,
        geom: AttnGeom,
    },
}

/// Checks `q, k, v: [W, h, N, d]`, `bias: [h, N, N]`, `mask: [Wm, N, N]`.
fn attn_geom(q: &[usize], k: &[usize], v: &[usize], bias: &[usize], mask: Option<&[usize]>) -> Result<AttnGeom> {
    if q.len() != 4 || k != q || v != q {
        return Err(Error::shape("attention q/k/v", q, if k != q { k } else { v }));
    }
    let (windows, heads, n, d) = (q[0], q[1], q[2], q[3]);
    if bias != [heads, n, n] {
        return Err(Error::shape("attention bias", bias, &[heads, n, n]));
    }
    let mask_windows = match mask {
        None => 1,
        Some(m) => {
            if m.len() != 3 || m[1] != n || m[2] != n || windows % m[0] != 0 {
                return Err(Error::shape("attention mask", m, &[windows, n, n]));
            }
            m[0]
        }
    };
    Ok(AttnGeom {
        windows,
        heads,
        n,
        d,
        mask_windows,
    })
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(Vec<usize>, usize, usize, usize)> {
    let err = || Error::shape("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, p) = (a[a.len() - 2], a[a.len() - 1]);
    let (pb, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if p != pb {
        return Err(err());
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = if ba.is_empty() {
        bb.to_vec()
    } else if bb.is_empty() || ba == bb {
        ba.to_vec()
    } else {
        return Err(err());
    };
    let mut out = batch;
    out.push(m);
    out.push(n);
    Ok((out, m, p, n))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn stream<'a>(nodes: &'a [Node<T>], vars: &[Var; 4]) -> Stream<'a, T> {
        Stream {
            q: nodes[vars[0].0].value.data(),
            k: nodes[vars[1].0].value.data(),
            v: nodes[vars[2].0].value.data(),
            bias: nodes[vars[3].0].value.data(),
        }
    }

    /// Differentiable leaf.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    /// Owned (cheap, shared-buffer) copy of a node value.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.dims().to_vec()
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.dims() == tb.dims() {
                ta.zip_map(tb, f)?
            } else {
                let plan = Broadcast::new(ta.dims(), tb.dims()).ok_or_else(|| Error::shape(name, ta.dims(), tb.dims()))?;
                let (da, db) = (ta.data(), tb.data());
                let mut data = vec![T::ZERO; plan.numel()];
                plan.for_each(|o, ia, ib| data[o] = f(da[ia], db[ib]));
                Tensor::new(plan.out_dims.clone(), data)?
            }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::ZERO)
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
        let half = T::from_f64(0.5);
        let out = self.value(x).map(|v| half * v * (T::ONE + (c * (v + a * v * v * v)).tanh()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let rg = self.rg(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let (s, n) = {
            let v = self.value(x);
            (v.data().iter().copied().sum::<T>(), v.numel())
        };
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s / T::from_f64(n as f64)), Op::Mean(x), rg)
    }

    /// Batched matrix product `a[..., m, p] @ b[..., p, n]`.
    ///
    /// Batch dims must be equal, or one operand may be a plain matrix shared
    /// across the batch.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` over the last two axes.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (dims, m, p, n) = matmul_dims(ta.dims(), tb.dims(), trans_b)?;
            let batch = dims[..dims.len() - 2].iter().product::<usize>();
            let a_batched = ta.ndim() > 2;
            let b_batched = tb.ndim() > 2;
            let mut data = vec![T::ZERO; batch * m * n];
            for i in 0..batch {
                let sa = if a_batched {
                    &ta.data()[i * m * p..(i + 1) * m * p]
                } else {
                    ta.data()
                };
                let sb = if b_batched {
                    &tb.data()[i * p * n..(i + 1) * p * n]
                } else {
                    tb.data()
                };
                let bm = if trans_b { MatRef::trans(sb, p) } else { MatRef::rows(sb, n) };
                kernels::gemm(
                    m,
                    p,
                    n,
                    T::ONE,
                    MatRef::rows(sa, p),
                    bm,
                    T::ZERO,
                    &mut data[i * m * n..(i + 1) * m * n],
                );
            }
            Tensor::new(dims, data)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    /// `out[i] = x[index[i]]`, reshaped to `dims`. Expresses permutations,
    /// slices, window partitions and table lookups.
    pub fn gather(&self, x: Var, index: Arc<Vec<usize>>, dims: Vec<usize>) -> Result<Var> {
        let out = {
            let src = self.value(x);
            let n = src.numel();
            if let Some(&bad) = index.iter().find(|&&i| i >= n) {
                return Err(Error::shape("gather", src.dims(), &[bad]));
            }
            let data = src.data();
            Tensor::new(dims, index.iter().map(|&i| data[i]).collect())?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather { input: x, index }, rg))
    }

    pub fn reshape(&self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(dims)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// General axis permutation; `perm[i]` is the source axis of output axis `i`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let dims = self.dims(x);
        let (out_dims, index) = permute_index(&dims, perm)?;
        self.gather(x, Arc::new(index), out_dims)
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dims = self.dims(x);
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return Err(Error::shape("narrow", &dims, &[axis, start, len]));
        }
        let (outer, full, inner) = kernels::axis_split(&dims, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut out = dims.clone();
        out[axis] = len;
        self.gather(x, Arc::new(index), out)
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[inputs[0].0].value.dims().to_vec();
            if axis >= first.len() {
                return Err(Error::shape("concat", &first, &[axis]));
            }
            let mut total = 0;
            for v in inputs {
                let d = nodes[v.0].value.dims();
                let same = d.len() == first.len() && d.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
                if !same {
                    return Err(Error::shape("concat", &first, d));
                }
                total += d[axis];
            }
            let (outer, _, inner) = kernels::axis_split(&first, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let chunk = t.dims()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut dims = first;
            dims[axis] = total;
            Tensor::new(dims, data)?
        };
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let src = self.value(x);
            if axis >= src.ndim() {
                return Err(Error::shape("softmax", src.dims(), &[axis]));
            }
            let mut data = vec![T::ZERO; src.numel()];
            kernels::softmax_forward(src.data(), kernels::axis_split(src.dims(), axis), &mut data);
            Tensor::new(src.dims().to_vec(), data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { input: x, axis }, rg))
    }

    /// Normalization over the last axis followed by a per-channel affine map.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let c = *tx.dims().last().expect("non-empty dims");
            if tg.numel() != c || tb.numel() != c {
                return Err(Error::shape("layer_norm", tx.dims(), tg.dims()));
            }
            let mut data = vec![T::ZERO; tx.numel()];
            let (xhat, rstd) = kernels::layer_norm_forward(tx.data(), tg.data(), tb.data(), c, T::from_f64(eps), &mut data);
            (Tensor::new(tx.dims().to_vec(), data)?, xhat, rstd)
        };
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Stride-1 cross-correlation with symmetric zero padding.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tw, tb) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let (geom, batch, cout) = conv_geom(tx.dims(), tw.dims(), tb.dims(), pad)?;
            let mut data = vec![T::ZERO; batch * cout * geom.ho * geom.wo];
            kernels::conv2d_forward(tx.data(), tw.data(), tb.data(), batch, cout, &geom, &mut data);
            Tensor::new(vec![batch, cout, geom.ho, geom.wo], data)?
        };
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }, rg))
    }

    /// Applies a distinct `k x k` filter at every (position, channel).
    /// `x: [B,C,H,W]`, `filters: [B,H,W,C,k,k]`.
    pub fn dynamic_filter(&self, x: Var, filters: Var) -> Result<Var> {
        let (out, k) = {
            let nodes = self.nodes.borrow();
            let (tx, tf) = (&nodes[x.0].value, &nodes[filters.0].value);
            let k = dyn_filter_k(tx.dims(), tf.dims())?;
            let d = tx.dims();
            let mut data = vec![T::ZERO; tx.numel()];
            kernels::dynamic_filter_forward(tx.data(), tf.data(), [d[0], d[1], d[2], d[3]], k, &mut data);
            (Tensor::new(d.to_vec(), data)?, k)
        };
        let rg = self.rg(&[x, filters]);
        Ok(self.push(out, Op::DynFilter { x, filters, k }, rg))
    }

    /// Windowed multi-head attention `softmax(q k^T + bias + mask) v`.
    ///
    /// `q, k, v` are `[W, h, N, d]` (q already scaled), `bias` is `[h, N, N]`
    /// and the optional constant `mask` is `[Wm, N, N]` with `Wm` dividing `W`;
    /// window `w` uses mask slice `w % Wm`. Output `[W, h, N, d]`.
    pub fn attention(&self, q: Var, k: Var, v: Var, bias: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let qkvb = [q, k, v, bias];
        let (out, geom) = {
            let nodes = self.nodes.borrow();
            let d = |v: Var| nodes[v.0].value.dims();
            let geom = attn_geom(d(q), d(k), d(v), d(bias), mask.map(|m| m.dims()))?;
            let mut y = vec![T::ZERO; nodes[q.0].value.numel()];
            fused::attention_forward(&geom, Self::stream(&nodes, &qkvb), mask.map(|m| m.data()), &mut y);
            (Tensor::new(d(q).to_vec(), y)?, geom)
        };
        let rg = self.rg(&qkvb);
        Ok(self.push(
            out,
            Op::Attention {
                qkvb,
                mask: mask.cloned(),
                geom,
            },
            rg,
        ))
    }

    /// Paired attention where the optical scores are refined by the SAR
    /// scores: `M_hat = M_sar - R (1 - G)` with `R = M_sar - M_opt` and
    /// `G = softmax_heads(W R + b)`. `opt` and `sar` are `[q, k, v, bias]`
    /// laid out as in [`Graph::attention`]; `gate` is `[W: [h, h, 1, 1], b: [h]]`.
    /// Output `[2, W, h, N, d]` with the optical result first.
    pub fn guided_attention(&self, opt: [Var; 4], sar: [Var; 4], gate: [Var; 2], mask: Option<&Tensor<T>>) -> Result<Var> {
        let (out, geom) = {
            let nodes = self.nodes.borrow();
            let d = |v: Var| nodes[v.0].value.dims();
            let mdims = mask.map(|m| m.dims());
            let geom = attn_geom(d(opt[0]), d(opt[1]), d(opt[2]), d(opt[3]), mdims)?;
            if attn_geom(d(sar[0]), d(sar[1]), d(sar[2]), d(sar[3]), mdims)? != geom {
                return Err(Error::shape("guided attention", d(opt[0]), d(sar[0])));
            }
            let h = geom.heads;
            let (gw, gb) = (d(gate[0]), d(gate[1]));
            if gw.len() < 2 || gw[..2] != [h, h] || gw.iter().product::<usize>() != h * h || gb != [h] {
                return Err(Error::shape("attention gate", gw, gb));
            }
            let len = nodes[opt[0].0].value.numel();
            let mut y = vec![T::ZERO; 2 * len];
            let (y_opt, y_sar) = y.split_at_mut(len);
            fused::guided_forward(
                &geom,
                Self::stream(&nodes, &opt),
                Self::stream(&nodes, &sar),
                nodes[gate[0].0].value.data(),
                nodes[gate[1].0].value.data(),
                mask.map(|m| m.data()),
                y_opt,
                y_sar,
            );
            let mut dims = vec![2];
            dims.extend_from_slice(d(opt[0]));
            (Tensor::new(dims, y)?, geom)
        };
        let mut all = opt.to_vec();
        all.extend_from_slice(&sar);
        all.extend_from_slice(&gate);
        let rg = self.rg(&all);
        Ok(self.push(
            out,
            Op::GuidedAttention {
                opt,
                sar,
                gate,
                mask: mask.cloned(),
                geom,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root. Returns the gradients of every
    /// differentiable leaf the root depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let rdims = nodes[root.0].value.dims();
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar root, got dims {rdims:?}")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(rdims.to_vec()));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

/// Output dims and gather index for an axis permutation.
pub fn permute_index(dims: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let nd = dims.len();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", dims, perm));
    }
    let src_strides = crate::tensor::strides_of(dims);
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n: usize = dims.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        index.push(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_dims[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok((out_dims, index))
}

fn conv_geom(x: &[usize], w: &[usize], b: &[usize], pad: usize) -> Result<(ConvGeom, usize, usize)> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] || b.iter().product::<usize>() != w[0] {
        return Err(Error::shape("conv2d", x, w));
    }
    let (kh, kw) = (w[2], w[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("conv2d (odd kernel)", x, w));
    }
    let ho = (x[2] + 2 * pad + 1).saturating_sub(kh);
    let wo = (x[3] + 2 * pad + 1).saturating_sub(kw);
    if ho == 0 || wo == 0 {
        return Err(Error::shape("conv2d (empty output)", x, w));
    }
    Ok((
        ConvGeom {
            cin: x[1],
            h: x[2],
            w: x[3],
            kh,
            kw,
            pad,
            ho,
            wo,
        },
        x[0],
        w[0],
    ))
}

fn dyn_filter_k(x: &[usize], f: &[usize]) -> Result<usize> {
    let ok = x.len() == 4 && f.len() == 6 && f[0] == x[0] && f[1] == x[2] && f[2] == x[3] && f[3] == x[1] && f[4] == f[5] && f[4] % 2 == 1;
    if ok {
        Ok(f[4])
    } else {
        Err(Error::shape("dynamic_filter", x, f))
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Reduce a broadcast gradient back to the operand shape.
fn unbroadcast<T: Element>(g: &Tensor<T>, out_dims: &[usize], a: &[usize], b: &[usize], which_a: bool, sign: T) -> Tensor<T> {
    let target = if which_a { a } else { b };
    if target == out_dims {
        return if sign == T::ONE { g.clone() } else { g.map(|v| v * sign) };
    }
    let plan = Broadcast::new(a, b).expect("shapes validated in forward");
    let mut data = vec![T::ZERO; target.iter().product()];
    let gd = g.data();
    if which_a {
        plan.for_each(|o, ia, _| data[ia] += gd[o] * sign);
    } else {
        plan.for_each(|o, _, ib| data[ib] += gd[o] * sign);
    }
    Tensor::new(target.to_vec(), data).expect("unbroadcast dims")
}

fn propagate<T: Element>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let node = &nodes[id];
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let out_dims = node.value.dims();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign_b = if matches!(node.op, Op::Sub(..)) { -T::ONE } else { T::ONE };
            let (da, db) = (val(*a).dims(), val(*b).dims());
            if rg(*a) {
                accumulate(grads, *a, unbroadcast(g, out_dims, da, db, true, T::ONE));
            }
            if rg(*b) {
                accumulate(grads, *b, unbroadcast(g, out_dims, da, db, false, sign_b));
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let plan = if ta.dims() == tb.dims() {
                None
            } else {
                Some(Broadcast::new(ta.dims(), tb.dims()).expect("validated"))
            };
            for (target, other, is_a) in [(*a, tb, true), (*b, ta, false)] {
                if !rg(target) {
                    continue;
                }
                let tt = val(target);
                let gd = match &plan {
                    None => g.zip_map(other, |x, y| x * y).expect("same dims"),
                    Some(plan) => {
                        let mut data = vec![T::ZERO; tt.numel()];
                        let (gd, od) = (g.data(), other.data());
                        if is_a {
                            plan.for_each(|o, ia, ib| data[ia] += gd[o] * od[ib]);
                        } else {
                            plan.for_each(|o, ia, ib| data[ib] += gd[o] * od[ia]);
                        }
                        Tensor::new(tt.dims().to_vec(), data).expect("dims")
                    }
                };
                accumulate(grads, target, gd);
            }
        }
        Op::Affine(x, scale) => {
            if rg(*x) {
                let s = *scale;
                accumulate(grads, *x, g.map(|v| v * s));
            }
        }
        Op::Relu(x) => {
            if rg(*x) {
                let gx = g.zip_map(val(*x), |gv, xv| if xv > T::ZERO { gv } else { T::ZERO }).expect("dims");
                accumulate(grads, *x, gx);
            }
        }
        Op::Gelu(x) => {
            if rg(*x) {
                let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let gx = g
                    .zip_map(val(*x), |gv, v| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (T::ONE - t * t) * c * (T::ONE + three * a * v * v);
                        gv * (half * (T::ONE + t) + half * v * dt)
                    })
                    .expect("dims");
                accumulate(grads, *x, gx);
            }
        }
        Op::Abs(x) => {
            if rg(*x) {
                let gx = g
                    .zip_map(val(*x), |gv, v| {
                        if v > T::ZERO {
                            gv
                        } else if v < T::ZERO {
                            -gv
                        } else {
                            T::ZERO
                        }
                    })
                    .expect("dims");
                accumulate(grads, *x, gx);
            }
        }
        Op::Sum(x) | Op::Mean(x) => {
            if rg(*x) {
                let tx = val(*x);
                let mut s = g.item();
                if matches!(node.op, Op::Mean(_)) {
                    s = s / T::from_f64(tx.numel() as f64);
                }
                accumulate(grads, *x, Tensor::full(tx.dims().to_vec(), s));
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let (ta, tb) = (val(*a), val(*b));
            let (_, m, p, n) = matmul_dims(ta.dims(), tb.dims(), *trans_b).expect("validated");
            let batch: usize = out_dims[..out_dims.len() - 2].iter().product();
            let (a_batched, b_batched) = (ta.ndim() > 2, tb.ndim() > 2);
            let gd = g.data();
            if rg(*a) {
                let mut da = vec![T::ZERO; ta.numel()];
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let sb = if b_batched {
                        &tb.data()[i * p * n..(i + 1) * p * n]
                    } else {
                        tb.data()
                    };
                    // dA = G @ B^T  (B stored [p,n], or [n,p] when trans_b)
                    let bt = if *trans_b { MatRef::rows(sb, p) } else { MatRef::trans(sb, n) };
                    let dst = if a_batched {
                        &mut da[i * m * p..(i + 1) * m * p]
                    } else {
                        &mut da[..]
                    };
                    kernels::gemm(m, n, p, T::ONE, MatRef::rows(gi, n), bt, T::ONE, dst);
                }
                accumulate(grads, *a, Tensor::new(ta.dims().to_vec(), da).expect("dims"));
            }
            if rg(*b) {
                let mut db = vec![T::ZERO; tb.numel()];
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let sa = if a_batched {
                        &ta.data()[i * m * p..(i + 1) * m * p]
                    } else {
                        ta.data()
                    };
                    let dst = if b_batched {
                        &mut db[i * p * n..(i + 1) * p * n]
                    } else {
                        &mut db[..]
                    };
                    if *trans_b {
                        // dB[n,p] = G^T @ A
                        kernels::gemm(n, m, p, T::ONE, MatRef::trans(gi, n), MatRef::rows(sa, p), T::ONE, dst);
                    } else {
                        // dB[p,n] = A^T @ G
                        kernels::gemm(p, m, n, T::ONE, MatRef::trans(sa, p), MatRef::rows(gi, n), T::ONE, dst);
                    }
                }
                accumulate(grads, *b, Tensor::new(tb.dims().to_vec(), db).expect("dims"));
            }
        }
        Op::Gather { input, index } => {
            if rg(*input) {
                let tx = val(*input);
                let mut dx = vec![T::ZERO; tx.numel()];
                for (&i, &gv) in index.iter().zip(g.data()) {
                    dx[i] += gv;
                }
                accumulate(grads, *input, Tensor::new(tx.dims().to_vec(), dx).expect("dims"));
            }
        }
        Op::Reshape(x) => {
            if rg(*x) {
                let gx = g.reshape(val(*x).dims().to_vec()).expect("dims");
                accumulate(grads, *x, gx);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = kernels::axis_split(out_dims, *axis);
            let mut offset = 0;
            for v in inputs {
                let t = val(*v);
                let len = t.dims()[*axis];
                if rg(*v) {
                    let mut data = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    accumulate(grads, *v, Tensor::new(t.dims().to_vec(), data).expect("dims"));
                }
                offset += len;
            }
        }
        Op::Softmax { input, axis } => {
            if rg(*input) {
                let mut dx = vec![T::ZERO; g.numel()];
                kernels::softmax_backward(node.value.data(), g.data(), kernels::axis_split(out_dims, *axis), &mut dx);
                accumulate(grads, *input, Tensor::new(out_dims.to_vec(), dx).expect("dims"));
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = *out_dims.last().expect("dims");
            let tg = val(*gamma);
            let mut dx = rg(*x).then(|| vec![T::ZERO; g.numel()]);
            let mut dg = rg(*gamma).then(|| vec![T::ZERO; c]);
            let mut db = rg(*beta).then(|| vec![T::ZERO; c]);
            kernels::layer_norm_backward(
                xhat,
                rstd,
                tg.data(),
                g.data(),
                c,
                dx.as_deref_mut(),
                dg.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(d) = dx {
                accumulate(grads, *x, Tensor::new(out_dims.to_vec(), d).expect("dims"));
            }
            if let Some(d) = dg {
                accumulate(grads, *gamma, Tensor::new(tg.dims().to_vec(), d).expect("dims"));
            }
            if let Some(d) = db {
                accumulate(grads, *beta, Tensor::new(val(*beta).dims().to_vec(), d).expect("dims"));
            }
        }
        Op::Conv2d { x, w, b, pad } => {
            let (tx, tw, tb) = (val(*x), val(*w), val(*b));
            let (geom, batch, cout) = conv_geom(tx.dims(), tw.dims(), tb.dims(), *pad).expect("validated");
            let mut dx = rg(*x).then(|| vec![T::ZERO; tx.numel()]);
            let mut dw = rg(*w).then(|| vec![T::ZERO; tw.numel()]);
            let mut db = rg(*b).then(|| vec![T::ZERO; tb.numel()]);
            kernels::conv2d_backward(
                tx.data(),
                tw.data(),
                g.data(),
                batch,
                cout,
                &geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (v, d, t) in [(*x, dx, tx), (*w, dw, tw), (*b, db, tb)] {
                if let Some(d) = d {
                    accumulate(grads, v, Tensor::new(t.dims().to_vec(), d).expect("dims"));
                }
            }
        }
        Op::DynFilter { x, filters, k } => {
            let (tx, tf) = (val(*x), val(*filters));
            let d = tx.dims();
            let mut dx = rg(*x).then(|| vec![T::ZERO; tx.numel()]);
            let mut df = rg(*filters).then(|| vec![T::ZERO; tf.numel()]);
            kernels::dynamic_filter_backward(
                tx.data(),
                tf.data(),
                g.data(),
                [d[0], d[1], d[2], d[3]],
                *k,
                dx.as_deref_mut(),
                df.as_deref_mut(),
            );
            if let Some(dx) = dx {
                accumulate(grads, *x, Tensor::new(d.to_vec(), dx).expect("dims"));
            }
            if let Some(df) = df {
                accumulate(grads, *filters, Tensor::new(tf.dims().to_vec(), df).expect("dims"));
            }
        }
        Op::Attention { qkvb, mask, geom } => {
            let mut bufs = attn_grad_bufs(nodes, qkvb);
            let [gq, gk, gv, gbias] = &mut bufs;
            fused::attention_backward(
                geom,
                Graph::stream(nodes, qkvb),
                mask.as_ref().map(|m| m.data()),
                g.data(),
                StreamGrad {
                    q: gq,
                    k: gk,
                    v: gv,
                    bias: gbias,
                },
            );
            accumulate_all(nodes, grads, qkvb, bufs);
        }
        Op::GuidedAttention {
            opt,
            sar,
            gate,
            mask,
            geom,
        } => {
            let mut bo = attn_grad_bufs(nodes, opt);
            let mut bs = attn_grad_bufs(nodes, sar);
            let mut dgw = vec![T::ZERO; val(gate[0]).numel()];
            let mut dgb = vec![T::ZERO; val(gate[1]).numel()];
            let (dy_opt, dy_sar) = g.data().split_at(g.numel() / 2);
            let [oq, ok, ov, ob] = &mut bo;
            let [sq, sk, sv, sb] = &mut bs;
            fused::guided_backward(
                geom,
                Graph::stream(nodes, opt),
                Graph::stream(nodes, sar),
                val(gate[0]).data(),
                val(gate[1]).data(),
                mask.as_ref().map(|m| m.data()),
                dy_opt,
                dy_sar,
                StreamGrad {
                    q: oq,
                    k: ok,
                    v: ov,
                    bias: ob,
                },
                StreamGrad {
                    q: sq,
                    k: sk,
                    v: sv,
                    bias: sb,
                },
                &mut dgw,
                &mut dgb,
            );
            accumulate_all(nodes, grads, opt, bo);
            accumulate_all(nodes, grads, sar, bs);
            accumulate_all(nodes, grads, gate, [dgw, dgb]);
        }
    }
}

fn attn_grad_bufs<T: Element>(nodes: &[Node<T>], vars: &[Var; 4]) -> [Vec<T>; 4] {
    vars.map(|v| vec![T::ZERO; nodes[v.0].value.numel()])
}

fn accumulate_all<T: Element, const K: usize>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], vars: &[Var; K], bufs: [Vec<T>; K]) {
    for (v, d) in vars.iter().zip(bufs) {
        if nodes[v.0].requires_grad {
            let dims = nodes[v.0].value.dims().to_vec();
            accumulate(grads, *v, Tensor::new(dims, d).expect("dims"));
        }
    }
}
