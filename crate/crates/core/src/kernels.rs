//! Slice-level numeric kernels shared by the differentiable ops.
//!
//! Every kernel runs sequentially with a fixed reduction order, so results
//! are reproducible run to run.

use crate::tensor::Element;

/// Strided matrix view: `(data, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn trans(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }
}

fn check_bounds(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "gemm operand out of bounds ({last} >= {len})");
    }
}

/// `c[m,n] = alpha * a[m,k] @ b[k,n] + beta * c`, with `c` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(m: usize, k: usize, n: usize, alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    check_bounds(a.data.len(), m, k, a.rs, a.cs);
    check_bounds(b.data.len(), k, n, b.rs, b.cs);
    check_bounds(c.len(), m, n, n, 1);
    if m == 0 || n == 0 {
        return;
    }
    if a.cs == 1 && b.rs == 1 && m * n <= SMALL_OUT && k >= REPACK_MIN_K {
        for i in 0..m {
            let ar = &a.data[i * a.rs..i * a.rs + k];
            for j in 0..n {
                let d = dot(ar, &b.data[j * b.cs..j * b.cs + k]);
                let cij = &mut c[i * n + j];
                *cij = if beta == T::ZERO { alpha * d } else { alpha * d + beta * *cij };
            }
        }
        return;
    }
    // The packing routines are slow when the reduction axis is the contiguous
    // one, so long reductions get a k-major copy first.
    let (a_buf, b_buf);
    let a = if k >= REPACK_MIN_K && a.cs == 1 && m > 1 {
        a_buf = repack(a, m, k);
        MatRef {
            data: &a_buf[..],
            rs: 1,
            cs: m,
        }
    } else {
        a
    };
    let b = if k >= REPACK_MIN_K && b.rs == 1 && n > 1 {
        b_buf = repack(
            MatRef {
                data: b.data,
                rs: b.cs,
                cs: b.rs,
            },
            n,
            k,
        );
        MatRef {
            data: &b_buf[..],
            rs: n,
            cs: 1,
        }
    } else {
        b
    };
    // SAFETY: all three operands were bounds-checked above for the given
    // shapes and strides, and `c` is exclusively borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const REPACK_MIN_K: usize = 64;
const SMALL_OUT: usize = 64;

/// Sum with eight fixed partial sums.
#[inline(always)]
pub(crate) fn lane_sum<T: Element>(a: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let chunks = a.chunks_exact(8);
    let mut tail = T::ZERO;
    for &x in chunks.remainder() {
        tail += x;
    }
    for x in chunks {
        for l in 0..8 {
            acc[l] += x[l];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Maximum of a non-empty slice.
#[inline(always)]
pub(crate) fn lane_max<T: Element>(a: &[T]) -> T {
    let mut acc = [a[0]; 8];
    let chunks = a.chunks_exact(8);
    let mut tail = a[0];
    for &x in chunks.remainder() {
        tail = if x > tail { x } else { tail };
    }
    for x in chunks {
        for l in 0..8 {
            acc[l] = if x[l] > acc[l] { x[l] } else { acc[l] };
        }
    }
    acc.iter().fold(tail, |m, &v| if v > m { v } else { m })
}

/// Dot product with eight fixed partial sums (vectorizable, order is fixed).
#[inline(always)]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Copy a `rows x k` view into k-major order: `out[p * rows + i] = v[i, p]`.
fn repack<T: Element>(v: MatRef<'_, T>, rows: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * k];
    for i in 0..rows {
        let src = &v.data[i * v.rs..];
        for p in 0..k {
            out[p * rows + i] = src[p * v.cs];
        }
    }
    out
}

/// Geometry of a stride-1 2-D convolution on one image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output-column range for kernel column `j`.
    fn ox_range(&self, j: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(j);
        let hi = (self.w + self.pad).saturating_sub(j).min(self.wo);
        (lo, hi.max(lo))
    }
}

/// Unfold one image `[cin, h, w]` into `[cin*kh*kw, ho*wo]`.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let l = g.col_len();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * l..(row + 1) * l];
                let (lo, hi) = g.ox_range(j);
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = oy + i;
                    if iy < g.pad || iy - g.pad >= g.h || lo >= hi {
                        out.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    out[..lo].fill(T::ZERO);
                    out[hi..].fill(T::ZERO);
                    let ix0 = lo + j - g.pad;
                    out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[cin, h, w]`.
/// Transposed [`im2col`]: `rows[pixel * col_rows + r] = cols[r * col_len + pixel]`.
pub(crate) fn im2row<T: Element>(x: &[T], g: &ConvGeom, rows: &mut [T]) {
    let k = g.col_rows();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let dst = &mut rows[(oy * g.wo + ox) * k..(oy * g.wo + ox + 1) * k];
            let mut r = 0;
            for ci in 0..g.cin {
                let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for i in 0..g.kh {
                    let iy = (oy + i).wrapping_sub(g.pad);
                    for j in 0..g.kw {
                        let ix = (ox + j).wrapping_sub(g.pad);
                        dst[r] = if iy < g.h && ix < g.w { plane[iy * g.w + ix] } else { T::ZERO };
                        r += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l = g.col_len();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * l..(row + 1) * l];
                let (lo, hi) = g.ox_range(j);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = oy + i;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let ix0 = lo + j - g.pad;
                    let dst = &mut plane[(iy - g.pad) * g.w + ix0..(iy - g.pad) * g.w + ix0 + (hi - lo)];
                    for (d, &s) in dst.iter_mut().zip(&src[oy * g.wo + lo..oy * g.wo + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Batched convolution forward; `out` is `[batch, cout, ho, wo]`.
pub(crate) fn conv2d_forward<T: Element>(x: &[T], w: &[T], bias: &[T], batch: usize, cout: usize, g: &ConvGeom, out: &mut [T]) {
    let k = g.col_rows();
    let l = g.col_len();
    let in_len = g.cin * g.h * g.w;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; k * l] };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * cout * l..(b + 1) * cout * l];
        for (co, row) in ob.chunks_mut(l).enumerate() {
            row.fill(bias[co]);
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(cout, k, l, T::ONE, MatRef::rows(w, k), MatRef::rows(src, l), T::ONE, ob);
    }
}

/// Accumulating convolution backward. Any of the gradient outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dout: &[T],
    batch: usize,
    cout: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let k = g.col_rows();
    let l = g.col_len();
    let in_len = g.cin * g.h * g.w;
    let mut rows = if g.is_pointwise() || dw.is_none() {
        Vec::new()
    } else {
        vec![T::ZERO; k * l]
    };
    let mut dcols = if g.is_pointwise() || dx.is_none() {
        Vec::new()
    } else {
        vec![T::ZERO; k * l]
    };
    for b in 0..batch {
        let gb = &dout[b * cout * l..(b + 1) * cout * l];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in gb.chunks(l).enumerate() {
                db[co] += lane_sum(row);
            }
        }
        let xb = &x[b * in_len..(b + 1) * in_len];
        if let Some(dw) = dw.as_deref_mut() {
            if g.is_pointwise() {
                gemm(cout, l, k, T::ONE, MatRef::rows(gb, l), MatRef::trans(xb, l), T::ONE, dw);
            } else {
                im2row(xb, g, &mut rows);
                gemm(cout, l, k, T::ONE, MatRef::rows(gb, l), MatRef::rows(&rows, k), T::ONE, dw);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(k, cout, l, T::ONE, MatRef::trans(w, k), MatRef::rows(gb, l), T::ONE, dxb);
            } else {
                gemm(k, cout, l, T::ONE, MatRef::trans(w, k), MatRef::rows(gb, l), T::ZERO, &mut dcols);
                col2im_add(&dcols, g, dxb);
            }
        }
    }
}

/// Per-pixel, per-channel `k x k` filtering with zero padding.
///
/// `x` is `[b, c, h, w]`, `filters` is `[b, h, w, c, k, k]`.
pub(crate) fn dynamic_filter_forward<T: Element>(x: &[T], filters: &[T], dims: [usize; 4], k: usize, out: &mut [T]) {
    let [nb, c, h, w] = dims;
    let r = k / 2;
    let kk = k * k;
    for b in 0..nb {
        for y in 0..h {
            for xx in 0..w {
                let fbase = ((b * h + y) * w + xx) * c * kk;
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    let f = &filters[fbase + ch * kk..fbase + (ch + 1) * kk];
                    let mut acc = T::ZERO;
                    for i in 0..k {
                        let iy = y + i;
                        if iy < r || iy - r >= h {
                            continue;
                        }
                        let row = plane + (iy - r) * w;
                        for j in 0..k {
                            let ix = xx + j;
                            if ix < r || ix - r >= w {
                                continue;
                            }
                            acc += f[i * k + j] * x[row + ix - r];
                        }
                    }
                    out[plane + y * w + xx] = acc;
                }
            }
        }
    }
}

pub(crate) fn dynamic_filter_backward<T: Element>(
    x: &[T],
    filters: &[T],
    dout: &[T],
    dims: [usize; 4],
    k: usize,
    mut dx: Option<&mut [T]>,
    mut dfilters: Option<&mut [T]>,
) {
    let [nb, c, h, w] = dims;
    let r = k / 2;
    let kk = k * k;
    for b in 0..nb {
        for y in 0..h {
            for xx in 0..w {
                let fbase = ((b * h + y) * w + xx) * c * kk;
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    let g = dout[plane + y * w + xx];
                    let fo = fbase + ch * kk;
                    for i in 0..k {
                        let iy = y + i;
                        if iy < r || iy - r >= h {
                            continue;
                        }
                        let row = plane + (iy - r) * w;
                        for j in 0..k {
                            let ix = xx + j;
                            if ix < r || ix - r >= w {
                                continue;
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[row + ix - r] += filters[fo + i * k + j] * g;
                            }
                            if let Some(df) = dfilters.as_deref_mut() {
                                df[fo + i * k + j] += x[row + ix - r] * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(outer, axis_len, inner)` decomposition for reductions along `axis`.
pub(crate) fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

pub(crate) fn softmax_forward<T: Element>(x: &[T], split: (usize, usize, usize), out: &mut [T]) {
    let (outer, n, inner) = split;
    if inner == 1 {
        for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
            let mut m = src[0];
            for &v in &src[1..] {
                m = m.max(v);
            }
            let mut s = T::ZERO;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - m).exp();
                s += *d;
            }
            for d in dst.iter_mut() {
                *d = *d / s;
            }
        }
        return;
    }
    let mut maxes = vec![T::ZERO; inner];
    let mut sums = vec![T::ZERO; inner];
    for o in 0..outer {
        let base = o * n * inner;
        maxes.copy_from_slice(&x[base..base + inner]);
        for a in 1..n {
            for (m, &v) in maxes.iter_mut().zip(&x[base + a * inner..base + (a + 1) * inner]) {
                *m = m.max(v);
            }
        }
        sums.fill(T::ZERO);
        for a in 0..n {
            let off = base + a * inner;
            for i in 0..inner {
                let e = (x[off + i] - maxes[i]).exp();
                out[off + i] = e;
                sums[i] += e;
            }
        }
        for a in 0..n {
            let off = base + a * inner;
            for i in 0..inner {
                out[off + i] = out[off + i] / sums[i];
            }
        }
    }
}

/// Accumulates `y * (g - sum(g * y))` into `dx`.
pub(crate) fn softmax_backward<T: Element>(y: &[T], g: &[T], split: (usize, usize, usize), dx: &mut [T]) {
    let (outer, n, inner) = split;
    let mut dots = vec![T::ZERO; inner];
    for o in 0..outer {
        let base = o * n * inner;
        dots.fill(T::ZERO);
        for a in 0..n {
            let off = base + a * inner;
            for i in 0..inner {
                dots[i] += g[off + i] * y[off + i];
            }
        }
        for a in 0..n {
            let off = base + a * inner;
            for i in 0..inner {
                dx[off + i] += y[off + i] * (g[off + i] - dots[i]);
            }
        }
    }
}

/// Layer norm over rows of length `c`. Returns the normalized rows and per-row
/// reciprocal standard deviations.
pub(crate) fn layer_norm_forward<T: Element>(x: &[T], gamma: &[T], beta: &[T], c: usize, eps: T, out: &mut [T]) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let inv_c = T::ONE / T::from_f64(c as f64);
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; rows];
    for r in 0..rows {
        let src = &x[r * c..(r + 1) * c];
        let mut mean = T::ZERO;
        for &v in src {
            mean += v;
        }
        mean *= inv_c;
        let mut var = T::ZERO;
        for &v in src {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_c;
        let rs = T::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..c {
            let xh = (src[i] - mean) * rs;
            xhat[r * c + i] = xh;
            out[r * c + i] = xh * gamma[i] + beta[i];
        }
    }
    (xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Element>(
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    g: &[T],
    c: usize,
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let rows = xhat.len() / c;
    let inv_c = T::ONE / T::from_f64(c as f64);
    let mut dxhat = vec![T::ZERO; c];
    for r in 0..rows {
        let xr = &xhat[r * c..(r + 1) * c];
        let gr = &g[r * c..(r + 1) * c];
        if let Some(dg) = dgamma.as_deref_mut() {
            for i in 0..c {
                dg[i] += gr[i] * xr[i];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for i in 0..c {
                db[i] += gr[i];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mut m1 = T::ZERO;
            let mut m2 = T::ZERO;
            for i in 0..c {
                dxhat[i] = gr[i] * gamma[i];
                m1 += dxhat[i];
                m2 += dxhat[i] * xr[i];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            let dr = &mut dx[r * c..(r + 1) * c];
            for i in 0..c {
                dr[i] += rstd[r] * (dxhat[i] - m1 - xr[i] * m2);
            }
        }
    }
}

/// Index plan for numpy-style broadcasting of two operands.
#[derive(Debug, Clone)]
pub(crate) struct Broadcast {
    pub out_dims: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let nd = a.len().max(b.len());
        let pad = |d: &[usize]| -> Vec<usize> {
            let mut v = vec![1; nd - d.len()];
            v.extend_from_slice(d);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_dims = Vec::with_capacity(nd);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out_dims.push(x);
            } else if x == 1 {
                out_dims.push(y);
            } else {
                return None;
            }
        }
        let strides = |p: &[usize]| -> Vec<usize> {
            let full = crate::tensor::strides_of(p);
            p.iter().zip(full).map(|(&d, s)| if d == 1 { 0 } else { s }).collect()
        };
        Some(Broadcast {
            a_strides: strides(&pa),
            b_strides: strides(&pb),
            out_dims,
        })
    }

    pub fn numel(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let nd = self.out_dims.len();
        let last = self.out_dims[nd - 1];
        let (sa, sb) = (self.a_strides[nd - 1], self.b_strides[nd - 1]);
        let rows = self.numel() / last;
        let mut idx = vec![0usize; nd - 1];
        let (mut ia, mut ib) = (0usize, 0usize);
        for row in 0..rows {
            let base = row * last;
            for t in 0..last {
                f(base + t, ia + t * sa, ib + t * sb);
            }
            // odometer increment over the leading dims
            for d in (0..nd - 1).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_dims[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}
