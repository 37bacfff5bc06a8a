//! Windowed attention kernels that work one `(window, head)` tile at a time
//! and recompute the score tiles in the backward pass, so the
//! `[windows, heads, N, N]` maps are never stored.
//!
//! Layouts: `q, k, v, y` are `[W, h, N, d]`, `bias` is `[h, N, N]`, the mask
//! is `[Wm, N, N]` (window `w` uses slice `w % Wm`), gate weights are `[h, h]`.
//! Inner loops run along the token axis, so keys and values are transposed
//! to `[d, N]` per tile.

use crate::kernels::{dot, lane_max, lane_sum};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttnGeom {
    pub windows: usize,
    pub heads: usize,
    pub n: usize,
    pub d: usize,
    pub mask_windows: usize,
}

impl AttnGeom {
    fn tile(&self) -> usize {
        self.n * self.n
    }

    fn qkv_range(&self, w: usize, h: usize) -> std::ops::Range<usize> {
        let o = (w * self.heads + h) * self.n * self.d;
        o..o + self.n * self.d
    }

    fn mask_slice<'a, T>(&self, mask: Option<&'a [T]>, w: usize) -> Option<&'a [T]> {
        mask.map(|m| {
            let t = self.tile();
            let i = w % self.mask_windows;
            &m[i * t..(i + 1) * t]
        })
    }
}

/// Runs `f` in a context compiled for AVX2 when the CPU supports it. Rust
/// never reassociates or contracts float ops, so both paths give identical
/// results; only the vector width differs.
#[inline(always)]
fn wide<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2")]
        unsafe fn avx2<R>(f: impl FnOnce() -> R) -> R {
            f()
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { avx2(f) };
        }
    }
    f()
}

#[inline(always)]
fn axpy<T: Element>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// `[n, d]` -> `[d, n]`.
#[inline(always)]
fn transpose_into<T: Element>(src: &[T], n: usize, d: usize, dst: &mut [T]) {
    for j in 0..n {
        for c in 0..d {
            dst[c * n + j] = src[j * d + c];
        }
    }
}

/// `dst[n, d] += src[d, n]^T`.
#[inline(always)]
fn add_transposed<T: Element>(src: &[T], n: usize, d: usize, dst: &mut [T]) {
    for j in 0..n {
        for c in 0..d {
            dst[j * d + c] += src[c * n + j];
        }
    }
}

/// `s[i, j] = <q_i, k_j> + bias[i, j]`, with `kt` the `[d, n]` keys.
#[inline(always)]
fn scores<T: Element>(q: &[T], kt: &[T], bias: &[T], n: usize, d: usize, s: &mut [T]) {
    for i in 0..n {
        let row = &mut s[i * n..(i + 1) * n];
        row.copy_from_slice(&bias[i * n..(i + 1) * n]);
        for c in 0..d {
            axpy(row, q[i * d + c], &kt[c * n..(c + 1) * n]);
        }
    }
}

/// Row softmax of `s + mask` written to `p`.
#[inline(always)]
fn softmax_rows<T: Element>(s: &[T], mask: Option<&[T]>, n: usize, p: &mut [T]) {
    for i in 0..n {
        let src = &s[i * n..(i + 1) * n];
        let dst = &mut p[i * n..(i + 1) * n];
        match mask {
            Some(m) => {
                for ((o, &a), &b) in dst.iter_mut().zip(src).zip(&m[i * n..(i + 1) * n]) {
                    *o = a + b;
                }
            }
            None => dst.copy_from_slice(src),
        }
        let mx = lane_max(dst);
        for o in dst.iter_mut() {
            *o = (*o - mx).exp();
        }
        let inv = T::ONE / lane_sum(dst);
        for o in dst.iter_mut() {
            *o *= inv;
        }
    }
}

/// `y = p v`, with `vt` the `[d, n]` values.
#[inline(always)]
fn apply<T: Element>(p: &[T], vt: &[T], n: usize, d: usize, y: &mut [T]) {
    for i in 0..n {
        let prow = &p[i * n..(i + 1) * n];
        for c in 0..d {
            y[i * d + c] = dot(prow, &vt[c * n..(c + 1) * n]);
        }
    }
}

/// Given `p` and `dy`, accumulate `dvt += (p^T dy)^T` and write the score
/// gradient `ds = p * (dp - rowsum(p * dp))` with `dp = dy v^T`.
#[inline(always)]
fn softmax_apply_backward<T: Element>(p: &[T], vt: &[T], dy: &[T], n: usize, d: usize, dvt: &mut [T], ds: &mut [T]) {
    for i in 0..n {
        let prow = &p[i * n..(i + 1) * n];
        let drow = &mut ds[i * n..(i + 1) * n];
        drow.fill(T::ZERO);
        for c in 0..d {
            let g = dy[i * d + c];
            axpy(drow, g, &vt[c * n..(c + 1) * n]);
            axpy(&mut dvt[c * n..(c + 1) * n], g, prow);
        }
        let s = dot(drow, prow);
        for (dv, &pv) in drow.iter_mut().zip(prow) {
            *dv = pv * (*dv - s);
        }
    }
}

/// Push a score gradient into `dq`, `dkt` (`[d, n]`) and `dbias`.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn scores_backward<T: Element>(ds: &[T], q: &[T], kt: &[T], n: usize, d: usize, dq: &mut [T], dkt: &mut [T], dbias: &mut [T]) {
    for (b, &g) in dbias.iter_mut().zip(ds) {
        *b += g;
    }
    for i in 0..n {
        let srow = &ds[i * n..(i + 1) * n];
        for c in 0..d {
            dq[i * d + c] += dot(srow, &kt[c * n..(c + 1) * n]);
            axpy(&mut dkt[c * n..(c + 1) * n], q[i * d + c], srow);
        }
    }
}

/// Inputs of one attention stream.
#[derive(Clone, Copy)]
pub(crate) struct Stream<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub bias: &'a [T],
}

/// Gradient buffers of one attention stream (same layouts as [`Stream`]).
pub(crate) struct StreamGrad<'a, T> {
    pub q: &'a mut [T],
    pub k: &'a mut [T],
    pub v: &'a mut [T],
    pub bias: &'a mut [T],
}

/// Per-head scratch: transposed keys/values and their gradients.
struct HeadScratch<T> {
    kt: Vec<T>,
    vt: Vec<T>,
    dkt: Vec<T>,
    dvt: Vec<T>,
}

impl<T: Element> HeadScratch<T> {
    fn new(geom: &AttnGeom) -> Self {
        let len = geom.n * geom.d;
        HeadScratch {
            kt: vec![T::ZERO; len],
            vt: vec![T::ZERO; len],
            dkt: vec![T::ZERO; len],
            dvt: vec![T::ZERO; len],
        }
    }

    #[inline(always)]
    fn load(&mut self, s: &Stream<'_, T>, r: std::ops::Range<usize>, n: usize, d: usize) {
        transpose_into(&s.k[r.clone()], n, d, &mut self.kt);
        transpose_into(&s.v[r], n, d, &mut self.vt);
        self.dkt.fill(T::ZERO);
        self.dvt.fill(T::ZERO);
    }

    #[inline(always)]
    fn store(&self, g: &mut StreamGrad<'_, T>, r: std::ops::Range<usize>, n: usize, d: usize) {
        add_transposed(&self.dkt, n, d, &mut g.k[r.clone()]);
        add_transposed(&self.dvt, n, d, &mut g.v[r]);
    }
}

pub(crate) fn attention_forward<T: Element>(geom: &AttnGeom, s: Stream<'_, T>, mask: Option<&[T]>, y: &mut [T]) {
    wide(
        #[inline(always)]
        move || {
            let (n, d, t) = (geom.n, geom.d, geom.tile());
            let mut sc = vec![T::ZERO; t];
            let mut p = vec![T::ZERO; t];
            let mut hs = HeadScratch::new(geom);
            for w in 0..geom.windows {
                let m = geom.mask_slice(mask, w);
                for h in 0..geom.heads {
                    let r = geom.qkv_range(w, h);
                    hs.load(&s, r.clone(), n, d);
                    scores(&s.q[r.clone()], &hs.kt, &s.bias[h * t..(h + 1) * t], n, d, &mut sc);
                    softmax_rows(&sc, m, n, &mut p);
                    apply(&p, &hs.vt, n, d, &mut y[r]);
                }
            }
        },
    )
}

pub(crate) fn attention_backward<T: Element>(geom: &AttnGeom, s: Stream<'_, T>, mask: Option<&[T]>, dy: &[T], mut g: StreamGrad<'_, T>) {
    wide(
        #[inline(always)]
        move || {
            let (n, d, t) = (geom.n, geom.d, geom.tile());
            let mut sc = vec![T::ZERO; t];
            let mut p = vec![T::ZERO; t];
            let mut ds = vec![T::ZERO; t];
            let mut hs = HeadScratch::new(geom);
            for w in 0..geom.windows {
                let m = geom.mask_slice(mask, w);
                for h in 0..geom.heads {
                    let r = geom.qkv_range(w, h);
                    let bt = h * t..(h + 1) * t;
                    hs.load(&s, r.clone(), n, d);
                    scores(&s.q[r.clone()], &hs.kt, &s.bias[bt.clone()], n, d, &mut sc);
                    softmax_rows(&sc, m, n, &mut p);
                    softmax_apply_backward(&p, &hs.vt, &dy[r.clone()], n, d, &mut hs.dvt, &mut ds);
                    scores_backward(
                        &ds,
                        &s.q[r.clone()],
                        &hs.kt,
                        n,
                        d,
                        &mut g.q[r.clone()],
                        &mut hs.dkt,
                        &mut g.bias[bt],
                    );
                    hs.store(&mut g, r, n, d);
                }
            }
        },
    )
}

/// Per-window tiles of the guided pair, each `[h, N*N]`.
struct GuidedTiles<T> {
    m_opt: Vec<T>,
    m_sar: Vec<T>,
    resid: Vec<T>,
    gate: Vec<T>,
    m_hat: Vec<T>,
    /// `[N*N]` scratch for the head-axis softmax.
    aux: Vec<T>,
    opt: Vec<HeadScratch<T>>,
    sar: Vec<HeadScratch<T>>,
}

impl<T: Element> GuidedTiles<T> {
    fn new(geom: &AttnGeom) -> Self {
        let len = geom.heads * geom.tile();
        GuidedTiles {
            m_opt: vec![T::ZERO; len],
            m_sar: vec![T::ZERO; len],
            resid: vec![T::ZERO; len],
            gate: vec![T::ZERO; len],
            m_hat: vec![T::ZERO; len],
            aux: vec![T::ZERO; geom.tile()],
            opt: (0..geom.heads).map(|_| HeadScratch::new(geom)).collect(),
            sar: (0..geom.heads).map(|_| HeadScratch::new(geom)).collect(),
        }
    }

    /// Scores, gate `softmax_h(W (M_sar - M_opt) + b)` and refined optical
    /// scores `M_sar - R (1 - G)` for window `w`.
    #[inline(always)]
    fn compute(&mut self, geom: &AttnGeom, w: usize, opt: &Stream<'_, T>, sar: &Stream<'_, T>, gw: &[T], gb: &[T]) {
        let (n, d, t, heads) = (geom.n, geom.d, geom.tile(), geom.heads);
        for h in 0..heads {
            let r = geom.qkv_range(w, h);
            let bt = h * t..(h + 1) * t;
            self.opt[h].load(opt, r.clone(), n, d);
            self.sar[h].load(sar, r.clone(), n, d);
            scores(
                &opt.q[r.clone()],
                &self.opt[h].kt,
                &opt.bias[bt.clone()],
                n,
                d,
                &mut self.m_opt[bt.clone()],
            );
            scores(&sar.q[r], &self.sar[h].kt, &sar.bias[bt.clone()], n, d, &mut self.m_sar[bt.clone()]);
            for ((r, &s), &o) in self.resid[bt.clone()].iter_mut().zip(&self.m_sar[bt.clone()]).zip(&self.m_opt[bt]) {
                *r = s - o;
            }
        }
        for ho in 0..heads {
            let z = &mut self.gate[ho * t..(ho + 1) * t];
            z.fill(gb[ho]);
            for h in 0..heads {
                axpy(z, gw[ho * heads + h], &self.resid[h * t..(h + 1) * t]);
            }
        }
        let (mx, sum) = (&mut self.aux, &mut self.m_hat[..t]);
        mx.copy_from_slice(&self.gate[..t]);
        for ho in 1..heads {
            for (m, &z) in mx.iter_mut().zip(&self.gate[ho * t..(ho + 1) * t]) {
                *m = m.max(z);
            }
        }
        sum.fill(T::ZERO);
        for ho in 0..heads {
            for ((z, &m), s) in self.gate[ho * t..(ho + 1) * t].iter_mut().zip(mx.iter()).zip(sum.iter_mut()) {
                *z = (*z - m).exp();
                *s += *z;
            }
        }
        for (m, &s) in mx.iter_mut().zip(sum.iter()) {
            *m = T::ONE / s;
        }
        for ho in 0..heads {
            let bt = ho * t..(ho + 1) * t;
            for (z, &inv) in self.gate[bt.clone()].iter_mut().zip(mx.iter()) {
                *z *= inv;
            }
        }
        for i in 0..heads * t {
            self.m_hat[i] = self.m_sar[i] - self.resid[i] * (T::ONE - self.gate[i]);
        }
    }
}

/// Optical stream attends with `M_sar - R (1 - G)`, `R = M_sar - M_opt`;
/// the SAR stream attends with its own scores. `y_opt`/`y_sar` as `[W, h, N, d]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn guided_forward<T: Element>(
    geom: &AttnGeom,
    opt: Stream<'_, T>,
    sar: Stream<'_, T>,
    gw: &[T],
    gb: &[T],
    mask: Option<&[T]>,
    y_opt: &mut [T],
    y_sar: &mut [T],
) {
    wide(
        #[inline(always)]
        move || {
            let (n, d, t) = (geom.n, geom.d, geom.tile());
            let mut tiles = GuidedTiles::new(geom);
            let mut p = vec![T::ZERO; t];
            for w in 0..geom.windows {
                tiles.compute(geom, w, &opt, &sar, gw, gb);
                let m = geom.mask_slice(mask, w);
                for h in 0..geom.heads {
                    let r = geom.qkv_range(w, h);
                    let bt = h * t..(h + 1) * t;
                    softmax_rows(&tiles.m_hat[bt.clone()], m, n, &mut p);
                    apply(&p, &tiles.opt[h].vt, n, d, &mut y_opt[r.clone()]);
                    softmax_rows(&tiles.m_sar[bt], m, n, &mut p);
                    apply(&p, &tiles.sar[h].vt, n, d, &mut y_sar[r]);
                }
            }
        },
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn guided_backward<T: Element>(
    geom: &AttnGeom,
    opt: Stream<'_, T>,
    sar: Stream<'_, T>,
    gw: &[T],
    gb: &[T],
    mask: Option<&[T]>,
    dy_opt: &[T],
    dy_sar: &[T],
    mut g_opt: StreamGrad<'_, T>,
    mut g_sar: StreamGrad<'_, T>,
    dgw: &mut [T],
    dgb: &mut [T],
) {
    wide(
        #[inline(always)]
        move || {
            let (n, d, t, heads) = (geom.n, geom.d, geom.tile(), geom.heads);
            let mut tiles = GuidedTiles::new(geom);
            let mut p = vec![T::ZERO; t];
            let mut d_hat = vec![T::ZERO; heads * t];
            let mut d_sar = vec![T::ZERO; heads * t];
            let mut dz = vec![T::ZERO; heads * t];
            let mut acc = vec![T::ZERO; t];
            for w in 0..geom.windows {
                tiles.compute(geom, w, &opt, &sar, gw, gb);
                let m = geom.mask_slice(mask, w);
                for h in 0..heads {
                    let r = geom.qkv_range(w, h);
                    let bt = h * t..(h + 1) * t;
                    softmax_rows(&tiles.m_hat[bt.clone()], m, n, &mut p);
                    let hs = &mut tiles.opt[h];
                    softmax_apply_backward(&p, &hs.vt, &dy_opt[r.clone()], n, d, &mut hs.dvt, &mut d_hat[bt.clone()]);
                    softmax_rows(&tiles.m_sar[bt.clone()], m, n, &mut p);
                    let hs = &mut tiles.sar[h];
                    softmax_apply_backward(&p, &hs.vt, &dy_sar[r], n, d, &mut hs.dvt, &mut d_sar[bt]);
                }
                // M_hat = M_opt + R G: dG = dM_hat R, then back through the head softmax
                acc.fill(T::ZERO);
                for ho in 0..heads {
                    let bt = ho * t..(ho + 1) * t;
                    for (((z, &dh), &r), (a, &gv)) in dz[bt.clone()]
                        .iter_mut()
                        .zip(&d_hat[bt.clone()])
                        .zip(&tiles.resid[bt.clone()])
                        .zip(acc.iter_mut().zip(&tiles.gate[bt]))
                    {
                        *z = dh * r;
                        *a += *z * gv;
                    }
                }
                for ho in 0..heads {
                    let bt = ho * t..(ho + 1) * t;
                    let mut s = T::ZERO;
                    for ((z, &gv), &a) in dz[bt.clone()].iter_mut().zip(&tiles.gate[bt]).zip(acc.iter()) {
                        *z = gv * (*z - a);
                        s += *z;
                    }
                    dgb[ho] += s;
                }
                for h in 0..heads {
                    let bt = h * t..(h + 1) * t;
                    // dR = dM_hat G + W^T dZ, reusing `acc`
                    for ((a, &dh), &gv) in acc.iter_mut().zip(&d_hat[bt.clone()]).zip(&tiles.gate[bt.clone()]) {
                        *a = dh * gv;
                    }
                    for ho in 0..heads {
                        let dzo = &dz[ho * t..(ho + 1) * t];
                        axpy(&mut acc, gw[ho * heads + h], dzo);
                        dgw[ho * heads + h] += dot(dzo, &tiles.resid[bt.clone()]);
                    }
                    // d_opt = dM_hat - dR (stored in d_hat), d_sar += dR
                    for ((dh, ds), &a) in d_hat[bt.clone()].iter_mut().zip(&mut d_sar[bt]).zip(acc.iter()) {
                        *dh -= a;
                        *ds += a;
                    }
                }
                for h in 0..heads {
                    let r = geom.qkv_range(w, h);
                    let bt = h * t..(h + 1) * t;
                    let hs = &mut tiles.opt[h];
                    scores_backward(
                        &d_hat[bt.clone()],
                        &opt.q[r.clone()],
                        &hs.kt,
                        n,
                        d,
                        &mut g_opt.q[r.clone()],
                        &mut hs.dkt,
                        &mut g_opt.bias[bt.clone()],
                    );
                    hs.store(&mut g_opt, r.clone(), n, d);
                    let hs = &mut tiles.sar[h];
                    scores_backward(
                        &d_sar[bt.clone()],
                        &sar.q[r.clone()],
                        &hs.kt,
                        n,
                        d,
                        &mut g_sar.q[r.clone()],
                        &mut hs.dkt,
                        &mut g_sar.bias[bt],
                    );
                    hs.store(&mut g_sar, r, n, d);
                }
            }
        },
    )
}
