//! Scene data: normalization, a synthetic paired-scene generator, cropping,
//! the GTNS tensor container and the on-disk dataset layout.
//!
//! Dataset layout:
//!
//! ```text
//! root/manifest.tsv                 scene  height  width  coverage
//! root/scene_000000/s1.gtns         [2, H, W]   SAR (VV, VH)
//! root/scene_000000/s2.gtns         [bands, H, W] cloud-free optical
//! root/scene_000000/s2_cloudy.gtns  [bands, H, W] cloudy optical
//! root/scene_000000/mask.gtns       [1, H, W]   cloud mask, 1 = cloud
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const VV_RANGE_DB: (f64, f64) = (-25.0, 0.0);
pub const VH_RANGE_DB: (f64, f64) = (-32.5, 0.0);
pub const OPTICAL_MAX: f64 = 10000.0;

fn clip_unit(v: f64, lo: f64, hi: f64) -> f64 {
    (v.clamp(lo, hi) - lo) / (hi - lo)
}

/// Clip VV and VH backscatter (dB) to their ranges and map each to [0, 1].
pub fn normalize_sar<T: Element>(vv_db: &Tensor<T>, vh_db: &Tensor<T>) -> Result<Tensor<T>> {
    if vv_db.dims() != vh_db.dims() || vv_db.ndim() != 2 {
        return Err(Error::shape("normalize_sar", vv_db.dims(), vh_db.dims()));
    }
    let map = |t: &Tensor<T>, (lo, hi): (f64, f64)| t.map(|v| T::from_f64(clip_unit(v.to_f64(), lo, hi)));
    let (h, w) = (vv_db.dims()[0], vv_db.dims()[1]);
    Tensor::stack(&[map(vv_db, VV_RANGE_DB), map(vh_db, VH_RANGE_DB)])?.reshape(vec![2, h, w])
}

/// Clip raw digital numbers to [0, 10000] and divide by 10000.
pub fn normalize_optical<T: Element>(raw: &Tensor<T>) -> Tensor<T> {
    raw.map(|v| T::from_f64(clip_unit(v.to_f64(), 0.0, OPTICAL_MAX)))
}

/// One co-registered scene. Every member is `[C, H, W]` with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTriplet<T: Element> {
    pub s2_cloudfree: Tensor<T>,
    pub s2_cloudy: Tensor<T>,
    pub s1: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Element> SceneTriplet<T> {
    pub fn new(s2_cloudfree: Tensor<T>, s2_cloudy: Tensor<T>, s1: Tensor<T>, mask: Tensor<T>) -> Result<Self> {
        let t = SceneTriplet {
            s2_cloudfree,
            s2_cloudy,
            s1,
            mask,
        };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        let d = self.s2_cloudfree.dims();
        if d.len() != 3 {
            return Err(Error::shape("scene optical", d, &[0, 0, 0]));
        }
        if self.s2_cloudy.dims() != d {
            return Err(Error::shape("scene cloudy", self.s2_cloudy.dims(), d));
        }
        for (name, t, c) in [("scene sar", &self.s1, 2), ("scene mask", &self.mask, 1)] {
            if t.dims() != [c, d[1], d[2]] {
                return Err(Error::shape(name, t.dims(), &[c, d[1], d[2]]));
            }
        }
        Ok(())
    }

    pub fn bands(&self) -> usize {
        self.s2_cloudfree.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.s2_cloudfree.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.s2_cloudfree.dims()[2]
    }

    /// Fraction of cloudy pixels (mask mean).
    pub fn coverage(&self) -> f64 {
        self.mask.mean_f64()
    }

    pub fn cast<U: Element>(&self) -> SceneTriplet<U> {
        SceneTriplet {
            s2_cloudfree: self.s2_cloudfree.cast(),
            s2_cloudy: self.s2_cloudy.cast(),
            s1: self.s1.cast(),
            mask: self.mask.cast(),
        }
    }

    fn members(&self) -> [(&'static str, &Tensor<T>); 4] {
        [
            ("s1", &self.s1),
            ("s2", &self.s2_cloudfree),
            ("s2_cloudy", &self.s2_cloudy),
            ("mask", &self.mask),
        ]
    }
}

/// Synthetic scene parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub seed: u64,
    /// Gamma shape of the multiplicative speckle (1 = single look).
    pub looks: f64,
    /// Per-scene cloud coverage is drawn uniformly from this range.
    pub coverage: (f64, f64),
    /// Width of the mask's soft edge in units of the cloud field's std.
    pub softness: f64,
}

/// Smallest scene side: twice the default 8-pixel window.
pub const MIN_SCENE_SIZE: usize = 16;

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            bands: 13,
            seed: 0,
            looks: 1.0,
            coverage: (0.4, 0.4),
            softness: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SCENE_SIZE || self.width < MIN_SCENE_SIZE {
            return Err(Error::Config(format!(
                "scene size {}x{} is below {MIN_SCENE_SIZE}",
                self.height, self.width
            )));
        }
        if self.bands == 0 {
            return Err(Error::Config("bands must be positive".into()));
        }
        let (lo, hi) = self.coverage;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("coverage range [{lo}, {hi}] must lie in [0, 1]")));
        }
        if !(self.looks > 0.0 && self.looks.is_finite()) {
            return Err(Error::Config(format!("looks must be positive, got {}", self.looks)));
        }
        if !(self.softness >= 0.0 && self.softness.is_finite()) {
            return Err(Error::Config(format!("softness must be non-negative, got {}", self.softness)));
        }
        Ok(())
    }
}

/// Row-major `h x w` plane.
#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn min_max(&self) -> (f64, f64) {
        self.v
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
    }

    /// Rescale to zero mean and unit standard deviation.
    fn standardize(mut self) -> Self {
        let n = self.v.len() as f64;
        let mean = self.v.iter().sum::<f64>() / n;
        let var = self.v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-12);
        self.v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
        self
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian blur with edge clamping.
fn blur(p: &Plane, sigma: f64) -> Plane {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = Plane {
        h: p.h,
        w: p.w,
        v: vec![0.0; p.v.len()],
    };
    for y in 0..p.h {
        for x in 0..p.w {
            tmp.v[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * p.at(y as isize, x as isize + i as isize - r))
                .sum();
        }
    }
    let mut out = tmp.clone();
    for y in 0..p.h {
        for x in 0..p.w {
            out.v[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp.at(y as isize + i as isize - r, x as isize))
                .sum();
        }
    }
    out
}

fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, sigma: f64) -> Plane {
    let white = Plane {
        h,
        w,
        v: (0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    };
    blur(&white, sigma).standardize()
}

fn sobel_magnitude(p: &Plane) -> Plane {
    let mut out = vec![0.0; p.v.len()];
    for y in 0..p.h as isize {
        for x in 0..p.w as isize {
            let a = |dy: isize, dx: isize| p.at(y + dy, x + dx);
            let gx = a(-1, 1) + 2.0 * a(0, 1) + a(1, 1) - a(-1, -1) - 2.0 * a(0, -1) - a(1, -1);
            let gy = a(1, -1) + 2.0 * a(1, 0) + a(1, 1) - a(-1, -1) - 2.0 * a(-1, 0) - a(-1, 1);
            out[y as usize * p.w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    Plane { h: p.h, w: p.w, v: out }
}

/// Soft mask `clamp(0.5 + (n - t) / softness, 0, 1)`; a hard threshold when
/// softness is zero.
fn ramp(field: &Plane, t: f64, softness: f64) -> Vec<f64> {
    field
        .v
        .iter()
        .map(|&n| {
            if softness > 0.0 {
                (0.5 + (n - t) / softness).clamp(0.0, 1.0)
            } else if n > t {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

const BISECTION_STEPS: usize = 100;
const COVERAGE_TOLERANCE: f64 = 0.05;

/// Threshold `field` so that the mask mean is within tolerance of `target`.
fn cloud_mask(field: &Plane, target: f64, softness: f64) -> Result<Vec<f64>> {
    let (lo_v, hi_v) = field.min_max();
    let mut lo = lo_v - softness - 1.0;
    let mut hi = hi_v + softness + 1.0;
    if target <= 0.0 {
        return Ok(ramp(field, hi, softness));
    }
    if target >= 1.0 {
        return Ok(ramp(field, lo, softness));
    }
    let mean = |m: &[f64]| m.iter().sum::<f64>() / m.len() as f64;
    let mut best = ramp(field, 0.5 * (lo + hi), softness);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        best = ramp(field, mid, softness);
        let c = mean(&best);
        if (c - target).abs() < 1e-4 {
            break;
        }
        // Coverage falls as the threshold rises.
        if c > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = mean(&best);
    if (c - target).abs() > COVERAGE_TOLERANCE {
        return Err(Error::Generation(format!(
            "cloud coverage {c:.4} misses target {target:.4} after {BISECTION_STEPS} bisection steps"
        )));
    }
    Ok(best)
}

/// Cloud-free optical field: smooth latent fields mixed into strongly
/// correlated bands, plus primitives shared across bands.
fn ground_truth(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<Plane> {
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w) as f64;
    let latents: Vec<Plane> = [8.0, 4.0, 16.0].iter().map(|div| smooth_noise(rng, h, w, side / div)).collect();
    let base: Vec<f64> = (0..cfg.bands).map(|_| rng.random_range(0.2..0.5)).collect();
    // Latent 0 loads positively on every band; the others add band-specific detail.
    let gain: Vec<f64> = (0..cfg.bands).map(|_| rng.random_range(0.6..1.0)).collect();
    let mut bands: Vec<Plane> = base
        .iter()
        .zip(&gain)
        .map(|(&b, &g)| {
            let mix = [
                0.1 * g,
                0.03 * rng.sample::<f64, _>(StandardNormal),
                0.02 * rng.sample::<f64, _>(StandardNormal),
            ];
            let v = (0..h * w)
                .map(|i| b + latents.iter().zip(&mix).map(|(l, a)| a * l.v[i]).sum::<f64>())
                .collect();
            Plane { h, w, v }
        })
        .collect();

    // Bright or dark object: a shared shift scaled per band, plus a small tint.
    let spectrum = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let shift = rng.random_range(0.1..0.3) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        base.iter()
            .zip(&gain)
            .map(|(b, g)| (b + shift * g + 0.03 * rng.sample::<f64, _>(StandardNormal)).clamp(0.02, 0.98))
            .collect()
    };
    let rects = rng.random_range(2..=6);
    for _ in 0..rects {
        let rh = rng.random_range(3..=h / 3);
        let rw = rng.random_range(3..=w / 3);
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        let s = spectrum(rng);
        for (plane, &sv) in bands.iter_mut().zip(&s) {
            for y in y0..y0 + rh {
                plane.v[y * w + x0..y * w + x0 + rw].fill(sv);
            }
        }
    }
    let lines = rng.random_range(1..=3);
    for _ in 0..lines {
        let (y0, x0) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let half = rng.random_range(0.5..1.5);
        let (dy, dx) = (angle.sin(), angle.cos());
        let s = spectrum(rng);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5 - y0, x as f64 + 0.5 - x0);
                if (py * dx - px * dy).abs() <= half {
                    for (plane, &sv) in bands.iter_mut().zip(&s) {
                        plane.v[y * w + x] = sv;
                    }
                }
            }
        }
    }
    for p in &mut bands {
        p.v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    }
    bands
}

/// Speckled, normalized SAR channels derived from the optical structure.
fn sar_from_structure(rng: &mut ChaCha8Rng, truth: &[Plane], looks: f64) -> [Plane; 2] {
    let (h, w) = (truth[0].h, truth[0].w);
    let n = h * w;
    let mean = Plane {
        h,
        w,
        v: (0..n)
            .map(|i| truth.iter().map(|p| p.v[i]).sum::<f64>() / truth.len() as f64)
            .collect(),
    };
    let edges = sobel_magnitude(&mean);
    let structure: Vec<f64> = (0..n).map(|i| mean.v[i] + 0.25 * edges.v[i]).collect();
    let (lo, hi) = structure
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = (hi - lo).max(1e-12);
    let speckle = Gamma::new(looks, 1.0 / looks).expect("validated looks");
    let mut channel = |(db_lo, db_hi): (f64, f64), range: (f64, f64)| -> Plane {
        let v = structure
            .iter()
            .map(|&s| {
                let db = db_lo + (db_hi - db_lo) * (s - lo) / span;
                let intensity = 10f64.powf(db / 10.0) * speckle.sample(rng);
                let db = 10.0 * intensity.max(1e-30).log10();
                clip_unit(db, range.0, range.1)
            })
            .collect();
        Plane { h, w, v }
    };
    let vv = channel((-22.0, -4.0), VV_RANGE_DB);
    let vh = channel((-29.0, -9.0), VH_RANGE_DB);
    [vv, vh]
}

fn planes_to_tensor<T: Element>(planes: &[Plane]) -> Tensor<T> {
    let (h, w) = (planes[0].h, planes[0].w);
    let data = planes.iter().flat_map(|p| p.v.iter().map(|&x| T::from_f64(x))).collect();
    Tensor::new(vec![planes.len(), h, w], data).expect("plane stack")
}

/// Independent rng for scene `index` of a dataset seeded with `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Scene 0 of the configured seed.
pub fn synth_scene<T: Element>(cfg: &SynthConfig) -> Result<SceneTriplet<T>> {
    synth_scene_at(cfg, 0)
}

/// Scene `index`; each index draws from its own rng stream.
pub fn synth_scene_at<T: Element>(cfg: &SynthConfig, index: u64) -> Result<SceneTriplet<T>> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    let (lo, hi) = cfg.coverage;
    let u: f64 = rng.random();
    let target = lo + (hi - lo) * u;

    let truth = ground_truth(&mut rng, cfg);
    let sar = sar_from_structure(&mut rng, &truth, cfg.looks);

    let (h, w) = (cfg.height, cfg.width);
    let field = smooth_noise(&mut rng, h, w, h.min(w) as f64 / 10.0);
    let mask = cloud_mask(&field, target, cfg.softness)?;
    let haze = smooth_noise(&mut rng, h, w, h.min(w) as f64 / 16.0);
    let cloudy: Vec<Plane> = truth
        .iter()
        .map(|t| {
            let tint = rng.random_range(0.86..0.94);
            let v = (0..h * w)
                .map(|i| {
                    let cloud = (tint + 0.02 * haze.v[i]).clamp(0.0, 1.0);
                    let m = mask[i];
                    (1.0 - m) * t.v[i] + m * cloud
                })
                .collect();
            Plane { h, w, v }
        })
        .collect();
    let mask = Plane { h, w, v: mask };
    SceneTriplet::new(
        planes_to_tensor(&truth),
        planes_to_tensor(&cloudy),
        planes_to_tensor(&sar),
        planes_to_tensor(std::slice::from_ref(&mask)),
    )
}

/// Top-left offsets of a `size x size` window inside an `h x w` scene.
pub fn crop_offsets(h: usize, w: usize, size: usize, rng: &mut impl Rng) -> (usize, usize) {
    (rng.random_range(0..=h - size), rng.random_range(0..=w - size))
}

/// Cut the same random `size x size` window out of every member.
///
/// `multiple` is the size divisor the network needs (its window size).
pub fn crop_sample<T: Element>(t: &SceneTriplet<T>, size: usize, multiple: usize, rng: &mut impl Rng) -> Result<SceneTriplet<T>> {
    let (h, w) = (t.height(), t.width());
    if size == 0 || size > h || size > w {
        return Err(Error::Contract(format!("crop size {size} does not fit a {h}x{w} scene")));
    }
    if multiple == 0 || !size.is_multiple_of(multiple) {
        return Err(Error::Contract(format!("crop size {size} is not a multiple of {multiple}")));
    }
    let (y0, x0) = crop_offsets(h, w, size, rng);
    crop_at(t, y0, x0, size)
}

pub fn crop_at<T: Element>(t: &SceneTriplet<T>, y0: usize, x0: usize, size: usize) -> Result<SceneTriplet<T>> {
    if size == t.height() && size == t.width() {
        return Ok(t.clone());
    }
    let cut = |x: &Tensor<T>| x.narrow(1, y0, size)?.narrow(2, x0, size);
    SceneTriplet::new(cut(&t.s2_cloudfree)?, cut(&t.s2_cloudy)?, cut(&t.s1)?, cut(&t.mask)?)
}

pub const GTNS_MAGIC: &[u8; 4] = b"GTNS";
pub const GTNS_VERSION: u16 = 1;

/// A tensor read from disk in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    /// Convert to the requested precision (exact when widening).
    pub fn into_element<T: Element>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

/// Append one GTNS record to `out`.
pub fn encode_tensor<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Contract(format!("{} dims exceed the GTNS limit", t.ndim())));
    }
    out.extend_from_slice(GTNS_MAGIC);
    out.extend_from_slice(&GTNS_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

/// Byte cursor that reports absolute offsets on failure.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.base + self.bytes.len() as u64,
                reason: format!("truncated {what}: need {n} bytes, have {}", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn fail(&self, at: usize, reason: String) -> Error {
        Error::Format {
            offset: self.base + at as u64,
            reason,
        }
    }
}

fn decode_body<T: Element>(c: &mut Cursor<'_>, dims: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = dims.iter().product();
    let size = T::DTYPE.size();
    let at = c.pos;
    let payload = c.take(
        n.checked_mul(size).ok_or_else(|| c.fail(at, "payload size overflows".into()))?,
        "payload",
    )?;
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(dims, data).map_err(|e| c.fail(at, e.to_string()))
}

/// Decode one GTNS record starting at `bytes[0]`. `base` is the absolute
/// offset of `bytes` in its file, used in error reports. Returns the tensor
/// and the number of bytes consumed.
pub fn decode_tensor(bytes: &[u8], base: u64) -> Result<(AnyTensor, usize)> {
    let mut c = Cursor { bytes, pos: 0, base };
    let magic = c.take(4, "magic")?;
    if magic != GTNS_MAGIC {
        return Err(c.fail(0, format!("bad magic {magic:02x?}")));
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().expect("2 bytes"));
    if version != GTNS_VERSION {
        return Err(c.fail(4, format!("unsupported version {version}")));
    }
    let code = c.take(1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or_else(|| c.fail(6, format!("unknown dtype code {code}")))?;
    let ndim = c.take(1, "ndim")?[0] as usize;
    if ndim == 0 {
        return Err(c.fail(7, "zero-dimensional tensor".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let at = c.pos;
        let d = u32::from_le_bytes(c.take(4, "dims")?.try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(c.fail(at, "zero-length dimension".into()));
        }
        dims.push(d);
    }
    let t = match dtype {
        DType::F32 => AnyTensor::F32(decode_body(&mut c, dims)?),
        DType::F64 => AnyTensor::F64(decode_body(&mut c, dims)?),
    };
    Ok((t, c.pos))
}

/// Write `bytes` to `path` via a sibling temp file and rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf)?;
    write_atomic(path.as_ref(), &buf)
}

/// Read a single-record GTNS file. Trailing bytes are a format error.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::Format {
            offset: used as u64,
            reason: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:06}"))
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Write a scene's four members in `T` precision.
pub fn write_scene<T: Element>(root: &Path, index: usize, scene: &SceneTriplet<T>) -> Result<()> {
    let dir = scene_dir(root, index);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (name, t) in scene.members() {
        write_tensor(dir.join(format!("{name}.gtns")), t)?;
    }
    Ok(())
}

pub fn read_scene<T: Element>(root: &Path, index: usize) -> Result<SceneTriplet<T>> {
    let dir = scene_dir(root, index);
    let load = |name: &str| -> Result<Tensor<T>> { Ok(read_tensor(dir.join(format!("{name}.gtns")))?.into_element()) };
    SceneTriplet::new(load("s2")?, load("s2_cloudy")?, load("s1")?, load("mask")?)
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub scene: usize,
    pub height: usize,
    pub width: usize,
    pub coverage: f64,
}

pub fn write_manifest(root: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut s = String::from("scene\theight\twidth\tcoverage\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\t{:.6}\n", r.scene, r.height, r.width, r.coverage));
    }
    write_atomic(&root.join(MANIFEST_FILE), s.as_bytes())
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut offset = 0u64;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let here = offset;
        offset += line.len() as u64 + 1;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Format { offset: here, reason };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(format!("manifest line {} has {} fields", i + 1, f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", i + 1)));
        rows.push(ManifestRow {
            scene: int(f[0])?,
            height: int(f[1])?,
            width: int(f[2])?,
            coverage: f[3].parse().map_err(|e| bad(format!("line {}: {e}", i + 1)))?,
        });
    }
    Ok(rows)
}

/// Generate `count` scenes under `root` (f32 on disk) and write the manifest.
pub fn synth_dataset(root: &Path, cfg: &SynthConfig, count: usize) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let scene: SceneTriplet<f32> = synth_scene_at(cfg, i as u64)?;
        write_scene(root, i, &scene)?;
        rows.push(ManifestRow {
            scene: i,
            height: scene.height(),
            width: scene.width(),
            coverage: scene.coverage(),
        });
    }
    write_manifest(root, &rows)?;
    Ok(rows)
}

/// All scenes of a dataset directory, in manifest order.
pub fn load_dataset<T: Element>(root: &Path) -> Result<Vec<SceneTriplet<T>>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    read_manifest(root)?.iter().map(|r| read_scene(root, r.scene)).collect()
}

/// Stack `[C, H, W]` members into a `[B, C, H, W]` batch.
pub fn batch<T: Element>(scenes: &[SceneTriplet<T>]) -> Result<Batch<T>> {
    let stack = |f: fn(&SceneTriplet<T>) -> &Tensor<T>| Tensor::stack(&scenes.iter().map(|s| f(s).clone()).collect::<Vec<_>>());
    Ok(Batch {
        cloudfree: stack(|s| &s.s2_cloudfree)?,
        cloudy: stack(|s| &s.s2_cloudy)?,
        sar: stack(|s| &s.s1)?,
    })
}

#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    pub cloudfree: Tensor<T>,
    pub cloudy: Tensor<T>,
    pub sar: Tensor<T>,
}
