//! Image quality metrics on `[bands, H, W]` images in [0, 1], plus
//! cloud-cover binned reporting.
//!
//! All arithmetic is f64 regardless of the input precision. The PSNR data
//! range is 1.0, matching the normalized inputs.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// PSNR of identical images.
pub const PSNR_PERFECT: f64 = f64::INFINITY;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Floor on spectrum norms in SAM.
pub const SAM_EPS: f64 = 1e-8;

fn same_dims<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, a.dims(), b.dims()));
    }
    Ok(())
}

fn image_dims<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, t.dims(), &[0, 0, 0])),
    }
}

pub fn mse<T: Element>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    same_dims("mse", pred, reference)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&p, &r)| {
            let d = p.to_f64() - r.to_f64();
            d * d
        })
        .sum();
    Ok(s / pred.numel() as f64)
}

/// `10 log10(1 / MSE)`; [`PSNR_PERFECT`] when the images are identical.
pub fn psnr<T: Element>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    let m = mse(pred, reference)?;
    Ok(if m == 0.0 { PSNR_PERFECT } else { -10.0 * m.log10() })
}

pub fn mae<T: Element>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    same_dims("mae", pred, reference)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&p, &r)| (p.to_f64() - r.to_f64()).abs())
        .sum();
    Ok(s / pred.numel() as f64)
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-position separable filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, a)| a * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Gaussian-window SSIM, averaged over valid positions and bands.
pub fn ssim<T: Element>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    same_dims("ssim", pred, reference)?;
    let (c, h, w) = image_dims("ssim", pred)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = ssim_taps();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for b in 0..c {
        let x: Vec<f64> = pred.data()[b * plane..(b + 1) * plane].iter().map(|v| v.to_f64()).collect();
        let y: Vec<f64> = reference.data()[b * plane..(b + 1) * plane].iter().map(|v| v.to_f64()).collect();
        let prod = |f: &dyn Fn(usize) -> f64| (0..plane).map(f).collect::<Vec<f64>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &k);
        let syy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &k);
        let sxy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &k);
        let band: f64 = (0..mx.len())
            .map(|i| {
                let (a, b) = (mx[i], my[i]);
                let vx = sxx[i] - a * a;
                let vy = syy[i] - b * b;
                let cov = sxy[i] - a * b;
                ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
            })
            .sum();
        total += band / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Mean per-pixel spectral angle in degrees.
///
/// The angle is evaluated as `2 atan2(|p^ - r^|, |p^ + r^|)` on unit
/// spectra, which equals `acos(<p, r> / (|p| |r|))` but stays accurate for
/// nearly parallel spectra. Norms are floored at [`SAM_EPS`].
pub fn sam<T: Element>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    same_dims("sam", pred, reference)?;
    let (c, h, w) = image_dims("sam", pred)?;
    let plane = h * w;
    let (p, r) = (pred.data(), reference.data());
    let mut total = 0.0;
    for i in 0..plane {
        let norm = |t: &[T]| (0..c).map(|b| t[b * plane + i].to_f64().powi(2)).sum::<f64>().sqrt().max(SAM_EPS);
        let (np, nr) = (norm(p), norm(r));
        let (mut diff, mut sum) = (0.0, 0.0);
        for b in 0..c {
            let u = p[b * plane + i].to_f64() / np;
            let v = r[b * plane + i].to_f64() / nr;
            diff += (u - v) * (u - v);
            sum += (u + v) * (u + v);
        }
        total += 2.0 * diff.sqrt().atan2(sum.sqrt());
    }
    Ok((total / plane as f64).to_degrees())
}

/// Keep only the listed bands of a `[bands, H, W]` image.
pub fn select_bands<T: Element>(t: &Tensor<T>, bands: &[usize]) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims("select_bands", t)?;
    if bands.is_empty() {
        return Err(Error::Config("empty band subset".into()));
    }
    let parts = bands
        .iter()
        .map(|&b| {
            if b >= c {
                Err(Error::Config(format!("band {b} out of range for {c} bands")))
            } else {
                t.narrow(0, b, 1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)?.reshape(vec![bands.len(), h, w])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    pub mae: f64,
}

impl SceneMetrics {
    pub const NAMES: [&'static str; 4] = ["psnr", "ssim", "sam", "mae"];

    pub fn values(&self) -> [f64; 4] {
        [self.psnr, self.ssim, self.sam, self.mae]
    }
}

/// All four metrics, optionally on a band subset.
pub fn evaluate<T: Element>(pred: &Tensor<T>, reference: &Tensor<T>, bands: Option<&[usize]>) -> Result<SceneMetrics> {
    let (p, r);
    let (pred, reference) = match bands {
        Some(b) => {
            p = select_bands(pred, b)?;
            r = select_bands(reference, b)?;
            (&p, &r)
        }
        None => (pred, reference),
    };
    Ok(SceneMetrics {
        psnr: psnr(pred, reference)?,
        ssim: ssim(pred, reference)?,
        sam: sam(pred, reference)?,
        mae: mae(pred, reference)?,
    })
}

pub const BIN_COUNT: usize = 5;
pub const BIN_LABELS: [&str; BIN_COUNT] = ["0-20", "20-40", "40-60", "60-80", "80-100"];

/// Bin of a cloud fraction: `[0,20) [20,40) [40,60) [60,80) [80,100]` percent.
pub fn cover_bin(coverage: f64) -> usize {
    ((coverage * 100.0 / 20.0).floor().max(0.0) as usize).min(BIN_COUNT - 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStats {
    pub count: usize,
    /// Per-metric means in [`SceneMetrics::NAMES`] order; NaN when empty.
    pub means: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Per-scene metrics and cloud fraction, in input order.
    pub scenes: Vec<(SceneMetrics, f64)>,
    pub overall: BinStats,
    pub bins: [BinStats; BIN_COUNT],
}

fn stats<'a>(items: impl Iterator<Item = &'a SceneMetrics>) -> BinStats {
    let mut sums = [0.0; 4];
    let mut count = 0;
    for m in items {
        for (s, v) in sums.iter_mut().zip(m.values()) {
            *s += v;
        }
        count += 1;
    }
    BinStats {
        count,
        means: sums.map(|s| if count == 0 { f64::NAN } else { s / count as f64 }),
    }
}

/// Group scenes by cloud fraction (mask mean) and average each metric.
pub fn binned_report(scenes: &[(SceneMetrics, f64)]) -> Result<MetricReport> {
    if scenes.is_empty() {
        return Err(Error::Contract("binned report of zero scenes".into()));
    }
    let bins = std::array::from_fn(|b| stats(scenes.iter().filter(|(_, c)| cover_bin(*c) == b).map(|(m, _)| m)));
    Ok(MetricReport {
        scenes: scenes.to_vec(),
        overall: stats(scenes.iter().map(|(m, _)| m)),
        bins,
    })
}

/// TSV cell: shortest round-trip decimal, `perfect` for the PSNR sentinel.
pub fn tsv_value(v: f64) -> String {
    if v == PSNR_PERFECT {
        "perfect".into()
    } else if v.is_nan() {
        "-".into()
    } else {
        format!("{v}")
    }
}

/// Parse a [`tsv_value`] cell.
pub fn parse_tsv_value(s: &str) -> Option<f64> {
    match s {
        "perfect" => Some(PSNR_PERFECT),
        "-" => Some(f64::NAN),
        _ => s.parse().ok(),
    }
}

fn table_value(v: f64) -> String {
    if v == PSNR_PERFECT {
        "perfect".into()
    } else if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.4}")
    }
}

impl MetricReport {
    /// `metric\tbin\tvalue\tcount` rows, overall first.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tbin\tvalue\tcount\n");
        for (i, name) in SceneMetrics::NAMES.iter().enumerate() {
            let rows = std::iter::once(("all", &self.overall)).chain(BIN_LABELS.iter().copied().zip(&self.bins));
            for (label, b) in rows {
                let _ = writeln!(s, "{name}\t{label}\t{}\t{}", tsv_value(b.means[i]), b.count);
            }
        }
        s
    }

    /// `scene\tcoverage\tpsnr\tssim\tsam\tmae` rows.
    pub fn scenes_tsv(&self) -> String {
        let mut s = String::from("scene\tcoverage\tpsnr\tssim\tsam\tmae\n");
        for (i, (m, c)) in self.scenes.iter().enumerate() {
            let v = m.values().map(tsv_value);
            let _ = writeln!(s, "{i}\t{c}\t{}\t{}\t{}\t{}", v[0], v[1], v[2], v[3]);
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>6} {:>12} {:>12} {:>12} {:>12}",
            "cover%", "count", "PSNR", "SSIM", "SAM", "MAE"
        )?;
        let rows = BIN_LABELS
            .iter()
            .copied()
            .zip(&self.bins)
            .chain(std::iter::once(("all", &self.overall)));
        for (label, b) in rows {
            let v = b.means.map(table_value);
            writeln!(f, "{label:<8} {:>6} {:>12} {:>12} {:>12} {:>12}", b.count, v[0], v[1], v[2], v[3])?;
        }
        Ok(())
    }
}
