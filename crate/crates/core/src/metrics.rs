//! Image-pair metrics: PSNR, pixel-domain VIF, color-histogram correlation and
//! DAB integrated optical density, plus batch reports.

use std::path::Path;

use crate::data::gradient_map;
use crate::error::contract;
use crate::{Error, Image, Result};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(contract(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_rgb(a: &Image) -> Result<()> {
    if a.channels() != 3 {
        return Err(contract(format!("expected a 3-channel image, got {}", a.channels())));
    }
    Ok(())
}

fn unit(v: f32) -> f64 {
    (v as f64 + 1.0) * 0.5
}

/// Peak signal-to-noise ratio in dB on the `[0, 1]` scale.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (unit(x) - unit(y)).powi(2)).sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Row-major `f64` plane.
#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn luminance_255(img: &Image) -> Self {
        let v = img
            .data()
            .chunks_exact(img.channels())
            .map(|p| {
                let l = if p.len() == 3 {
                    0.299 * unit(p[0]) + 0.587 * unit(p[1]) + 0.114 * unit(p[2])
                } else {
                    p.iter().map(|&x| unit(x)).sum::<f64>() / p.len() as f64
                };
                l * 255.0
            })
            .collect();
        Self { h: img.height(), w: img.width(), v }
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// Separable correlation with `k` keeping only fully covered positions.
    fn filter_valid(&self, k: &[f64]) -> Result<Plane> {
        let n = k.len();
        if self.h < n || self.w < n {
            return Err(contract(format!("{}x{} plane is smaller than the {n}-tap VIF window", self.h, self.w)));
        }
        let w2 = self.w - n + 1;
        let mut rows = vec![0.0; self.h * w2];
        for y in 0..self.h {
            for x in 0..w2 {
                rows[y * w2 + x] = (0..n).map(|i| k[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let h2 = self.h - n + 1;
        let mut out = vec![0.0; h2 * w2];
        for y in 0..h2 {
            for x in 0..w2 {
                out[y * w2 + x] = (0..n).map(|i| k[i] * rows[(y + i) * w2 + x]).sum();
            }
        }
        Ok(Plane { h: h2, w: w2, v: out })
    }

    fn decimate(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                v.push(self.v[2 * y * self.w + 2 * x]);
            }
        }
        Plane { h, w, v }
    }
}

/// Normalised 1-D Gaussian; its outer product is the usual 2-D window.
fn gaussian_taps(n: usize, sd: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sd * sd)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Multiscale pixel-domain visual information fidelity of `dist` relative to
/// `reference`, computed on luminance in 0-255 units with noise variance 2.
pub fn vif(reference: &Image, dist: &Image) -> Result<f64> {
    check_same(reference, dist)?;
    const SIGMA_N: f64 = 2.0;
    const EPS: f64 = 1e-10;
    let mut r = Plane::luminance_255(reference);
    let mut d = Plane::luminance_255(dist);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = (1usize << (5 - scale)) + 1;
        let k = gaussian_taps(n, n as f64 / 5.0);
        if scale > 1 {
            r = r.filter_valid(&k)?.decimate();
            d = d.filter_valid(&k)?.decimate();
        }
        let mu1 = r.filter_valid(&k)?;
        let mu2 = d.filter_valid(&k)?;
        let rr = r.zip(&r, |a, b| a * b).filter_valid(&k)?;
        let dd = d.zip(&d, |a, b| a * b).filter_valid(&k)?;
        let rd = r.zip(&d, |a, b| a * b).filter_valid(&k)?;
        for i in 0..mu1.v.len() {
            let (m1, m2) = (mu1.v[i], mu2.v[i]);
            let mut s1 = (rr.v[i] - m1 * m1).max(0.0);
            let s2 = (dd.v[i] - m2 * m2).max(0.0);
            let s12 = rd.v[i] - m1 * m2;
            let mut g = s12 / (s1 + EPS);
            let mut sv = s2 - g * s12;
            if s1 < EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            sv = sv.max(EPS);
            num += (1.0 + g * g * s1 / (sv + SIGMA_N)).log10();
            den += (1.0 + s1 / SIGMA_N).log10();
        }
    }
    if den == 0.0 {
        // A flat reference carries no information to preserve.
        return Ok(if reference == dist { 1.0 } else { 0.0 });
    }
    Ok(num / den)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub const HIST_BINS: usize = 64;

/// Concatenated per-channel normalised histograms on `[0, 1]`.
pub fn color_histogram(img: &Image, bins: usize) -> Vec<f64> {
    let c = img.channels();
    let mut h = vec![0.0; bins * c];
    let n = (img.height() * img.width()) as f64;
    for px in img.data().chunks_exact(c) {
        for (ch, &v) in px.iter().enumerate() {
            let b = ((unit(v).clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            h[ch * bins + b] += 1.0 / n;
        }
    }
    h
}

/// Pearson correlation between 64-bin color histograms.
pub fn hist_corr(a: &Image, b: &Image) -> Result<f64> {
    check_rgb(a)?;
    check_rgb(b)?;
    let (ha, hb) = (color_histogram(a, HIST_BINS), color_histogram(b, HIST_BINS));
    Ok(pearson(&ha, &hb).unwrap_or(if ha == hb { 1.0 } else { 0.0 }))
}

/// Pearson correlation between the Sobel gradient maps of two images.
pub fn gradient_correlation(a: &Image, b: &Image) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(contract("gradient correlation needs equally sized images"));
    }
    let conv = |img: &Image| gradient_map(img).data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (ga, gb) = (conv(a), conv(b));
    Ok(pearson(&ga, &gb).unwrap_or(if ga == gb { 1.0 } else { 0.0 }))
}

/// Hematoxylin and DAB optical-density directions (Ruifrok and Johnston).
pub const HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
pub const DAB: [f64; 3] = [0.268, 0.570, 0.776];

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Rows: hematoxylin, DAB and their normalised cross product.
pub fn stain_matrix() -> [[f64; 3]; 3] {
    let h = normalized(HEMATOXYLIN);
    let d = normalized(DAB);
    let r = normalized([h[1] * d[2] - h[2] * d[1], h[2] * d[0] - h[0] * d[2], h[0] * d[1] - h[1] * d[0]]);
    [h, d, r]
}

fn inverse3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

/// Optical density of an intensity in `[0, 1]`.
pub fn optical_density(i: f64) -> f64 {
    -((i.clamp(0.0, 1.0) * 255.0 + 1.0) / 256.0).log10()
}

/// Per-pixel DAB optical density from color deconvolution.
pub fn dab_density(img: &Image) -> Result<Vec<f64>> {
    check_rgb(img)?;
    let inv = inverse3(stain_matrix());
    Ok(img
        .data()
        .chunks_exact(3)
        .map(|p| {
            let od = [optical_density(unit(p[0])), optical_density(unit(p[1])), optical_density(unit(p[2]))];
            // Concentrations c solve od = c M, i.e. c = od M^-1.
            (0..3).map(|k| od[k] * inv[k][1]).sum()
        })
        .collect())
}

/// Summed DAB density over pixels whose DAB density exceeds `threshold`.
pub fn integrated_od(img: &Image, threshold: f64) -> Result<f64> {
    Ok(dab_density(img)?.into_iter().filter(|&d| d > threshold).sum())
}

/// `IOD(gen) - IOD(gt)`.
pub fn iod_deviation(gen: &Image, gt: &Image, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(contract(format!("od threshold must be positive, got {threshold}")));
    }
    Ok(integrated_od(gen, threshold)? - integrated_od(gt, threshold)?)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub od_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { od_threshold: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairRecord {
    pub name: String,
    pub psnr: f64,
    pub vif: f64,
    pub hist: f64,
    pub iod_dev: f64,
    pub error: String,
}

impl PairRecord {
    /// A pair that could not be scored.
    pub fn failed(name: impl Into<String>, error: impl std::fmt::Display) -> Self {
        let nan = f64::NAN;
        Self { name: name.into(), psnr: nan, vif: nan, hist: nan, iod_dev: nan, error: error.to_string() }
    }

    pub fn ok(&self) -> bool {
        self.error.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub psnr: f64,
    pub vif: f64,
    pub hist: f64,
    pub iod_dev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<PairRecord>,
    pub mean: Summary,
    pub std: Summary,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

impl MetricsReport {
    /// Recomputes the summary from the successful records.
    pub fn from_records(records: Vec<PairRecord>) -> Self {
        let good: Vec<&PairRecord> = records.iter().filter(|r| r.ok()).collect();
        let col = |f: fn(&PairRecord) -> f64| mean_std(&good.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (p, v, h, i) = (col(|r| r.psnr), col(|r| r.vif), col(|r| r.hist), col(|r| r.iod_dev));
        Self {
            records,
            mean: Summary { psnr: p.0, vif: v.0, hist: h.0, iod_dev: i.0 },
            std: Summary { psnr: p.1, vif: v.1, hist: h.1, iod_dev: i.1 },
        }
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.ok()).count()
    }

    /// CSV with columns `name,psnr,vif,hist,iod_dev,error`: one row per pair,
    /// then `#mean` and `#std` rows.
    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        for r in &self.records {
            out.serialize(r).map_err(io)?;
        }
        for (name, s) in [("#mean", self.mean), ("#std", self.std)] {
            out.serialize(PairRecord {
                name: name.into(),
                psnr: s.psnr,
                vif: s.vif,
                hist: s.hist,
                iod_dev: s.iod_dev,
                error: String::new(),
            })
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Parses per-pair rows back, ignoring summary rows, and recomputes the summary.
    pub fn read_csv(r: impl std::io::Read) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut records = Vec::new();
        for row in rd.deserialize::<PairRecord>() {
            let row = row.map_err(|e| Error::Ingestion(format!("bad metrics csv: {e}")))?;
            if !row.name.starts_with('#') {
                records.push(row);
            }
        }
        Ok(Self::from_records(records))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Human-readable summary block.
    pub fn summary_text(&self) -> String {
        format!(
            "pairs {} (failed {})\npsnr    {:.4} +- {:.4}\nvif     {:.4} +- {:.4}\nhist    {:.4} +- {:.4}\niod_dev {:.4} +- {:.4}\n",
            self.records.len(),
            self.failures(),
            self.mean.psnr,
            self.std.psnr,
            self.mean.vif,
            self.std.vif,
            self.mean.hist,
            self.std.hist,
            self.mean.iod_dev,
            self.std.iod_dev
        )
    }
}

fn evaluate_pair(gen: &Image, gt: &Image, cfg: &MetricsConfig) -> Result<(f64, f64, f64, f64)> {
    Ok((psnr(gt, gen)?, vif(gt, gen)?, hist_corr(gen, gt)?, iod_deviation(gen, gt, cfg.od_threshold)?))
}

/// Scores `(name, generated, ground truth)` triples. Pairs that fail are
/// recorded with their error and left out of the summary.
pub fn evaluate_pairs(pairs: &[(String, Image, Image)], cfg: &MetricsConfig) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(contract("no image pairs to evaluate"));
    }
    let records = pairs
        .iter()
        .map(|(name, gen, gt)| match evaluate_pair(gen, gt, cfg) {
            Ok((psnr, vif, hist, iod_dev)) => PairRecord { name: name.clone(), psnr, vif, hist, iod_dev, error: String::new() },
            Err(e) => PairRecord::failed(name.clone(), e),
        })
        .collect();
    Ok(MetricsReport::from_records(records))
}
