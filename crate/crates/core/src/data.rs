//! Source preprocessing, the synthetic histology corpus and tile I/O.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng as _, RngCore};

use crate::error::{config, contract};
use crate::rng::{self, Rng};
use crate::{Error, Image, Result};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luminance(img: &Image) -> Vec<f32> {
    let c = img.channels();
    img.data()
        .chunks_exact(c)
        .map(|p| match c {
            3 => LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2],
            _ => p.iter().sum::<f32>() / c as f32,
        })
        .collect()
}

/// Rec.601 luminance replicated to three channels.
pub fn remove_color(img: &Image) -> Result<Image> {
    if img.channels() != 3 {
        return Err(contract(format!("color removal needs 3 channels, got {}", img.channels())));
    }
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        // Gray pixels pass through untouched so the map is idempotent bitwise.
        if px[0] == px[1] && px[1] == px[2] {
            continue;
        }
        let l = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
        px.fill(l);
    }
    Ok(out)
}

/// Sobel gradient magnitude of the luminance, scaled into `[0, 1]` by the
/// image maximum. Borders replicate the edge pixels.
pub fn gradient_map(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let l = luminance(img);
    let at = |y: isize, x: isize| -> f32 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        l[y * w + x]
    };
    let mut mag = vec![0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().cloned().fold(0f32, f32::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|v| *v /= max);
    }
    Image::new(h, w, 1, mag).expect("gradient map keeps the input size")
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub image_size: usize,
    pub n_train_source: usize,
    pub n_train_target: usize,
    pub n_eval: usize,
    pub nuclei_min: usize,
    pub nuclei_max: usize,
    pub radius_min: f32,
    pub radius_max: f32,
    pub marker_positive_rate: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_train_source: 256,
            n_train_target: 256,
            n_eval: 16,
            nuclei_min: 10,
            nuclei_max: 30,
            radius_min: 3.0,
            radius_max: 8.0,
            marker_positive_rate: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_source == 0 || self.n_train_target == 0 || self.n_eval == 0 {
            return Err(config("every corpus split needs at least one image"));
        }
        if self.image_size < 8 {
            return Err(config(format!("image_size must be >= 8, got {}", self.image_size)));
        }
        if self.nuclei_min > self.nuclei_max {
            return Err(config("nuclei_min exceeds nuclei_max"));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(config("need 0 < radius_min <= radius_max"));
        }
        if !(0.0..=1.0).contains(&self.marker_positive_rate) {
            return Err(config("marker_positive_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Nucleus {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    cos: f32,
    sin: f32,
    positive: bool,
}

impl Nucleus {
    fn contains(&self, y: f32, x: f32) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        u * u + v * v <= 1.0
    }
}

/// Smooth random field on `[0, 1]`: bilinear value noise on a `cell`-pixel lattice.
fn value_noise(size: usize, cell: usize, rng: &mut Rng) -> Vec<f32> {
    let n = size / cell + 2;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random::<f32>()).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f32 / cell as f32, x as f32 / cell as f32);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (smooth(fy - iy as f32), smooth(fx - ix as f32));
            let v = |a: usize, b: usize| lattice[(iy + a) * n + ix + b];
            let top = v(0, 0) * (1.0 - tx) + v(0, 1) * tx;
            let bot = v(1, 0) * (1.0 - tx) + v(1, 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Tissue layout shared by every rendering of one seed.
#[derive(Debug, Clone)]
pub struct StructureField {
    size: usize,
    nuclei: Vec<Nucleus>,
    tissue: Vec<f32>,
    texture: Vec<f32>,
    chromatin: Vec<f32>,
}

impl StructureField {
    pub fn generate(spec: &SyntheticCorpusSpec, seed: u64) -> Self {
        let mut rng = rng::stream(seed, 0);
        let size = spec.image_size;
        let s = size as f32;
        let count = rng.random_range(spec.nuclei_min..=spec.nuclei_max);
        let nuclei = (0..count)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f32::consts::PI);
                Nucleus {
                    cy: rng.random_range(0.0..s),
                    cx: rng.random_range(0.0..s),
                    ry: rng.random_range(spec.radius_min..=spec.radius_max),
                    rx: rng.random_range(spec.radius_min..=spec.radius_max),
                    cos: angle.cos(),
                    sin: angle.sin(),
                    positive: rng.random_bool(spec.marker_positive_rate),
                }
            })
            .collect();
        let tissue = value_noise(size, 16, &mut rng);
        let texture = value_noise(size, 4, &mut rng);
        let chromatin = value_noise(size, 2, &mut rng);
        Self { size, nuclei, tissue, texture, chromatin }
    }

    /// Index of the topmost nucleus covering the pixel.
    fn nucleus_at(&self, y: usize, x: usize) -> Option<&Nucleus> {
        let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
        self.nuclei.iter().rev().find(|n| n.contains(fy, fx))
    }

    pub fn marker_mask(&self) -> Image {
        Image::from_fn(self.size, self.size, 1, |y, x, _| {
            self.nucleus_at(y, x).is_some_and(|n| n.positive) as u8 as f32
        })
    }

    pub fn marker_count(&self) -> usize {
        self.nuclei.iter().filter(|n| n.positive).count()
    }

    pub fn render(&self, palette: &Palette) -> Image {
        let px = |y: usize, x: usize| -> [f32; 3] {
            let i = y * self.size + x;
            if let Some(n) = self.nucleus_at(y, x) {
                let base = if n.positive { palette.positive } else { palette.nucleus };
                let shade = 0.85 + 0.3 * self.chromatin[i];
                return base.map(|c| c * shade);
            }
            let t = self.tissue[i];
            let weight = ((t - 0.35) / 0.15).clamp(0.0, 1.0);
            let shade = 0.9 + 0.2 * self.texture[i];
            let mut out = [0f32; 3];
            for c in 0..3 {
                let cyto = palette.cytoplasm[c] * shade;
                out[c] = weight * cyto + (1.0 - weight) * palette.background[c];
            }
            out
        };
        let unit = Image::from_fn(self.size, self.size, 3, |y, x, c| px(y, x)[c].clamp(0.0, 1.0));
        unit.from_unit()
    }
}

/// Stain colors in `[0, 1]` RGB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Palette {
    pub nucleus: [f32; 3],
    pub positive: [f32; 3],
    pub cytoplasm: [f32; 3],
    pub background: [f32; 3],
}

impl Palette {
    /// Hematoxylin-purple nuclei over eosin-pink cytoplasm. No marker channel.
    pub const HE: Palette = Palette {
        nucleus: [0.36, 0.20, 0.52],
        positive: [0.36, 0.20, 0.52],
        cytoplasm: [0.92, 0.58, 0.74],
        background: [0.96, 0.95, 0.96],
    };

    /// Blue counterstain with brown marker-positive nuclei.
    pub const IHC: Palette = Palette {
        nucleus: [0.38, 0.48, 0.76],
        positive: [0.55, 0.33, 0.14],
        cytoplasm: [0.86, 0.86, 0.90],
        background: [0.97, 0.97, 0.97],
    };
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub image: Image,
    pub seed: u64,
    pub marker_count: usize,
}

#[derive(Debug, Clone)]
pub struct EvalPair {
    pub source: Image,
    pub target: Image,
    pub mask: Image,
    pub seed: u64,
    pub marker_count: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train_source: Vec<SynthImage>,
    pub train_target: Vec<SynthImage>,
    pub eval: Vec<EvalPair>,
}

/// Structure seeds for one split; splits use disjoint rng streams.
fn split_seeds(base: u64, split: u64, n: usize, used: &mut std::collections::HashSet<u64>) -> Vec<u64> {
    let mut r = rng::stream(base, 1000 + split);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = r.next_u64();
        if used.insert(s) {
            out.push(s);
        }
    }
    out
}

pub fn gen_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut used = std::collections::HashSet::new();
    let render = |seed: u64, palette: &Palette| {
        let field = StructureField::generate(spec, seed);
        SynthImage { image: field.render(palette), seed, marker_count: field.marker_count() }
    };
    let train_source = split_seeds(spec.seed, 0, spec.n_train_source, &mut used)
        .into_iter()
        .map(|s| render(s, &Palette::HE))
        .collect();
    let train_target = split_seeds(spec.seed, 1, spec.n_train_target, &mut used)
        .into_iter()
        .map(|s| render(s, &Palette::IHC))
        .collect();
    let eval = split_seeds(spec.seed, 2, spec.n_eval, &mut used)
        .into_iter()
        .map(|seed| {
            let field = StructureField::generate(spec, seed);
            EvalPair {
                source: field.render(&Palette::HE),
                target: field.render(&Palette::IHC),
                mask: field.marker_mask(),
                seed,
                marker_count: field.marker_count(),
            }
        })
        .collect();
    Ok(SyntheticCorpus { train_source, train_target, eval })
}

/// Directory names under a corpus root.
pub mod layout {
    pub const TRAIN_SOURCE: &str = "train_source";
    pub const TRAIN_TARGET: &str = "train_target";
    pub const EVAL_SOURCE: &str = "eval/source";
    pub const EVAL_TARGET: &str = "eval/target";
    pub const EVAL_MASKS: &str = "eval/masks";
    pub const MANIFEST: &str = "manifest.tsv";
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub split: String,
    pub filename: String,
    pub seed: u64,
    pub marker_count: usize,
}

pub fn tile_name(i: usize) -> String {
    format!("{i:04}.png")
}

/// Writes the corpus as PNG tiles plus a tab-separated manifest and returns
/// the manifest records.
pub fn write_corpus(corpus: &SyntheticCorpus, root: &Path) -> Result<Vec<ManifestRecord>> {
    use layout::*;
    for d in [TRAIN_SOURCE, TRAIN_TARGET, EVAL_SOURCE, EVAL_TARGET, EVAL_MASKS] {
        fs::create_dir_all(root.join(d))?;
    }
    let mut records = Vec::new();
    for (split, dir, items) in [
        ("train_source", TRAIN_SOURCE, &corpus.train_source),
        ("train_target", TRAIN_TARGET, &corpus.train_target),
    ] {
        for (i, s) in items.iter().enumerate() {
            let name = tile_name(i);
            save_image(&s.image, &root.join(dir).join(&name))?;
            records.push(ManifestRecord { split: split.into(), filename: name, seed: s.seed, marker_count: s.marker_count });
        }
    }
    for (i, p) in corpus.eval.iter().enumerate() {
        let name = tile_name(i);
        save_image(&p.source, &root.join(EVAL_SOURCE).join(&name))?;
        save_image(&p.target, &root.join(EVAL_TARGET).join(&name))?;
        save_mask(&p.mask, &root.join(EVAL_MASKS).join(&name))?;
        records.push(ManifestRecord { split: "eval".into(), filename: name, seed: p.seed, marker_count: p.marker_count });
    }
    let mut f = fs::File::create(root.join(MANIFEST))?;
    writeln!(f, "split\tfilename\tseed\tmarker_count")?;
    for r in &records {
        writeln!(f, "{}\t{}\t{}\t{}", r.split, r.filename, r.seed, r.marker_count)?;
    }
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Ingestion(format!("{}: malformed manifest line {}", path.display(), n + 1));
        if cols.len() != 4 {
            return Err(bad());
        }
        out.push(ManifestRecord {
            split: cols[0].into(),
            filename: cols[1].into(),
            seed: cols[2].parse().map_err(|_| bad())?,
            marker_count: cols[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Writes a model-space image as 8-bit PNG (RGB, or gray for one channel).
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.to_unit().data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    match img.channels() {
        3 => image::RgbImage::from_raw(w, h, bytes).expect("buffer sized from image").save(path)?,
        1 => image::GrayImage::from_raw(w, h, bytes).expect("buffer sized from image").save(path)?,
        c => return Err(contract(format!("cannot save a {c}-channel image"))),
    }
    Ok(())
}

/// Binary masks are stored as 0/255 gray PNGs and loaded back as 0/1.
pub fn save_mask(mask: &Image, path: &Path) -> Result<()> {
    save_image(&mask.map(|v| if v > 0.5 { 1.0 } else { -1.0 }), path)
}

pub fn load_mask(path: &Path) -> Result<Image> {
    let g = image::open(path)?.to_luma8();
    let data = g.as_raw().iter().map(|&v| (v >= 128) as u8 as f32).collect();
    Image::new(g.height() as usize, g.width() as usize, 1, data)
}

/// Decodes an 8-bit RGB file into model space at its native size.
pub fn load_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let data = rgb.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
    Image::new(rgb.height() as usize, rgb.width() as usize, 3, data)
}

/// Overlap weights of each output cell with the input cells when `n_in`
/// samples are averaged onto `n_out`.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)) / scale;
                if overlap > 0.0 {
                    w.push((i, overlap as f32));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Area-averaging resize to `height x width`.
pub fn resize_area(img: &Image, height: usize, width: usize) -> Image {
    if img.height() == height && img.width() == width {
        return img.clone();
    }
    let c = img.channels();
    let wy = area_weights(img.height(), height);
    let wx = area_weights(img.width(), width);
    Image::from_fn(height, width, c, |y, x, ch| {
        let mut acc = 0f32;
        for &(iy, a) in &wy[y] {
            for &(ix, b) in &wx[x] {
                acc += a * b * img.get(iy, ix, ch);
            }
        }
        acc
    })
}

#[derive(Debug, Clone)]
pub struct LoadedTiles {
    pub images: Vec<Image>,
    pub names: Vec<String>,
    /// Files that could not be decoded, with the reason.
    pub skipped: Vec<(String, String)>,
}

pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every decodable raster in `dir` (sorted by name), resized to a
/// square `target_size`. Undecodable files are skipped with a warning.
pub fn load_tiles(dir: &Path, target_size: usize) -> Result<LoadedTiles> {
    let mut out = LoadedTiles { images: Vec::new(), names: Vec::new(), skipped: Vec::new() };
    for path in list_files(dir)? {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match load_image(&path) {
            Ok(img) => {
                out.images.push(resize_area(&img, target_size, target_size));
                out.names.push(name);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                out.skipped.push((name, e.to_string()));
            }
        }
    }
    if out.images.is_empty() {
        return Err(Error::Ingestion(format!("no readable images in {}", dir.display())));
    }
    Ok(out)
}
