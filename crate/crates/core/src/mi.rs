//! Patch-level mutual information between an image and its structure map.
//!
//! A critic `G(g, y)` scores (gradient-patch, image-patch) pairs. Trained to
//! maximise the Donsker–Varadhan bound
//!
//! ```text
//! I >= mean_l G(g_l, y_l) - log mean_l exp G(g_l, y_perm(l))
//! ```
//!
//! it measures how much structure an image shares with a gradient map. The
//! entropy proxy and the unique-information term `U = H - I` live here too so
//! that the guidance energy only composes differentiable pieces.

use std::path::Path;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng as _;

use crate::data::gradient_map;
use crate::error::{config, contract};
use crate::nn::{self, Checkpoint, Conv2d, Linear, Params};
use crate::rng::{self, Rng};
use crate::sde::{perturb_with, NoiseSchedule};
use crate::{Error, Image, Result};

/// Anything that scores a batch of `(g, y)` patch pairs, returning shape `(L,)`.
pub trait Critic {
    fn score_pairs(&self, g: &Tensor, y: &Tensor) -> Result<Tensor>;

    /// Joint and marginal scores of a batch.
    fn score_batch(&self, batch: &PatchPairBatch) -> Result<(Tensor, Tensor)> {
        Ok((self.score_pairs(&batch.g, &batch.y)?, self.score_pairs(&batch.g, &batch.marginal_y()?)?))
    }

    fn is_trained(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticArch {
    pub g_channels: usize,
    pub y_channels: usize,
    pub patch_size: usize,
    pub widths: [usize; 2],
    pub head_hidden: usize,
}

impl Default for CriticArch {
    fn default() -> Self {
        Self { g_channels: 1, y_channels: 3, patch_size: 8, widths: [16, 32], head_hidden: 64 }
    }
}

impl CriticArch {
    pub fn validate(&self) -> Result<()> {
        if [self.g_channels, self.y_channels, self.patch_size, self.widths[0], self.widths[1], self.head_hidden]
            .contains(&0)
        {
            return Err(config(format!("critic architecture sizes must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Trunk {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl Trunk {
    fn detach(&self) -> Self {
        Self { conv1: self.conv1.detach(), conv2: self.conv2.detach() }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = nn::silu(&self.conv1.forward(x)?)?;
        let h = nn::silu(&self.conv2.forward(&h)?)?;
        Ok(h.mean(D::Minus1)?.mean(D::Minus1)?)
    }
}

/// Two convolutional trunks (one per input), concatenated features and a
/// two-layer scalar head.
#[derive(Debug, Clone)]
pub struct CriticNet {
    arch: CriticArch,
    params: Params,
    g_trunk: Trunk,
    y_trunk: Trunk,
    head1: Linear,
    head2: Linear,
    iterations: usize,
}

impl CriticNet {
    pub fn init(arch: CriticArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let [w1, w2] = arch.widths;
        let mut p = Params::new();
        for (name, c) in [("g", arch.g_channels), ("y", arch.y_channels)] {
            Conv2d::new(&mut p, &format!("{name}.conv1"), c, w1, 3, rng)?;
            Conv2d::new(&mut p, &format!("{name}.conv2"), w1, w2, 3, rng)?;
        }
        Linear::new(&mut p, "head1", 2 * w2, arch.head_hidden, rng)?;
        Linear::new(&mut p, "head2", arch.head_hidden, 1, rng)?;
        Self::from_params(arch, p, 0)
    }

    fn from_params(arch: CriticArch, params: Params, iterations: usize) -> Result<Self> {
        arch.validate()?;
        let trunk = |n: &str| -> Result<Trunk> {
            Ok(Trunk {
                conv1: Conv2d::load(&params, &format!("{n}.conv1"))?,
                conv2: Conv2d::load(&params, &format!("{n}.conv2"))?,
            })
        };
        Ok(Self {
            arch,
            g_trunk: trunk("g")?,
            y_trunk: trunk("y")?,
            head1: Linear::load(&params, "head1")?,
            head2: Linear::load(&params, "head2")?,
            params,
            iterations,
        })
    }

    pub fn arch(&self) -> CriticArch {
        self.arch
    }

    pub fn patch_size(&self) -> usize {
        self.arch.patch_size
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Optimisation steps this critic has seen; zero means untrained.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }

    pub fn deep_copy(&self, dtype: DType) -> Result<Self> {
        Self::from_params(self.arch, self.params.deep_copy(dtype)?, self.iterations)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let a = &self.arch;
        let mut ck = Checkpoint { params: self.params.clone(), ..Default::default() };
        for (k, v) in [
            ("g_channels", a.g_channels),
            ("y_channels", a.y_channels),
            ("patch_size", a.patch_size),
            ("width1", a.widths[0]),
            ("width2", a.widths[1]),
            ("head_hidden", a.head_hidden),
            ("iteration", self.iterations),
        ] {
            ck.meta.insert(k.into(), v.to_string());
        }
        ck.meta.insert("kind".into(), "critic".into());
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").map(String::as_str) != Some("critic") {
            return Err(Error::Checkpoint("not a critic checkpoint".into()));
        }
        let arch = CriticArch {
            g_channels: ck.meta_value("g_channels")?,
            y_channels: ck.meta_value("y_channels")?,
            patch_size: ck.meta_value("patch_size")?,
            widths: [ck.meta_value("width1")?, ck.meta_value("width2")?],
            head_hidden: ck.meta_value("head_hidden")?,
        };
        let iterations = ck.meta_value("iteration")?;
        Self::from_params(arch, ck.params, iterations)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

impl CriticNet {
    fn head(&self, fg: &Tensor, fy: &Tensor) -> Result<Tensor> {
        let h = nn::silu(&self.head1.forward(&Tensor::cat(&[fg, fy], 1)?)?)?;
        Ok(self.head2.forward(&h)?.squeeze(1)?)
    }

    /// Copy whose layers are constants, so gradients only flow to the inputs.
    pub fn frozen(&self) -> Self {
        Self {
            g_trunk: self.g_trunk.detach(),
            y_trunk: self.y_trunk.detach(),
            head1: self.head1.detach(),
            head2: self.head2.detach(),
            ..self.clone()
        }
    }
}

impl Critic for CriticNet {
    fn score_pairs(&self, g: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.head(&self.g_trunk.forward(g)?, &self.y_trunk.forward(y)?)
    }

    /// Each trunk runs once; the marginal side permutes the image features.
    fn score_batch(&self, batch: &PatchPairBatch) -> Result<(Tensor, Tensor)> {
        let l = batch.len();
        let fg = self.g_trunk.forward(&batch.g)?;
        let fy = self.y_trunk.forward(&batch.y)?;
        let fy_marginal = fy.index_select(&batch.perm_index()?, 0)?;
        let scores = self.head(&Tensor::cat(&[&fg, &fg], 0)?, &Tensor::cat(&[&fy, &fy_marginal], 0)?)?;
        Ok((scores.narrow(0, 0, l)?, scores.narrow(0, l, l)?))
    }

    fn is_trained(&self) -> bool {
        self.iterations > 0
    }
}

/// `L` spatially aligned patch pairs plus the shuffle that forms the marginal
/// pairs `(g_l, y_perm(l))`.
#[derive(Debug, Clone)]
pub struct PatchPairBatch {
    /// `L x Cg x p x p`.
    pub g: Tensor,
    /// `L x Cy x p x p`.
    pub y: Tensor,
    /// Derangement of `0..L`.
    pub perm: Vec<usize>,
    /// Top-left corners `(row, col)`.
    pub locations: Vec<(usize, usize)>,
}

impl PatchPairBatch {
    pub fn new(g: Tensor, y: Tensor, perm: Vec<usize>) -> Result<Self> {
        let l = g.dim(0)?;
        if l < 2 {
            return Err(contract(format!("need at least 2 patch pairs, got {l}")));
        }
        if y.dim(0)? != l || perm.len() != l {
            return Err(contract("joint and marginal sides must have equal length"));
        }
        if perm.iter().enumerate().any(|(i, &j)| i == j || j >= l) {
            return Err(contract("marginal shuffle must be a derangement"));
        }
        Ok(Self { g, y, perm, locations: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    fn perm_index(&self) -> Result<Tensor> {
        let idx: Vec<u32> = self.perm.iter().map(|&i| i as u32).collect();
        Ok(Tensor::from_vec(idx, self.perm.len(), &Device::Cpu)?)
    }

    pub fn marginal_y(&self) -> Result<Tensor> {
        Ok(self.y.index_select(&self.perm_index()?, 0)?)
    }
}

fn spatial(t: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = t
        .dims4()
        .map_err(|_| contract(format!("expected a 1 x C x H x W tensor, got {:?}", t.shape())))?;
    if b != 1 {
        return Err(contract(format!("expected a single image, got batch of {b}")));
    }
    Ok((c, h, w))
}

/// Gathers `p x p` windows at `locations` into an `L x C x p x p` tensor.
pub fn gather_patches(img: &Tensor, locations: &[(usize, usize)], p: usize) -> Result<Tensor> {
    let (c, h, w) = spatial(img)?;
    let mut idx = Vec::with_capacity(locations.len() * c * p * p);
    for &(r, col) in locations {
        if r + p > h || col + p > w {
            return Err(contract(format!("patch at ({r}, {col}) leaves the {h}x{w} image")));
        }
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    idx.push((ch * h * w + (r + dy) * w + col + dx) as u32);
                }
            }
        }
    }
    let n = idx.len();
    let idx = Tensor::from_vec(idx, n, &Device::Cpu)?;
    Ok(img.flatten_all()?.index_select(&idx, 0)?.reshape((locations.len(), c, p, p))?)
}

/// Samples `count` distinct patch locations and builds joint and shuffled pairs.
pub fn sample_patch_pairs(
    y: &Tensor,
    g: &Tensor,
    count: usize,
    patch_size: usize,
    rng: &mut Rng,
) -> Result<PatchPairBatch> {
    let (_, h, w) = spatial(y)?;
    let (_, gh, gw) = spatial(g)?;
    if (h, w) != (gh, gw) {
        return Err(contract(format!("image is {h}x{w} but gradient map is {gh}x{gw}")));
    }
    if patch_size == 0 || patch_size > h || patch_size > w {
        return Err(contract(format!("patch size {patch_size} does not fit a {h}x{w} image")));
    }
    let cols = w - patch_size + 1;
    let available = (h - patch_size + 1) * cols;
    if count > available {
        return Err(contract(format!("{count} distinct patches requested, only {available} locations")));
    }
    if count < 2 {
        return Err(contract(format!("need at least 2 patch pairs, got {count}")));
    }
    let mut picks = rand::seq::index::sample(rng, available, count).into_vec();
    picks.sort_unstable();
    let locations: Vec<(usize, usize)> = picks.iter().map(|&i| (i / cols, i % cols)).collect();
    let perm = rng::cyclic_shuffle(rng, count);
    let mut batch = PatchPairBatch::new(
        gather_patches(g, &locations, patch_size)?,
        gather_patches(y, &locations, patch_size)?,
        perm,
    )?;
    batch.locations = locations;
    Ok(batch)
}

/// Donsker–Varadhan bound from precomputed joint and marginal critic scores.
pub fn dv_from_scores(joint: &Tensor, marginal: &Tensor) -> Result<Tensor> {
    let l = marginal.dim(0)?;
    if l < 2 || joint.dim(0)? != l {
        return Err(contract(format!("need at least 2 equally many joint/marginal scores, got {l}")));
    }
    let m = marginal.max_all()?.detach();
    let lse = (marginal.broadcast_sub(&m)?.exp()?.mean_all()?.log()? + m)?;
    Ok((joint.mean_all()? - lse)?)
}

pub fn dv_bound<C: Critic + ?Sized>(critic: &C, batch: &PatchPairBatch) -> Result<Tensor> {
    if batch.len() < 2 {
        return Err(contract("dv bound needs at least 2 pairs"));
    }
    let (joint, marginal) = critic.score_batch(batch)?;
    dv_from_scores(&joint, &marginal)
}

/// Maximises the DV bound on batches produced by `sample`; each iteration
/// averages the bound over the batches returned. Returns the bound trace.
pub fn fit_critic(
    critic: &mut CriticNet,
    iterations: usize,
    lr: f64,
    rng: &mut Rng,
    mut sample: impl FnMut(&mut Rng) -> Result<Vec<PatchPairBatch>>,
) -> Result<Vec<f64>> {
    let mut opt = AdamW::new(critic.params.vars(), ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() })?;
    let mut trace = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let batches = sample(rng)?;
        if batches.is_empty() {
            return Err(contract("critic sampler returned no batches"));
        }
        let bounds = batches.iter().map(|b| dv_bound(&*critic, b)).collect::<Result<Vec<_>>>()?;
        let mean = (Tensor::stack(&bounds, 0)?.mean_all()?).to_dtype(DType::F64)?;
        let value = mean.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("DV bound diverged at critic iteration {it}")));
        }
        opt.backward_step(&mean.neg()?)?;
        critic.iterations += 1;
        trace.push(value);
        if (it + 1) % 100 == 0 {
            log::info!("critic iteration {} bound {:.4}", critic.iterations, crate::score::smoothed_tail(&trace, 100));
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticTrainConfig {
    pub arch: CriticArch,
    pub iterations: usize,
    /// Patch pairs per image (`L`).
    pub pairs: usize,
    pub images_per_iteration: usize,
    pub lr: f64,
    /// Probability of training on a noised copy of the image.
    pub augment_prob: f64,
    /// Noised copies use a timestep drawn uniformly from `[0, augment_max_t)`.
    pub augment_max_t: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CriticTrainConfig {
    fn default() -> Self {
        Self {
            arch: CriticArch::default(),
            iterations: 1500,
            pairs: 64,
            images_per_iteration: 4,
            lr: 5e-4,
            augment_prob: 0.5,
            augment_max_t: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedCritic {
    pub critic: CriticNet,
    pub bounds: Vec<f64>,
}

/// Draws one (image, gradient map) training pair, optionally noised. The map
/// is taken from an independently noised copy, mirroring guidance time where
/// it comes from a perturbed source.
fn training_pair(img: &Image, cfg: &CriticTrainConfig, sched: &NoiseSchedule, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let clean = img.to_tensor(DType::F32)?;
    if cfg.augment_prob > 0.0 && rng.random_bool(cfg.augment_prob.min(1.0)) {
        let t = rng.random_range(0..cfg.augment_max_t.clamp(1, sched.steps()));
        let a = sched.alpha_bar(t);
        let e1 = rng::normal_tensor(rng, clean.shape(), DType::F32)?;
        let e2 = rng::normal_tensor(rng, clean.shape(), DType::F32)?;
        let y = perturb_with(&clean, a, &e1)?;
        let g_src = Image::from_tensor(&perturb_with(&clean, a, &e2)?)?;
        Ok((y, gradient_map(&g_src).to_tensor(DType::F32)?))
    } else {
        Ok((clean, gradient_map(img).to_tensor(DType::F32)?))
    }
}

/// Trains a critic on target-domain images and their own gradient maps.
pub fn train_critic(corpus: &[Image], cfg: &CriticTrainConfig, sched: &NoiseSchedule) -> Result<TrainedCritic> {
    if corpus.is_empty() {
        return Err(Error::Ingestion("empty critic corpus".into()));
    }
    let first = &corpus[0];
    if corpus.iter().any(|i| !i.same_shape(first)) {
        return Err(Error::Ingestion("mixed image shapes in critic corpus".into()));
    }
    if first.channels() != cfg.arch.y_channels {
        return Err(config(format!(
            "critic expects {}-channel images, corpus has {}",
            cfg.arch.y_channels,
            first.channels()
        )));
    }
    if cfg.images_per_iteration == 0 {
        return Err(config("images_per_iteration must be >= 1"));
    }
    let mut critic = CriticNet::init(cfg.arch, &mut rng::stream(cfg.seed, 0))?;
    let mut rng = rng::stream(cfg.seed, 1);
    let bounds = fit_critic(&mut critic, cfg.iterations, cfg.lr, &mut rng, |rng| {
        (0..cfg.images_per_iteration)
            .map(|_| {
                let img = &corpus[rng.random_range(0..corpus.len())];
                let (y, g) = training_pair(img, cfg, sched, rng)?;
                sample_patch_pairs(&y, &g, cfg.pairs, cfg.arch.patch_size, rng)
            })
            .collect()
    })?;
    Ok(TrainedCritic { critic, bounds })
}

/// Shannon entropy (nats) of a kernel-smoothed intensity histogram, averaged
/// over channels.
///
/// Each pixel spreads unit mass over `bins` centres on `[-1, 1]` with Gaussian
/// weights of width `bandwidth`; values outside the range fall into the edge
/// bins. The result lies in `[0, ln bins]` and is differentiable in `y`.
pub fn entropy_proxy(y: &Tensor, bins: usize, bandwidth: f64) -> Result<Tensor> {
    if bins < 2 {
        return Err(config(format!("entropy needs at least 2 bins, got {bins}")));
    }
    if !(bandwidth > 0.0) {
        return Err(config(format!("entropy bandwidth must be positive, got {bandwidth}")));
    }
    let y = match y.rank() {
        4 => y.squeeze(0)?,
        3 => y.clone(),
        _ => return Err(contract(format!("entropy expects a C x H x W image, got {:?}", y.shape()))),
    };
    let c = y.dim(0)?;
    let x = y.reshape((c, ()))?.contiguous()?;
    let p = x.apply_op1(SoftHistogram { bins, bandwidth })?;
    let h = (p.clone() * (p + 1e-12)?.log()?)?.sum(D::Minus1)?.neg()?;
    Ok(h.mean_all()?)
}

/// Per-row soft histogram: `C x N` values to `C x bins` probabilities.
struct SoftHistogram {
    bins: usize,
    bandwidth: f64,
}

/// Gradient of [`SoftHistogram`] with respect to its input, given the
/// upstream gradient on the histogram.
struct SoftHistogramGrad {
    bins: usize,
    bandwidth: f64,
}

impl SoftHistogram {
    fn centers(bins: usize) -> Vec<f64> {
        (0..bins).map(|b| -1.0 + (2 * b + 1) as f64 / bins as f64).collect()
    }

    /// Normalised kernel weights of one value over the centres.
    fn weights(v: f64, centers: &[f64], bandwidth: f64, out: &mut [f64]) {
        let k = -0.5 / (bandwidth * bandwidth);
        let mut m = f64::NEG_INFINITY;
        for (o, c) in out.iter_mut().zip(centers) {
            *o = k * (v - c) * (v - c);
            m = m.max(*o);
        }
        let mut z = 0.0;
        for o in out.iter_mut() {
            *o = (*o - m).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }

    fn run(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let n = x.len() / rows;
        let centers = Self::centers(self.bins);
        let mut w = vec![0.0; self.bins];
        let mut out = vec![0.0; rows * self.bins];
        for r in 0..rows {
            let hist = &mut out[r * self.bins..(r + 1) * self.bins];
            for &v in &x[r * n..(r + 1) * n] {
                Self::weights(v, &centers, self.bandwidth, &mut w);
                for (h, wb) in hist.iter_mut().zip(&w) {
                    *h += wb / n as f64;
                }
            }
        }
        out
    }
}

impl SoftHistogramGrad {
    fn run(&self, x: &[f64], grad: &[f64], rows: usize) -> Vec<f64> {
        let n = x.len() / rows;
        let centers = SoftHistogram::centers(self.bins);
        let inv_h2 = 1.0 / (self.bandwidth * self.bandwidth);
        let mut w = vec![0.0; self.bins];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let g = &grad[r * self.bins..(r + 1) * self.bins];
            for i in r * n..(r + 1) * n {
                let v = x[i];
                SoftHistogram::weights(v, &centers, self.bandwidth, &mut w);
                let (mut gw, mut gwd, mut wd) = (0.0, 0.0, 0.0);
                for b in 0..self.bins {
                    let dl = -(v - centers[b]) * inv_h2;
                    gw += g[b] * w[b];
                    gwd += g[b] * w[b] * dl;
                    wd += w[b] * dl;
                }
                out[i] = (gwd - gw * wd) / n as f64;
            }
        }
        out
    }
}

fn storage_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let Some((start, end)) = layout.contiguous_offsets() else {
        candle_core::bail!("soft histogram expects contiguous input");
    };
    Ok(match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => candle_core::bail!("soft histogram supports f32 and f64 only"),
    })
}

fn storage_like(like: &CpuStorage, v: Vec<f64>) -> CpuStorage {
    match like {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

impl CustomOp1 for SoftHistogram {
    fn name(&self) -> &'static str {
        "soft-histogram"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let rows = layout.dims()[0];
        let out = self.run(&storage_f64(storage, layout)?, rows);
        Ok((storage_like(storage, out), Shape::from((rows, self.bins))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = SoftHistogramGrad { bins: self.bins, bandwidth: self.bandwidth };
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &op)?))
    }
}

impl CustomOp2 for SoftHistogramGrad {
    fn name(&self) -> &'static str {
        "soft-histogram-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let rows = l1.dims()[0];
        let out = self.run(&storage_f64(s1, l1)?, &storage_f64(s2, l2)?, rows);
        Ok((storage_like(s1, out), l1.shape().clone()))
    }
}

/// DV estimate of the information `y` shares with the structure map `g_x`.
pub fn mutual_info<C: Critic + ?Sized>(
    critic: &C,
    g_x: &Tensor,
    y: &Tensor,
    pairs: usize,
    patch_size: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let batch = sample_patch_pairs(y, g_x, pairs, patch_size, rng)?;
    dv_bound(critic, &batch)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfoConfig {
    pub pairs: usize,
    pub patch_size: usize,
    pub entropy_bins: usize,
    pub entropy_bandwidth: f64,
}

impl Default for InfoConfig {
    fn default() -> Self {
        Self { pairs: 64, patch_size: 8, entropy_bins: 32, entropy_bandwidth: 0.05 }
    }
}

/// `unique = entropy - mutual`, each a differentiable scalar in `y`.
#[derive(Debug, Clone)]
pub struct InfoTerms {
    pub unique: Tensor,
    pub mutual: Tensor,
    pub entropy: Tensor,
}

/// Splits the entropy of `y` into what it shares with the structure of `x_t`
/// and what is unique to it.
pub fn unique_info<C: Critic + ?Sized>(
    critic: &C,
    x_t: &Image,
    y: &Tensor,
    cfg: &InfoConfig,
    rng: &mut Rng,
) -> Result<InfoTerms> {
    let g = gradient_map(x_t).to_tensor(y.dtype())?;
    let mutual = mutual_info(critic, &g, y, cfg.pairs, cfg.patch_size, rng)?;
    let entropy = entropy_proxy(y, cfg.entropy_bins, cfg.entropy_bandwidth)?;
    let unique = (&entropy - &mutual)?;
    Ok(InfoTerms { unique, mutual, entropy })
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ConstCritic(f32);

    impl Critic for ConstCritic {
        fn score_pairs(&self, g: &Tensor, _y: &Tensor) -> Result<Tensor> {
            Ok(Tensor::full(self.0, g.dim(0)?, &Device::Cpu)?)
        }
    }

    fn noise_image(seed: u64, c: usize, side: usize) -> Tensor {
        rng::normal_tensor(&mut rng::stream(seed, 0), (1, c, side, side), DType::F32).unwrap()
    }

    #[test]
    fn constant_critic_gives_zero_bound() {
        let y = noise_image(1, 3, 16);
        let g = noise_image(2, 1, 16);
        let batch = sample_patch_pairs(&y, &g, 10, 4, &mut rng::stream(3, 0)).unwrap();
        for c in [-3.0f32, 0.0, 2.5] {
            assert!(scalar(&dv_bound(&ConstCritic(c), &batch).unwrap()).unwrap().abs() < 1e-6);
        }
    }

    #[test]
    fn plus_minus_one_scores_give_two() {
        let joint = Tensor::new(&[1.0f64, 1.0, 1.0], &Device::Cpu).unwrap();
        let marg = Tensor::new(&[-1.0f64, -1.0, -1.0], &Device::Cpu).unwrap();
        assert!((scalar(&dv_from_scores(&joint, &marg).unwrap()).unwrap() - 2.0).abs() < 1e-12);
        let one = Tensor::new(&[1.0f64], &Device::Cpu).unwrap();
        assert!(dv_from_scores(&one, &one).is_err());
    }

    #[test]
    fn two_pairs_use_the_transposition() {
        let y = noise_image(1, 3, 8);
        let g = noise_image(2, 1, 8);
        let b = sample_patch_pairs(&y, &g, 2, 4, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(b.perm, vec![1, 0]);
    }

    #[test]
    fn patch_sampling_is_deterministic_and_in_bounds() {
        let y = noise_image(1, 3, 64);
        let g = noise_image(2, 1, 64);
        let a = sample_patch_pairs(&y, &g, 64, 8, &mut rng::stream(5, 0)).unwrap();
        let b = sample_patch_pairs(&y, &g, 64, 8, &mut rng::stream(5, 0)).unwrap();
        assert_eq!(a.locations, b.locations);
        assert!(a.locations.iter().all(|&(r, c)| r + 8 <= 64 && c + 8 <= 64));
        let mut distinct = a.locations.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 64);
        assert_eq!(a.y.dims(), &[64, 3, 8, 8]);
        assert_eq!(a.g.dims(), &[64, 1, 8, 8]);
    }

    #[test]
    fn gathered_patches_are_aligned() {
        let img = Image::from_fn(6, 6, 1, |y, x, _| (y * 6 + x) as f32);
        let t = img.to_tensor(DType::F32).unwrap();
        let p = gather_patches(&t, &[(1, 2)], 2).unwrap();
        let v: Vec<f32> = p.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![8.0, 9.0, 14.0, 15.0]);
    }

    #[test]
    fn oversized_patch_is_a_contract_error() {
        let y = noise_image(1, 3, 8);
        let g = noise_image(2, 1, 8);
        assert!(matches!(sample_patch_pairs(&y, &g, 4, 9, &mut rng::stream(0, 0)), Err(Error::Contract(_))));
        assert!(matches!(sample_patch_pairs(&y, &g, 1, 4, &mut rng::stream(0, 0)), Err(Error::Contract(_))));
    }

    #[test]
    fn entropy_degenerate_and_uniform_cases() {
        // Narrow kernel relative to the bin spacing: no leakage between bins.
        let bins = 8;
        let constant = Tensor::full(0.125f32, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let h = scalar(&entropy_proxy(&constant, bins, 0.01).unwrap()).unwrap();
        assert!(h <= 0.05 * (bins as f64).ln(), "{h}");

        let centers: Vec<f32> = (0..16).map(|i| -1.0 + (2 * (i % bins) + 1) as f32 / bins as f32).collect();
        let uniform = Tensor::from_vec(centers, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let h = scalar(&entropy_proxy(&uniform, bins, 0.01).unwrap()).unwrap();
        assert!((h - (bins as f64).ln()).abs() < 1e-6, "{h}");
    }

    #[test]
    fn entropy_at_defaults_stays_in_range() {
        let noisy = (noise_image(9, 3, 16) * 3.0).unwrap();
        let flat = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let hn = scalar(&entropy_proxy(&noisy, 32, 0.05).unwrap()).unwrap();
        let hf = scalar(&entropy_proxy(&flat, 32, 0.05).unwrap()).unwrap();
        let cap = 32f64.ln();
        assert!((0.0..=cap + 1e-6).contains(&hn) && (0.0..=cap).contains(&hf));
        assert!(hf < hn);
    }

    #[test]
    fn entropy_rejects_bad_parameters() {
        let y = noise_image(1, 3, 4);
        assert!(matches!(entropy_proxy(&y, 32, 0.0), Err(Error::Config(_))));
        assert!(matches!(entropy_proxy(&y, 1, 0.05), Err(Error::Config(_))));
    }

    #[test]
    fn unique_plus_mutual_is_entropy() {
        let critic = CriticNet::init(CriticArch::default(), &mut rng::stream(0, 0)).unwrap();
        let x = Image::from_tensor(&noise_image(1, 3, 16)).unwrap();
        let y = noise_image(2, 3, 16);
        let cfg = InfoConfig { pairs: 8, ..Default::default() };
        let terms = unique_info(&critic, &x, &y, &cfg, &mut rng::stream(3, 0)).unwrap();
        let (u, i, h) = (scalar(&terms.unique).unwrap(), scalar(&terms.mutual).unwrap(), scalar(&terms.entropy).unwrap());
        assert!((u + i - h).abs() < 1e-6);
    }

    #[test]
    fn critic_checkpoint_round_trip() {
        let critic = CriticNet::init(CriticArch::default(), &mut rng::stream(0, 0)).unwrap();
        let back = CriticNet::from_checkpoint(critic.to_checkpoint()).unwrap();
        assert_eq!(back.checksum().unwrap(), critic.checksum().unwrap());
        assert_eq!(back.arch(), critic.arch());
        assert!(!back.is_trained());
    }

    #[test]
    fn shared_trunk_scores_match_separate_passes() {
        let critic = CriticNet::init(CriticArch::default(), &mut rng::stream(4, 0)).unwrap();
        let mut r = rng::stream(4, 1);
        let y = noise_image(5, 3, 24);
        let g = noise_image(6, 1, 24);
        let batch = sample_patch_pairs(&y, &g, 12, 8, &mut r).unwrap();
        let (joint, marginal) = critic.score_batch(&batch).unwrap();
        let joint_ref = critic.score_pairs(&batch.g, &batch.y).unwrap();
        let marginal_ref = critic.score_pairs(&batch.g, &batch.marginal_y().unwrap()).unwrap();
        let diff = |a: &Tensor, b: &Tensor| scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(diff(&joint, &joint_ref) < 1e-6);
        assert!(diff(&marginal, &marginal_ref) < 1e-6);
        let frozen = critic.frozen();
        let (fj, fm) = frozen.score_batch(&batch).unwrap();
        assert!(diff(&fj, &joint) == 0.0 && diff(&fm, &marginal) == 0.0);
        assert!(frozen.is_trained() == critic.is_trained());
    }
}
