//! Target-domain score model.
//!
//! [`ScoreNet`] is a three-resolution U-Net predicting the injected noise; the
//! score is recovered as `-eps_hat / sqrt(1 - alpha_bar_t)`. Its encoder output
//! at each resolution is exposed as a feature tap for contrastive refinement.
//! [`GmmOracle`] provides exact scores of perturbed Gaussian mixtures for
//! checking the sampler independently of any trained network.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng as _;

use crate::error::{config, contract};
use crate::nn::{self, Checkpoint, Conv2d, GroupNorm, Linear, Params};
use crate::rng::{self, Rng};
use crate::sde::NoiseSchedule;
use crate::{Error, Image, Result};

/// Encoder taps, finest resolution first.
pub const FEATURE_TAPS: [&str; 3] = ["enc0", "enc1", "enc2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreArch {
    pub in_channels: usize,
    /// Channel width at full resolution; the two coarser levels use 2x and 4x.
    pub base_width: usize,
    pub time_embed_dim: usize,
}

impl Default for ScoreArch {
    fn default() -> Self {
        Self { in_channels: 3, base_width: 32, time_embed_dim: 64 }
    }
}

impl ScoreArch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.time_embed_dim == 0 {
            return Err(config(format!("score architecture widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.base_width, 2 * self.base_width, 4 * self.base_width]
    }
}

/// Anything that predicts the injected noise of a perturbed batch.
pub trait EpsModel {
    /// `y` is `B x C x H x W`; `ts` holds one timestep per batch element.
    fn predict_eps(&self, y: &Tensor, ts: &[usize]) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn init(params: &mut Params, name: &str, c_in: usize, c_out: usize, temb: usize, rng: &mut Rng) -> Result<()> {
        GroupNorm::new(params, &format!("{name}.norm1"), c_in)?;
        Conv2d::new(params, &format!("{name}.conv1"), c_in, c_out, 3, rng)?;
        Linear::new(params, &format!("{name}.time"), temb, c_out, rng)?;
        GroupNorm::new(params, &format!("{name}.norm2"), c_out)?;
        Conv2d::new(params, &format!("{name}.conv2"), c_out, c_out, 3, rng)?;
        if c_in != c_out {
            Conv2d::new(params, &format!("{name}.skip"), c_in, c_out, 1, rng)?;
        }
        Ok(())
    }

    fn load(params: &Params, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::load(params, &format!("{name}.norm1"))?,
            conv1: Conv2d::load(params, &format!("{name}.conv1"))?,
            time: Linear::load(params, &format!("{name}.time"))?,
            norm2: GroupNorm::load(params, &format!("{name}.norm2"))?,
            conv2: Conv2d::load(params, &format!("{name}.conv2"))?,
            skip: if c_in != c_out { Some(Conv2d::load(params, &format!("{name}.skip"))?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&nn::silu(&self.norm1.forward(x)?)?)?;
        let bias = self.time.forward(temb)?;
        let (b, c) = bias.dims2()?;
        let h = h.broadcast_add(&bias.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&nn::silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Encoder activations at the three resolutions.
#[derive(Debug, Clone)]
pub struct EncoderTaps {
    pub levels: [Tensor; 3],
}

impl EncoderTaps {
    pub fn get(&self, id: &str) -> Result<&Tensor> {
        FEATURE_TAPS
            .iter()
            .position(|t| *t == id)
            .map(|i| &self.levels[i])
            .ok_or_else(|| config(format!("unknown feature tap `{id}`, expected one of {FEATURE_TAPS:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct ScoreNet {
    arch: ScoreArch,
    params: Params,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    enc: [ResBlock; 3],
    dec1: ResBlock,
    dec0: ResBlock,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl ScoreNet {
    pub fn init(arch: ScoreArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let [w0, w1, w2] = arch.widths();
        let d = arch.time_embed_dim;
        let mut p = Params::new();
        Linear::new(&mut p, "time1", d, d, rng)?;
        Linear::new(&mut p, "time2", d, d, rng)?;
        Conv2d::new(&mut p, "conv_in", arch.in_channels, w0, 3, rng)?;
        ResBlock::init(&mut p, "enc0", w0, w0, d, rng)?;
        ResBlock::init(&mut p, "enc1", w0, w1, d, rng)?;
        ResBlock::init(&mut p, "enc2", w1, w2, d, rng)?;
        ResBlock::init(&mut p, "dec1", w2 + w1, w1, d, rng)?;
        ResBlock::init(&mut p, "dec0", w1 + w0, w0, d, rng)?;
        GroupNorm::new(&mut p, "out_norm", w0)?;
        Conv2d::zeros(&mut p, "out_conv", w0, arch.in_channels, 3)?;
        Self::from_params(arch, p)
    }

    pub fn from_params(arch: ScoreArch, params: Params) -> Result<Self> {
        arch.validate()?;
        let [w0, w1, w2] = arch.widths();
        let p = &params;
        Ok(Self {
            arch,
            time1: Linear::load(p, "time1")?,
            time2: Linear::load(p, "time2")?,
            conv_in: Conv2d::load(p, "conv_in")?,
            enc: [
                ResBlock::load(p, "enc0", w0, w0)?,
                ResBlock::load(p, "enc1", w0, w1)?,
                ResBlock::load(p, "enc2", w1, w2)?,
            ],
            dec1: ResBlock::load(p, "dec1", w2 + w1, w1)?,
            dec0: ResBlock::load(p, "dec0", w1 + w0, w0)?,
            out_norm: GroupNorm::load(p, "out_norm")?,
            out_conv: Conv2d::load(p, "out_conv")?,
            params,
        })
    }

    pub fn arch(&self) -> ScoreArch {
        self.arch
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn feature_taps(&self) -> &'static [&'static str] {
        &FEATURE_TAPS
    }

    pub fn dtype(&self) -> DType {
        self.params.iter().next().map(|(_, v)| v.dtype()).unwrap_or(DType::F32)
    }

    /// Independent copy (fresh parameter storage), optionally in another dtype.
    pub fn deep_copy(&self, dtype: DType) -> Result<Self> {
        Self::from_params(self.arch, self.params.deep_copy(dtype)?)
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }

    fn check_input(&self, y: &Tensor, ts: &[usize]) -> Result<usize> {
        let (b, c, h, w) = y
            .dims4()
            .map_err(|_| contract(format!("score input must be B x C x H x W, got {:?}", y.shape())))?;
        if c != self.arch.in_channels {
            return Err(contract(format!("score net expects {} channels, got {c}", self.arch.in_channels)));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(contract(format!("image side lengths must be multiples of 4, got {h}x{w}")));
        }
        if ts.len() != b {
            return Err(contract(format!("{} timesteps for a batch of {b}", ts.len())));
        }
        Ok(b)
    }

    fn time_features(&self, ts: &[usize], dtype: DType) -> Result<Tensor> {
        let emb = nn::timestep_embedding(ts, self.arch.time_embed_dim, dtype)?;
        let h = self.time2.forward(&nn::silu(&self.time1.forward(&emb)?)?)?;
        nn::silu(&h)
    }

    fn encode_with(&self, y: &Tensor, temb: &Tensor) -> Result<EncoderTaps> {
        let h0 = self.enc[0].forward(&self.conv_in.forward(y)?, temb)?;
        let h1 = self.enc[1].forward(&h0.avg_pool2d(2)?, temb)?;
        let h2 = self.enc[2].forward(&h1.avg_pool2d(2)?, temb)?;
        Ok(EncoderTaps { levels: [h0, h1, h2] })
    }

    /// Encoder pass only.
    pub fn encode(&self, y: &Tensor, ts: &[usize]) -> Result<EncoderTaps> {
        self.check_input(y, ts)?;
        let temb = self.time_features(ts, y.dtype())?;
        self.encode_with(y, &temb)
    }

    /// Score `-eps_hat / sqrt(1 - alpha_bar_t)` at a single timestep.
    pub fn score(&self, y: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
        sched.check_timestep(t)?;
        let b = y.dim(0)?;
        let eps = self.predict_eps(y, &vec![t; b])?;
        Ok((eps * (-1.0 / (1.0 - sched.alpha_bar(t)).sqrt()))?)
    }

    pub fn to_checkpoint(&self, iteration: usize) -> Checkpoint {
        let mut ck = Checkpoint { params: self.params.clone(), ..Default::default() };
        ck.meta.insert("kind".into(), "score_net".into());
        ck.meta.insert("in_channels".into(), self.arch.in_channels.to_string());
        ck.meta.insert("base_width".into(), self.arch.base_width.to_string());
        ck.meta.insert("time_embed_dim".into(), self.arch.time_embed_dim.to_string());
        ck.meta.insert("iteration".into(), iteration.to_string());
        ck
    }

    /// Returns the network and the iteration count it was saved at.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, usize)> {
        if ck.meta.get("kind").map(String::as_str) != Some("score_net") {
            return Err(Error::Checkpoint("not a score network checkpoint".into()));
        }
        let arch = ScoreArch {
            in_channels: ck.meta_value("in_channels")?,
            base_width: ck.meta_value("base_width")?,
            time_embed_dim: ck.meta_value("time_embed_dim")?,
        };
        let iteration = ck.meta_value("iteration")?;
        Ok((Self::from_params(arch, ck.params)?, iteration))
    }

    pub fn save(&self, path: &Path, iteration: usize) -> Result<()> {
        self.to_checkpoint(iteration).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, usize)> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

impl EpsModel for ScoreNet {
    fn predict_eps(&self, y: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.check_input(y, ts)?;
        let temb = self.time_features(ts, y.dtype())?;
        let taps = self.encode_with(y, &temb)?;
        let [h0, h1, h2] = &taps.levels;
        let (_, _, hh1, ww1) = h1.dims4()?;
        let up = h2.upsample_nearest2d(hh1, ww1)?;
        let u1 = self.dec1.forward(&Tensor::cat(&[&up, h1], 1)?, &temb)?;
        let (_, _, hh0, ww0) = h0.dims4()?;
        let up = u1.upsample_nearest2d(hh0, ww0)?;
        let u0 = self.dec0.forward(&Tensor::cat(&[&up, h0], 1)?, &temb)?;
        self.out_conv.forward(&nn::silu(&self.out_norm.forward(&u0)?)?)
    }
}

/// Stacks equally shaped images into a `B x C x H x W` tensor.
pub fn stack_images(images: &[Image], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Ingestion("empty image set".into()))?;
    if let Some(bad) = images.iter().find(|i| !i.same_shape(first)) {
        return Err(Error::Ingestion(format!(
            "mixed image shapes in corpus: {:?} vs {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    let ts = images.iter().map(|i| i.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Denoising score matching on a batch of clean images.
///
/// Each element gets a uniform timestep and fresh noise. The residual
/// `(1 - a) s(y_t, t) + sqrt(1 - a) eps` of the implied score
/// `s = -eps_hat / sqrt(1 - a)` is normalised by `(1 - a) * dim`, which reduces
/// to the mean squared noise-prediction error.
pub fn dsm_loss<M: EpsModel>(model: &M, batch: &Tensor, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor> {
    let b = batch.dim(0)?;
    if b == 0 {
        return Err(contract("empty DSM batch"));
    }
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..sched.steps())).collect();
    let eps = rng::normal_tensor(rng, batch.shape(), batch.dtype())?;
    dsm_loss_at(model, batch, &ts, &eps, sched)
}

/// [`dsm_loss`] with the timesteps and noise supplied by the caller.
pub fn dsm_loss_at<M: EpsModel>(
    model: &M,
    batch: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let b = batch.dim(0)?;
    let dtype = batch.dtype();
    let signal: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect();
    let noise: Vec<f64> = ts.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt()).collect();
    let col = |v: Vec<f64>| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
    };
    let y_t = (batch.broadcast_mul(&col(signal)?)? + eps.broadcast_mul(&col(noise)?)?)?;
    let eps_hat = model.predict_eps(&y_t, ts)?;
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        Self { iterations: 2000, batch_size: 8, lr: 1e-4, weight_decay: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedScore {
    pub net: ScoreNet,
    /// Loss of each iteration run in this call.
    pub losses: Vec<f64>,
    /// Global iteration count after training (includes resumed iterations).
    pub iteration: usize,
}

/// Trains (or resumes training of) a score network on a target-domain corpus.
pub fn train_score(
    corpus: &[Image],
    arch: ScoreArch,
    cfg: &ScoreTrainConfig,
    sched: &NoiseSchedule,
    resume: Option<(ScoreNet, usize)>,
) -> Result<TrainedScore> {
    let data = stack_images(corpus, DType::F32)?;
    if cfg.batch_size == 0 {
        return Err(config("batch_size must be >= 1"));
    }
    let (net, start) = match resume {
        Some((net, it)) => (net, it),
        None => (ScoreNet::init(arch, &mut rng::stream(cfg.seed, 0))?, 0),
    };
    // One stream per starting point keeps resumed runs reproducible.
    let mut rng = rng::stream(cfg.seed, 1 + start as u64);
    let mut opt = AdamW::new(
        net.params.vars(),
        ParamsAdamW { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
    )?;
    let n = data.dim(0)?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let idx: Vec<u32> = (0..cfg.batch_size).map(|_| rng.random_range(0..n) as u32).collect();
        let idx = Tensor::from_vec(idx, cfg.batch_size, &Device::Cpu)?;
        let batch = data.index_select(&idx, 0)?;
        let loss = dsm_loss(&net, &batch, sched, &mut rng)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("DSM loss diverged at iteration {}", start + it)));
        }
        opt.backward_step(&loss)?;
        if !net.params.all_finite()? {
            return Err(Error::Numeric(format!("non-finite parameters after iteration {}", start + it)));
        }
        losses.push(value);
        if (it + 1) % 50 == 0 {
            log::info!("score iteration {} loss {:.4}", start + it + 1, smoothed_tail(&losses, 50));
        }
    }
    Ok(TrainedScore { net, losses, iteration: start + cfg.iterations })
}

/// Mean of the last `window` entries.
pub fn smoothed_tail(values: &[f64], window: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Isotropic Gaussian mixture with a closed-form score under VP perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmOracle {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variance: f64,
}

impl GmmOracle {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(config("mixture needs one mean per weight"));
        }
        if weights.iter().any(|w| *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config("mixture weights must lie on the simplex"));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(config("mixture means must share a nonzero dimension"));
        }
        if !(variance > 0.0) {
            return Err(config("mixture variance must be positive"));
        }
        Ok(Self { weights, means, variance })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Per-component log(weight * density) of the perturbed mixture, and the
    /// perturbed component variance.
    fn component_logs(&self, y: &[f64], alpha_bar: f64) -> (Vec<f64>, f64) {
        let v = alpha_bar * self.variance + (1.0 - alpha_bar);
        let s = alpha_bar.sqrt();
        let d = y.len() as f64;
        let logs = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| {
                let sq: f64 = y.iter().zip(m).map(|(yi, mi)| (yi - s * mi).powi(2)).sum();
                w.ln() - 0.5 * sq / v - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln()
            })
            .collect();
        (logs, v)
    }

    /// Log density of the mixture after perturbation with `alpha_bar`.
    pub fn log_density_at(&self, y: &[f64], alpha_bar: f64) -> f64 {
        let (logs, _) = self.component_logs(y, alpha_bar);
        log_sum_exp(&logs)
    }

    /// Exact gradient of [`Self::log_density_at`].
    pub fn score_at(&self, y: &[f64], alpha_bar: f64) -> Vec<f64> {
        let (logs, v) = self.component_logs(y, alpha_bar);
        let lse = log_sum_exp(&logs);
        let s = alpha_bar.sqrt();
        let mut out = vec![0.0; y.len()];
        for (l, m) in logs.iter().zip(&self.means) {
            let r = (l - lse).exp();
            for (o, (yi, mi)) in out.iter_mut().zip(y.iter().zip(m)) {
                *o -= r * (yi - s * mi) / v;
            }
        }
        out
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Score of the mixture perturbed to timestep `t`.
pub fn gmm_score(gmm: &GmmOracle, y: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    gmm.score_at(y, sched.alpha_bar(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ScoreArch {
        ScoreArch { in_channels: 3, base_width: 4, time_embed_dim: 8 }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ScoreNet::init(tiny_arch(), &mut rng::stream(3, 0)).unwrap();
        let b = ScoreNet::init(tiny_arch(), &mut rng::stream(3, 0)).unwrap();
        let c = ScoreNet::init(tiny_arch(), &mut rng::stream(4, 0)).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        assert_ne!(a.checksum().unwrap(), c.checksum().unwrap());
    }

    #[test]
    fn invalid_arch_is_a_config_error() {
        let arch = ScoreArch { base_width: 0, ..tiny_arch() };
        assert!(matches!(ScoreNet::init(arch, &mut rng::stream(0, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_matches_input_and_rejects_odd_sizes() {
        let net = ScoreNet::init(tiny_arch(), &mut rng::stream(1, 0)).unwrap();
        let y = rng::normal_tensor(&mut rng::stream(2, 0), (2, 3, 8, 12), DType::F32).unwrap();
        assert_eq!(net.predict_eps(&y, &[3, 900]).unwrap().dims(), y.dims());
        let odd = Tensor::zeros((1, 3, 6, 6), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.predict_eps(&odd, &[0]), Err(Error::Contract(_))));
        assert!(matches!(net.predict_eps(&y, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_and_mixed_batches_are_rejected() {
        assert!(matches!(stack_images(&[], DType::F32), Err(Error::Ingestion(_))));
        let a = Image::filled(4, 4, 3, 0.0);
        let b = Image::filled(8, 4, 3, 0.0);
        assert!(matches!(stack_images(&[a, b], DType::F32), Err(Error::Ingestion(_))));
    }

    #[test]
    fn gmm_standard_normal_and_symmetry() {
        let g = GmmOracle::new(vec![1.0], vec![vec![0.0]], 1.0).unwrap();
        assert!((g.score_at(&[0.7], 1.0)[0] + 0.7).abs() < 1e-12);

        let g = GmmOracle::new(vec![0.5, 0.5], vec![vec![-2.0, 1.0], vec![2.0, 3.0]], 0.3).unwrap();
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let s = gmm_score(&g, &[0.0, 2.0 * sched.alpha_bar(100).sqrt()], 100, &sched);
        assert!(s.iter().all(|v| v.abs() < 1e-12), "{s:?}");
    }

    #[test]
    fn gmm_validation() {
        assert!(GmmOracle::new(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], 1.0).is_err());
        assert!(GmmOracle::new(vec![1.0], vec![vec![0.0]], 0.0).is_err());
        assert!(GmmOracle::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0, 2.0]], 1.0).is_err());
    }
}
