//! Patch contrastive loss on score-network encoder features and the per-image
//! test-time refinement that minimises it late in the reverse chain.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};

use crate::error::{config, contract};
use crate::nn::{self, Linear, Params};
use crate::rng::Rng;
use crate::score::{EpsModel, ScoreNet, FEATURE_TAPS};
use crate::sde::NoiseSchedule;
use crate::Result;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub enabled: bool,
    pub inner_steps: usize,
    pub lr: f64,
    pub tau: f64,
    pub num_patches: usize,
    pub layers: Vec<String>,
    pub head_width: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            inner_steps: 1,
            lr: 1e-5,
            tau: 0.07,
            num_patches: 64,
            layers: FEATURE_TAPS.iter().map(|s| s.to_string()).collect(),
            head_width: 128,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(config(format!("refine.tau must be positive, got {}", self.tau)));
        }
        if !(self.lr >= 0.0) {
            return Err(config(format!("refine.lr must be non-negative, got {}", self.lr)));
        }
        if self.num_patches < 2 {
            return Err(config("refine.num_patches must be >= 2"));
        }
        if self.head_width == 0 {
            return Err(config("refine.head_width must be >= 1"));
        }
        if self.layers.is_empty() {
            return Err(config("refine.layers must name at least one feature tap"));
        }
        for l in &self.layers {
            if !FEATURE_TAPS.contains(&l.as_str()) {
                return Err(config(format!("unknown feature tap `{l}`, expected one of {FEATURE_TAPS:?}")));
            }
        }
        Ok(())
    }
}

/// L2-normalised patch features, one `|P| x d` matrix per layer.
#[derive(Debug, Clone)]
pub struct PatchFeatureSet {
    pub layer_ids: Vec<String>,
    pub features: Vec<Tensor>,
    /// Normalised `(row, col)` centres in `[0, 1)`.
    pub positions: Vec<(f32, f32)>,
}

/// Draws `count` distinct cells of a `rows x cols` grid, returned as normalised
/// cell centres.
pub fn sample_positions(count: usize, rows: usize, cols: usize, rng: &mut Rng) -> Result<Vec<(f32, f32)>> {
    if count > rows * cols {
        return Err(contract(format!("{count} positions requested from a {rows}x{cols} grid")));
    }
    Ok(rand::seq::index::sample(rng, rows * cols, count)
        .into_iter()
        .map(|i| (((i / cols) as f32 + 0.5) / rows as f32, ((i % cols) as f32 + 0.5) / cols as f32))
        .collect())
}

/// Per-tap two-layer MLPs mapping encoder channels to a shared embedding width.
#[derive(Debug, Clone)]
pub struct ProjectionHeads {
    params: Params,
    heads: Vec<(String, Linear, Linear)>,
}

impl ProjectionHeads {
    pub fn init(net: &ScoreNet, layers: &[String], width: usize, rng: &mut Rng) -> Result<Self> {
        let widths = net.arch().widths();
        let mut params = Params::new();
        for id in layers {
            let level = FEATURE_TAPS
                .iter()
                .position(|t| t == id)
                .ok_or_else(|| config(format!("unknown feature tap `{id}`")))?;
            Linear::new(&mut params, &format!("{id}.proj1"), widths[level], width, rng)?;
            Linear::new(&mut params, &format!("{id}.proj2"), width, width, rng)?;
        }
        if net.dtype() != DType::F32 {
            params = params.deep_copy(net.dtype())?;
        }
        let heads = layers
            .iter()
            .map(|id| {
                let a = Linear::load(&params, &format!("{id}.proj1"))?;
                Ok((id.clone(), a, Linear::load(&params, &format!("{id}.proj2"))?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { params, heads })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    fn project(&self, id: &str, x: &Tensor) -> Result<Tensor> {
        let (_, a, b) = self
            .heads
            .iter()
            .find(|(h, _, _)| h == id)
            .ok_or_else(|| config(format!("no projection head for `{id}`")))?;
        b.forward(&nn::silu(&a.forward(x)?)?)
    }
}

/// Encoder features of `img` (`1 x C x H x W`) at timestep `t`, gathered at
/// `positions`, optionally projected, then L2-normalised.
pub fn extract_features(
    net: &ScoreNet,
    heads: Option<&ProjectionHeads>,
    img: &Tensor,
    t: usize,
    layer_ids: &[String],
    positions: &[(f32, f32)],
) -> Result<PatchFeatureSet> {
    let taps = net.encode(img, &[t])?;
    let mut features = Vec::with_capacity(layer_ids.len());
    for id in layer_ids {
        let fmap = taps.get(id)?;
        let (_, c, h, w) = fmap.dims4()?;
        let idx: Vec<u32> = positions
            .iter()
            .map(|&(r, col)| {
                let y = ((r * h as f32) as usize).min(h - 1);
                let x = ((col * w as f32) as usize).min(w - 1);
                (y * w + x) as u32
            })
            .collect();
        let idx = Tensor::from_vec(idx, positions.len(), &Device::Cpu)?;
        let z = fmap.reshape((c, h * w))?.index_select(&idx, 1)?.t()?.contiguous()?;
        let z = match heads {
            Some(hd) => hd.project(id, &z)?,
            None => z,
        };
        features.push(nn::l2_normalize_rows(&z)?);
    }
    Ok(PatchFeatureSet { layer_ids: layer_ids.to_vec(), features, positions: positions.to_vec() })
}

/// Mean over positions of the per-position cross-entropy with the matched
/// location as the positive, summed over layers.
pub fn pcl_loss(z_y: &PatchFeatureSet, z_x: &PatchFeatureSet, tau: f64) -> Result<Tensor> {
    if z_y.layer_ids != z_x.layer_ids || z_y.positions != z_x.positions {
        return Err(contract("feature sets disagree on layers or positions"));
    }
    if z_y.positions.len() < 2 {
        return Err(contract("contrastive loss needs at least 2 positions"));
    }
    if !(tau > 0.0) {
        return Err(config(format!("tau must be positive, got {tau}")));
    }
    let mut total: Option<Tensor> = None;
    for (zy, zx) in z_y.features.iter().zip(&z_x.features) {
        let logits = (zy.matmul(&zx.t()?)? / tau)?;
        let pos = ((zy * zx)?.sum_keepdim(1)? / tau)?;
        // Relative to the positive logit the row max is >= 0, so the
        // log-sum-exp below never overflows.
        let d = logits.broadcast_sub(&pos)?;
        let m = d.max_keepdim(D::Minus1)?.detach();
        let lse = (d.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()? + m)?;
        let layer = lse.mean_all()?;
        total = Some(match total {
            None => layer,
            Some(acc) => (acc + layer)?,
        });
    }
    total.ok_or_else(|| contract("no feature layers"))
}

/// One-step denoised estimate `(y_t - sqrt(1 - a) eps_hat) / sqrt(a)`.
pub fn denoised_estimate<M: EpsModel>(net: &M, y_t: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let a = sched.alpha_bar(t);
    let eps = net.predict_eps(y_t, &[t])?;
    Ok(((y_t - (eps * (1.0 - a).sqrt())?)? / a.sqrt())?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOutcome {
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Private copy of the score network plus projection heads and optimiser
/// state, living for the refinement phase of one image.
pub struct RefineSession {
    net: ScoreNet,
    heads: ProjectionHeads,
    opt: Option<AdamW>,
    pristine: Params,
    cfg: RefineConfig,
    diverged: bool,
}

impl RefineSession {
    pub fn new(base: &ScoreNet, cfg: &RefineConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let net = base.deep_copy(base.dtype())?;
        let heads = ProjectionHeads::init(&net, &cfg.layers, cfg.head_width, rng)?;
        let opt = if cfg.inner_steps > 0 {
            let mut vars = net.params().vars();
            vars.extend(heads.params().vars());
            Some(AdamW::new(vars, ParamsAdamW { lr: cfg.lr, weight_decay: 0.0, ..Default::default() })?)
        } else {
            None
        };
        let pristine = net.params().deep_copy(net.dtype())?;
        Ok(Self { net, heads, opt, pristine, cfg: cfg.clone(), diverged: false })
    }

    pub fn net(&self) -> &ScoreNet {
        &self.net
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn heads(&self) -> &ProjectionHeads {
        &self.heads
    }

    fn loss_at(&self, y_t: &Tensor, x0_prime: &Tensor, t: usize, sched: &NoiseSchedule, pos: &[(f32, f32)]) -> Result<Tensor> {
        let y0_hat = denoised_estimate(&self.net, y_t, t, sched)?;
        let zy = extract_features(&self.net, Some(&self.heads), &y0_hat, 0, &self.cfg.layers, pos)?;
        let zx = extract_features(&self.net, Some(&self.heads), x0_prime, 0, &self.cfg.layers, pos)?;
        pcl_loss(&zy, &zx, self.cfg.tau)
    }

    /// Runs `inner_steps` optimiser steps on the contrastive loss between the
    /// denoised estimate of `y_t` and `x0_prime`. On a non-finite loss or
    /// parameter the network reverts to its state at session start and later
    /// calls become no-ops.
    pub fn step(
        &mut self,
        y_t: &Tensor,
        x0_prime: &Tensor,
        t: usize,
        sched: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<Option<RefineOutcome>> {
        if self.diverged {
            return Ok(None);
        }
        sched.check_timestep(t)?;
        let (_, _, h, w) = y_t.dims4()?;
        let pos = sample_positions(self.cfg.num_patches, h / 4, w / 4, rng)?;
        let y_t = y_t.detach();
        let mut before = None;
        for _ in 0..self.cfg.inner_steps {
            let loss = self.loss_at(&y_t, x0_prime, t, sched, &pos)?;
            let value = crate::mi::scalar(&loss)?;
            before.get_or_insert(value);
            if !value.is_finite() {
                return self.revert(t);
            }
            if let Some(opt) = self.opt.as_mut() {
                opt.backward_step(&loss)?;
            }
            if !self.net.params().all_finite()? {
                return self.revert(t);
            }
        }
        let after = crate::mi::scalar(&self.loss_at(&y_t, x0_prime, t, sched, &pos)?)?;
        if !after.is_finite() {
            return self.revert(t);
        }
        Ok(Some(RefineOutcome { loss_before: before.unwrap_or(after), loss_after: after }))
    }

    fn revert(&mut self, t: usize) -> Result<Option<RefineOutcome>> {
        log::warn!("contrastive refinement diverged at t={t}; reverting to unrefined parameters");
        self.net.params().assign_from(&self.pristine)?;
        self.diverged = true;
        Ok(None)
    }
}

/// Mean cosine similarity between matched-position features.
pub fn matched_similarity(z_y: &PatchFeatureSet, z_x: &PatchFeatureSet) -> Result<f64> {
    if z_y.positions != z_x.positions {
        return Err(contract("feature sets disagree on positions"));
    }
    let mut acc = 0.0;
    for (a, b) in z_y.features.iter().zip(&z_x.features) {
        acc += crate::mi::scalar(&(a * b)?.sum(1)?.mean_all()?)?;
    }
    Ok(acc / z_y.features.len() as f64)
}
