//! Information-guided reverse diffusion.
//!
//! Starting from a noised copy of the color-removed source, each reverse step
//! samples `N(mu - beta_t k, beta_t I)` with `k` the gradient of
//!
//! ```text
//! M(y, t) = -lambda_t E[U(y, x_t)] - (1 - lambda_t) E[I(y, x_t)],  lambda_t = t / S
//! ```
//!
//! evaluated at the unguided mean `mu`. Early (noisy) steps weight stain
//! style, late steps weight shared structure. Below `t'_0` the score network
//! is additionally refined per image with a patch contrastive loss.

use std::io::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor, Var};

use crate::contrastive::{RefineConfig, RefineSession};
use crate::data::{gradient_map, remove_color};
use crate::error::{config, contract};
use crate::mi::{entropy_proxy, mutual_info, scalar, Critic, InfoConfig};
use crate::rng::{self, Rng};
use crate::score::ScoreNet;
use crate::sde::{all_finite, perturb_with, reverse_moments, shifted_step, NoiseSchedule};
use crate::{Error, Image, Result};

/// Scale applied to the raw energy gradient when none is configured.
pub const DEFAULT_GUIDANCE_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// `S`: the chain starts from the source noised to this level.
    pub start_step: usize,
    /// `N`: the last `N` steps of the chain are guided.
    pub guided_steps: usize,
    /// `t'_0`: contrastive refinement runs for `t < t'_0`.
    pub t0_prime: usize,
    pub mc_samples: usize,
    pub guidance_scale: f64,
    pub info: InfoConfig,
    pub refine: RefineConfig,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            start_step: 300,
            guided_steps: 300,
            t0_prime: 40,
            mc_samples: 1,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            info: InfoConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let (s, n) = (self.start_step, self.guided_steps);
        if !(0 < n && n <= s && s <= sched.steps()) {
            return Err(config(format!("need 0 < N <= S <= T, got N={n}, S={s}, T={}", sched.steps())));
        }
        if self.refine.enabled && !(0 < self.t0_prime && 2 * self.t0_prime < s) {
            return Err(config(format!("need 0 < t0_prime < S/2, got t0_prime={}, S={s}", self.t0_prime)));
        }
        if self.mc_samples == 0 {
            return Err(config("mc_samples must be >= 1"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(config(format!("guidance_scale must be finite and >= 0, got {}", self.guidance_scale)));
        }
        if self.refine.enabled {
            self.refine.validate()?;
        }
        Ok(())
    }
}

/// `t / S`.
pub fn lambda_t(t: usize, s: usize) -> Result<f64> {
    if s == 0 || t > s {
        return Err(contract(format!("lambda needs 0 <= t <= S and S > 0, got t={t}, S={s}")));
    }
    Ok(t as f64 / s as f64)
}

/// Differentiable scalar energy of an iterate `y` (`1 x C x H x W`) at step `t`.
pub trait Energy {
    fn energy(&self, y: &Tensor, t: usize, rng: &mut Rng) -> Result<Tensor>;
}

/// `w/2 ||y - c||^2`.
pub struct QuadraticEnergy {
    pub center: Tensor,
    pub weight: f64,
}

impl Energy for QuadraticEnergy {
    fn energy(&self, y: &Tensor, _t: usize, _rng: &mut Rng) -> Result<Tensor> {
        Ok(((y - &self.center)?.sqr()?.sum_all()? * (0.5 * self.weight))?)
    }
}

/// The information energy for one source image.
pub struct MiEnergy<'a, C: Critic + ?Sized> {
    critic: &'a C,
    x0_prime: Tensor,
    sched: &'a NoiseSchedule,
    start_step: usize,
    mc_samples: usize,
    info: InfoConfig,
}

impl<'a, C: Critic + ?Sized> MiEnergy<'a, C> {
    /// `x0_prime` is the color-removed source as `1 x C x H x W`.
    pub fn new(critic: &'a C, x0_prime: Tensor, sched: &'a NoiseSchedule, cfg: &GuidanceConfig) -> Result<Self> {
        if !critic.is_trained() {
            return Err(config("critic has not been trained"));
        }
        if cfg.mc_samples == 0 {
            return Err(config("mc_samples must be >= 1"));
        }
        Ok(Self {
            critic,
            x0_prime,
            sched,
            start_step: cfg.start_step,
            mc_samples: cfg.mc_samples,
            info: cfg.info,
        })
    }

    /// Energy together with its entropy and mean mutual-information parts.
    pub fn terms(&self, y: &Tensor, t: usize, rng: &mut Rng) -> Result<(Tensor, Tensor, Tensor)> {
        let lambda = lambda_t(t, self.start_step)?;
        self.sched.check_timestep(t)?;
        let a = self.sched.alpha_bar(t);
        let mut mutual: Option<Tensor> = None;
        for _ in 0..self.mc_samples {
            let eps = rng::normal_tensor(rng, self.x0_prime.shape(), self.x0_prime.dtype())?;
            let x_t = Image::from_tensor(&perturb_with(&self.x0_prime, a, &eps)?)?;
            let g = gradient_map(&x_t).to_tensor(y.dtype())?;
            let i = mutual_info(self.critic, &g, y, self.info.pairs, self.info.patch_size, rng)?;
            mutual = Some(match mutual {
                None => i,
                Some(acc) => (acc + i)?,
            });
        }
        let mutual = (mutual.expect("mc_samples >= 1") / self.mc_samples as f64)?;
        let entropy = entropy_proxy(y, self.info.entropy_bins, self.info.entropy_bandwidth)?;
        // -lambda (H - I) - (1 - lambda) I
        let m = ((&entropy * -lambda)? + (&mutual * (2.0 * lambda - 1.0))?)?;
        Ok((m, entropy, mutual))
    }
}

impl<C: Critic + ?Sized> Energy for MiEnergy<'_, C> {
    fn energy(&self, y: &Tensor, t: usize, rng: &mut Rng) -> Result<Tensor> {
        Ok(self.terms(y, t, rng)?.0)
    }
}

/// Scaled energy gradient at `y_eval` and the energy value there.
#[derive(Debug, Clone)]
pub struct EnergyGrad {
    pub k: Tensor,
    pub energy: Option<f64>,
}

/// `k = scale * grad_y M(y)` at `y = y_eval`. A zero scale short-circuits to
/// `k = 0` without evaluating the energy.
pub fn energy_grad_at<E: Energy + ?Sized>(
    energy: &E,
    y_eval: &Tensor,
    t: usize,
    scale: f64,
    rng: &mut Rng,
) -> Result<EnergyGrad> {
    if scale == 0.0 {
        return Ok(EnergyGrad { k: y_eval.zeros_like()?, energy: None });
    }
    let y = Var::from_tensor(&y_eval.detach())?;
    let m = energy.energy(y.as_tensor(), t, rng)?;
    let value = scalar(&m)?;
    let grads = m.backward()?;
    let g = match grads.get(y.as_tensor()) {
        Some(g) => g.clone(),
        None => y_eval.zeros_like()?,
    };
    if !value.is_finite() || !all_finite(&g)? {
        return Err(Error::Numeric(format!("non-finite energy gradient at t={t}")));
    }
    Ok(EnergyGrad { k: (g * scale)?, energy: Some(value) })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub lambda: f64,
    pub guided: bool,
    pub energy: Option<f64>,
    pub k_norm: f64,
    /// The energy gradient was unusable and the step ran unguided.
    pub fallback: bool,
    pub refine_loss: Option<f64>,
    pub refine_loss_after: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StainTrace {
    pub records: Vec<StepRecord>,
}

impl StainTrace {
    pub fn write_jsonl(&self, mut w: impl std::io::Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Stained {
    pub image: Image,
    pub trace: StainTrace,
}

/// Independent noise, guidance and refinement streams for one image.
struct Streams {
    noise: Rng,
    guide: Rng,
    refine: Rng,
}

impl Streams {
    fn split(rng: &mut Rng) -> Self {
        Self { noise: rng::fork(rng), guide: rng::fork(rng), refine: rng::fork(rng) }
    }
}

/// Color-removed source as a model-space tensor.
pub fn prepare_source(x0: &Image) -> Result<Tensor> {
    remove_color(x0)?.to_tensor(DType::F32)
}

/// Runs the guided chain from `x0_prime` (already color-removed, `1 x C x H x W`)
/// with an arbitrary energy.
pub fn guided_chain<E: Energy + ?Sized>(
    x0_prime: &Tensor,
    net: &ScoreNet,
    energy: &E,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<Stained> {
    cfg.validate(sched)?;
    let mut streams = Streams::split(rng);
    let s = cfg.start_step;
    let eps = rng::normal_tensor(&mut streams.noise, x0_prime.shape(), x0_prime.dtype())?;
    let mut y = perturb_with(x0_prime, sched.alpha_bar(s - 1), &eps)?;
    let mut session: Option<RefineSession> = None;
    let mut records = Vec::with_capacity(s);
    for t in (0..s).rev() {
        let mut rec = StepRecord {
            t,
            lambda: lambda_t(t, s)?,
            guided: t < cfg.guided_steps,
            energy: None,
            k_norm: 0.0,
            fallback: false,
            refine_loss: None,
            refine_loss_after: None,
        };
        if cfg.refine.enabled && t < cfg.t0_prime {
            if session.is_none() {
                session = Some(RefineSession::new(net, &cfg.refine, &mut streams.refine)?);
            }
            let sess = session.as_mut().expect("session just created");
            if let Some(out) = sess.step(&y, x0_prime, t, sched, &mut streams.refine)? {
                rec.refine_loss = Some(out.loss_before);
                rec.refine_loss_after = Some(out.loss_after);
            }
        }
        let model = session.as_ref().map_or(net, |s| s.net());
        let score = model.score(&y, t, sched)?.detach();
        let m = reverse_moments(&y, t, &score, sched)?;
        let k = if rec.guided && cfg.guidance_scale > 0.0 {
            match energy_grad_at(energy, &m.mean, t, cfg.guidance_scale, &mut streams.guide) {
                Ok(g) => {
                    rec.energy = g.energy;
                    g.k
                }
                Err(Error::Numeric(msg)) => {
                    log::warn!("{msg}; taking an unguided step");
                    rec.fallback = true;
                    m.mean.zeros_like()?
                }
                Err(e) => return Err(e),
            }
        } else {
            m.mean.zeros_like()?
        };
        rec.k_norm = scalar(&k.sqr()?.sum_all()?)?.sqrt();
        y = shifted_step(&m, &k, t, &mut streams.noise)?.detach();
        records.push(rec);
    }
    if !all_finite(&y)? {
        return Err(Error::Numeric("non-finite output image".into()));
    }
    Ok(Stained { image: Image::from_tensor(&y)?.clamp(-1.0, 1.0), trace: StainTrace { records } })
}

/// Translates a source image with the information energy from `critic`.
pub fn virtual_stain<C: Critic + ?Sized>(
    x0: &Image,
    net: &ScoreNet,
    critic: &C,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<Stained> {
    let x0_prime = prepare_source(x0)?;
    if cfg.guidance_scale > 0.0 {
        let energy = MiEnergy::new(critic, x0_prime.clone(), sched, cfg)?;
        guided_chain(&x0_prime, net, &energy, sched, cfg, rng)
    } else {
        guided_chain(&x0_prime, net, &NoEnergy, sched, cfg, rng)
    }
}

/// Placeholder for chains that never evaluate an energy.
struct NoEnergy;

impl Energy for NoEnergy {
    fn energy(&self, _y: &Tensor, t: usize, _rng: &mut Rng) -> Result<Tensor> {
        Err(contract(format!("energy requested at t={t} from an unguided chain")))
    }
}
