//! Discretised variance-preserving SDE.
//!
//! Timestep `t` indexes the schedule arrays: a state "at `t`" has marginal
//! `N(sqrt(alpha_bar[t]) y0, (1 - alpha_bar[t]) I)`. One reverse step at `t`
//! maps a state at `t` to a state at `t - 1`, and the step at `t = 0` lands on
//! clean data without injecting noise.

use candle_core::Tensor;

use crate::error::{config, contract};
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `beta` from `beta_min` to `beta_max` over `steps` steps.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(config("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(config(format!(
                "need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_min]
        } else {
            (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alpha_bar = beta
            .iter()
            .scan(1.0f64, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(contract(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }
}

/// Iterate of the reverse chain.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub y: Tensor,
    pub t: usize,
    pub rng: Rng,
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(format!("{what}: shape {:?} does not match {:?}", b.shape(), a.shape())));
    }
    Ok(())
}

/// True when every element is finite.
pub fn all_finite(t: &Tensor) -> Result<bool> {
    let s = t.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}

/// Draws `y_t = sqrt(alpha_bar[t]) y0 + sqrt(1 - alpha_bar[t]) eps`.
pub fn perturb(y0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(t)?;
    check_same_shape(y0, eps, "perturb noise")?;
    perturb_with(y0, sched.alpha_bar(t), eps)
}

pub(crate) fn perturb_with(y0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    Ok(((y0 * alpha_bar.sqrt())? + (eps * (1.0 - alpha_bar).sqrt())?)?)
}

/// Gaussian reverse transition `N(mean, variance I)`.
#[derive(Debug, Clone)]
pub struct ReverseMoments {
    pub mean: Tensor,
    pub variance: f64,
}

/// One Euler–Maruyama step of the reverse VP-SDE:
/// `mean = y + beta_t (y / 2 + score)`, `variance = beta_t`.
pub fn reverse_moments(
    y_h: &Tensor,
    t: usize,
    score: &Tensor,
    sched: &NoiseSchedule,
) -> Result<ReverseMoments> {
    sched.check_timestep(t)?;
    check_same_shape(y_h, score, "score")?;
    if !all_finite(score)? {
        return Err(Error::Numeric(format!("non-finite score at t={t}")));
    }
    let beta = sched.beta(t);
    let mean = ((y_h * (1.0 + 0.5 * beta))? + (score * beta)?)?;
    Ok(ReverseMoments { mean, variance: beta })
}

fn add_noise(mean: Tensor, variance: f64, t: usize, rng: &mut Rng) -> Result<Tensor> {
    if t == 0 {
        return Ok(mean);
    }
    let z = rng::normal_tensor(rng, mean.shape(), mean.dtype())?;
    Ok((mean + (z * variance.sqrt())?)?)
}

/// Samples the unguided reverse transition. The `t = 0` step returns the mean.
pub fn reverse_step(
    y_h: &Tensor,
    t: usize,
    score: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let m = reverse_moments(y_h, t, score, sched)?;
    add_noise(m.mean, m.variance, t, rng)
}

/// Samples `N(mean - variance * k, variance I)`: the reverse transition with its
/// mean shifted against the energy gradient `k` evaluated at the mean.
pub fn guided_reverse_step(
    y_h: &Tensor,
    t: usize,
    score: &Tensor,
    k: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let m = reverse_moments(y_h, t, score, sched)?;
    shifted_step(&m, k, t, rng)
}

/// Shared tail of [`guided_reverse_step`] for callers that already hold the
/// moments (the guidance gradient is evaluated at `m.mean`).
pub fn shifted_step(m: &ReverseMoments, k: &Tensor, t: usize, rng: &mut Rng) -> Result<Tensor> {
    check_same_shape(&m.mean, k, "guidance gradient")?;
    if !all_finite(k)? {
        return Err(Error::Numeric(format!("non-finite guidance gradient at t={t}")));
    }
    let mean = (&m.mean - (k * m.variance)?)?;
    add_noise(mean, m.variance, t, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn scalar_image(v: f32) -> Tensor {
        Tensor::full(v, (1, 1, 1, 1), &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn schedule_single_and_two_step() {
        let s = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
        assert_eq!(s.betas(), &[0.02]);
        assert!((s.alpha_bar(0) - 0.98).abs() < 1e-15);

        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        assert!((s.beta(0) - 0.1).abs() < 1e-15 && (s.beta(1) - 0.3).abs() < 1e-15);
        assert!((s.alpha_bar(0) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.63).abs() < 1e-15);
    }

    #[test]
    fn schedule_matches_extended_precision_product() {
        // 50-digit product of (1 - beta_i) over the default linear schedule.
        const ORACLE: f64 = 0.000040358297653756833148176351615541;
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(((s.alpha_bar(999) - ORACLE) / ORACLE).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        for (t, lo, hi) in [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.1, 1.0), (10, 0.3, 0.2), (10, -0.1, 0.2)] {
            assert!(matches!(NoiseSchedule::linear(t, lo, hi), Err(Error::Config(_))), "{t} {lo} {hi}");
        }
    }

    #[test]
    fn perturb_identity_and_zero_signal() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let y0 = Tensor::new(&[0.5f32, -0.25, 1.0], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[1.0f32, 2.0, -1.0], &Device::Cpu).unwrap();
        assert_eq!(values(&perturb_with(&y0, 1.0, &eps).unwrap()), values(&y0));

        let zero = y0.zeros_like().unwrap();
        let out = values(&perturb(&zero, 4, &eps, &s).unwrap());
        let sd = (1.0 - s.alpha_bar(4)).sqrt() as f32;
        for (o, e) in out.iter().zip([1.0f32, 2.0, -1.0]) {
            assert!((o - sd * e).abs() < 1e-7);
        }
        let bad = Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(perturb(&y0, 1, &bad, &s), Err(Error::Contract(_))));
        assert!(matches!(perturb(&y0, 10, &eps, &s), Err(Error::Contract(_))));
    }

    #[test]
    fn reverse_moment_arithmetic() {
        let s = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
        let m = reverse_moments(&scalar_image(0.0), 0, &scalar_image(0.0), &s).unwrap();
        assert_eq!(values(&m.mean), vec![0.0]);
        assert_eq!(m.variance, 0.02);
        let m = reverse_moments(&scalar_image(1.0), 0, &scalar_image(-1.0), &s).unwrap();
        assert!((values(&m.mean)[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn non_finite_score_is_rejected() {
        let s = NoiseSchedule::linear(4, 1e-4, 0.02).unwrap();
        let r = reverse_moments(&scalar_image(0.0), 1, &scalar_image(f32::NAN), &s);
        assert!(matches!(r, Err(Error::Numeric(_))));
        let r = guided_reverse_step(
            &scalar_image(0.0),
            1,
            &scalar_image(0.0),
            &scalar_image(f32::INFINITY),
            &s,
            &mut rng::stream(0, 0),
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn final_step_is_noiseless_and_steps_are_deterministic() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let y = Tensor::new(&[0.3f32, -0.7, 0.1, 0.9], &Device::Cpu).unwrap();
        let score = (&y * -1.0).unwrap();
        let m = reverse_moments(&y, 0, &score, &s).unwrap();
        let out = reverse_step(&y, 0, &score, &s, &mut rng::stream(1, 0)).unwrap();
        assert_eq!(values(&out), values(&m.mean));

        let a = reverse_step(&y, 20, &score, &s, &mut rng::stream(9, 3)).unwrap();
        let b = reverse_step(&y, 20, &score, &s, &mut rng::stream(9, 3)).unwrap();
        assert_eq!(values(&a), values(&b));
    }

    #[test]
    fn guided_step_shifts_mean_by_variance_times_k() {
        let s = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
        let y = scalar_image(0.4);
        let score = scalar_image(-0.4);
        let k = scalar_image(3.0);
        let plain = reverse_step(&y, 0, &score, &s, &mut rng::stream(5, 0)).unwrap();
        let guided = guided_reverse_step(&y, 0, &score, &k, &s, &mut rng::stream(5, 0)).unwrap();
        assert!((values(&guided)[0] - values(&plain)[0] + 0.06).abs() < 1e-6);
    }
}
