use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use vstain_core::guidance::{energy_grad_at, QuadraticEnergy};
use vstain_core::rng;
use vstain_core::score::{gmm_score, GmmOracle};
use vstain_core::sde::{guided_reverse_step, perturb, reverse_moments, reverse_step};
use vstain_core::NoiseSchedule;

fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn from_vec(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::from_vec(v, (n, 1, 1, 1), &Device::Cpu).unwrap()
}

#[test]
fn perturb_matches_marginal_moments() {
    let s = default_schedule();
    let t = 999;
    let y0 = Tensor::new(&[0.8f64, -0.3, 0.0, 1.0], &Device::Cpu).unwrap();
    let n = 10_000;
    let mut r = rng::stream(11, 0);
    let mut sum = vec![0.0; 4];
    let mut sq = vec![0.0; 4];
    for _ in 0..n {
        let eps = rng::normal_tensor(&mut r, 4, DType::F64).unwrap();
        for (i, v) in values(&perturb(&y0, t, &eps, &s).unwrap()).into_iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let var_true = 1.0 - s.alpha_bar(t);
    for (i, y) in [0.8, -0.3, 0.0, 1.0].into_iter().enumerate() {
        let mean = sum[i] / n as f64;
        let var = (sq[i] - n as f64 * mean * mean) / (n - 1) as f64;
        let se = (var_true / n as f64).sqrt();
        assert!((mean - s.alpha_bar(t).sqrt() * y).abs() < 4.0 * se, "pixel {i}: mean {mean}");
        assert!((var / var_true - 1.0).abs() < 0.05, "pixel {i}: var {var}");
    }
}

#[test]
fn reverse_step_noise_has_variance_beta() {
    let s = default_schedule();
    let t = 500;
    let y = from_vec(vec![0.3; 10_000]);
    let score = from_vec(vec![-0.1; 10_000]);
    let m = reverse_moments(&y, t, &score, &s).unwrap();
    let out = reverse_step(&y, t, &score, &s, &mut rng::stream(3, 0)).unwrap();
    let d: Vec<f64> = values(&(out - &m.mean).unwrap());
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
    assert!((var / m.variance - 1.0).abs() < 0.05, "{var} vs {}", m.variance);
}

#[test]
fn standard_normal_chain_recovers_unit_variance() {
    // For N(0, 1) data every perturbed marginal is N(0, 1), so the score is -y.
    let s = default_schedule();
    let mut r = rng::stream(5, 0);
    let mut y = rng::normal_tensor(&mut r, (10_000, 1, 1, 1), DType::F64).unwrap();
    for t in (0..s.steps()).rev() {
        let score = y.neg().unwrap();
        y = reverse_step(&y, t, &score, &s, &mut r).unwrap();
    }
    let v = values(&y);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    assert!((var - 1.0).abs() < 0.05, "{var}");
}

/// Runs the reverse chain from `N(0, 1)` with the exact mixture score.
fn sample_gmm(gmm: &GmmOracle, n: usize, seed: u64) -> Vec<f64> {
    let s = default_schedule();
    let mut r = rng::stream(seed, 0);
    let mut y = rng::normal_tensor(&mut r, (n, 1, 1, 1), DType::F64).unwrap();
    for t in (0..s.steps()).rev() {
        let score: Vec<f64> = values(&y).into_iter().map(|v| gmm_score(gmm, &[v], t, &s)[0]).collect();
        y = reverse_step(&y, t, &from_vec(score), &s, &mut r).unwrap();
    }
    values(&y)
}

#[test]
fn exact_mixture_score_recovers_component_weights() {
    let gmm = GmmOracle::new(vec![0.3, 0.7], vec![vec![-2.0], vec![2.0]], 0.25).unwrap();
    let samples = sample_gmm(&gmm, 10_000, 21);
    let right = samples.iter().filter(|&&v| v > 0.0).count() as f64 / samples.len() as f64;
    let tv = 0.5 * ((1.0 - right - 0.3).abs() + (right - 0.7).abs());
    assert!(tv <= 0.05, "tv {tv}");
}

#[test]
fn mixture_score_matches_finite_differences() {
    let gmm = GmmOracle::new(
        vec![0.2, 0.5, 0.3],
        vec![vec![-1.0, 0.5], vec![0.7, -0.2], vec![2.0, 1.5]],
        0.4,
    )
    .unwrap();
    let mut r = rng::stream(8, 0);
    for _ in 0..5 {
        let y: Vec<f64> = rng::normal_vec(&mut r, 2).into_iter().map(|v| v as f64 * 1.5).collect();
        let a = 0.6;
        let s = gmm.score_at(&y, a);
        for i in 0..2 {
            let h = 1e-5;
            let (mut p, mut m) = (y.clone(), y.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (gmm.log_density_at(&p, a) - gmm.log_density_at(&m, a)) / (2.0 * h);
            assert!(((fd - s[i]) / s[i].abs().max(1e-3)).abs() < 1e-6, "{fd} vs {}", s[i]);
        }
    }
}

#[test]
fn quadratic_guidance_single_step_matches_gaussian_product() {
    // N(mu, S) times exp(-w/2 (y - c)^2) has mean (mu + S w c) / (1 + S w);
    // the mean-shifted kernel agrees to first order in S w.
    let s = default_schedule();
    let t = 800;
    let (w, c) = (1.0, 1.5);
    let n = 10_000;
    let y = from_vec(vec![0.4; n]);
    let score = from_vec(vec![-0.4; n]);
    let m = reverse_moments(&y, t, &score, &s).unwrap();
    let energy = QuadraticEnergy { center: from_vec(vec![c; n]), weight: w };
    let k = energy_grad_at(&energy, &m.mean, t, 1.0, &mut rng::stream(0, 0)).unwrap().k;
    let out = values(&guided_reverse_step(&y, t, &score, &k, &s, &mut rng::stream(4, 0)).unwrap());
    let mean = out.iter().sum::<f64>() / n as f64;
    let mu = values(&m.mean)[0];
    let sigma = m.variance;
    let want = (mu + sigma * w * c) / (1.0 + sigma * w);
    assert!(((mean - want) / want).abs() < 0.02, "{mean} vs {want}");
}

#[test]
fn quadratic_guidance_chain_matches_closed_form_posterior() {
    // With N(0, 1) data the reverse step is a Langevin step of size beta/2
    // on N(0, 1) exp(-2 M); its mean is 2 w c / (1 + 2 w).
    let s = default_schedule();
    let (w, c) = (0.5, 1.2);
    let n = 10_000;
    let mut r = rng::stream(9, 0);
    let mut y = rng::normal_tensor(&mut r, (n, 1, 1, 1), DType::F64).unwrap();
    let energy = QuadraticEnergy { center: from_vec(vec![c; n]), weight: w };
    for t in (0..s.steps()).rev() {
        let score = y.neg().unwrap();
        let m = reverse_moments(&y, t, &score, &s).unwrap();
        let k = energy_grad_at(&energy, &m.mean, t, 1.0, &mut r).unwrap().k;
        y = guided_reverse_step(&y, t, &score, &k, &s, &mut r).unwrap();
    }
    let v = values(&y);
    let mean = v.iter().sum::<f64>() / n as f64;
    let want = 2.0 * w * c / (1.0 + 2.0 * w);
    assert!(((mean - want) / want).abs() < 0.02, "{mean} vs {want}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedules_are_monotone(steps in 1usize..2000, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
        let hi = (lo + span).min(0.999);
        let s = NoiseSchedule::linear(steps, lo, hi).unwrap();
        prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        prop_assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        prop_assert!((s.alpha_bar(0) - (1.0 - s.beta(0))).abs() < 1e-15);
        prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn perturb_is_affine_in_signal_and_noise(t in 0usize..1000, y in -1.0f64..1.0, e in -3.0f64..3.0) {
        let s = default_schedule();
        let out = values(&perturb(&from_vec(vec![y]), t, &from_vec(vec![e]), &s).unwrap())[0];
        let want = s.alpha_bar(t).sqrt() * y + (1.0 - s.alpha_bar(t)).sqrt() * e;
        prop_assert!((out - want).abs() < 1e-12);
    }

    #[test]
    fn zero_guidance_is_bit_identical(seed in any::<u64>(), t in 0usize..1000, y in -2.0f32..2.0, sc in -2.0f32..2.0) {
        let s = default_schedule();
        let y = Tensor::full(y, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let score = Tensor::full(sc, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let zero = y.zeros_like().unwrap();
        let a = reverse_step(&y, t, &score, &s, &mut rng::stream(seed, 0)).unwrap();
        let b = guided_reverse_step(&y, t, &score, &zero, &s, &mut rng::stream(seed, 0)).unwrap();
        let (a, b): (Vec<f32>, Vec<f32>) = (a.flatten_all().unwrap().to_vec1().unwrap(), b.flatten_all().unwrap().to_vec1().unwrap());
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn guidance_shift_is_linear(seed in any::<u64>(), t in 1usize..1000, k1 in -5.0f64..5.0, k2 in -5.0f64..5.0) {
        let s = default_schedule();
        let y = from_vec(vec![0.2, -0.4, 0.9]);
        let score = from_vec(vec![-0.1, 0.3, 0.0]);
        let zero = y.zeros_like().unwrap();
        let k = from_vec(vec![k1 + k2; 3]);
        let base = values(&guided_reverse_step(&y, t, &score, &zero, &s, &mut rng::stream(seed, 0)).unwrap());
        let shifted = values(&guided_reverse_step(&y, t, &score, &k, &s, &mut rng::stream(seed, 0)).unwrap());
        for (a, b) in shifted.iter().zip(&base) {
            prop_assert!((a - b + s.beta(t) * (k1 + k2)).abs() < 1e-12);
        }
    }
}
