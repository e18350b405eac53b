//! DDPM machinery over flat `f64` buffers: schedules, the closed-form forward
//! marginal, posterior reverse steps, the ancestral sampling loop and
//! nearest-candidate guidance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Variance schedule. Arrays are indexed by `t - 1` for `t = 1..=t_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma2: Vec<f64>,
}

pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    make_schedule_kind(ScheduleKind::Linear, t_max, beta_start, beta_end)
}

pub fn make_schedule_kind(
    kind: ScheduleKind,
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::InvalidScheduleParams("t_max must be at least 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidScheduleParams(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma2 = (0..t_max)
        .map(|i| {
            if i == 0 {
                beta[0]
            } else {
                beta[i] * (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i])
            }
        })
        .collect();
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
        sigma2,
    })
}

impl NoiseSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::InvalidScheduleParams(format!(
                "step {t} outside 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(())
}

/// `sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`.
pub fn forward_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len(x0, eps)?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One reverse step. At `t = 1` the posterior mean is returned without noise.
pub fn posterior_step(
    x_t: &[f64],
    eps_pred: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_len(x_t, eps_pred)?;
    check_len(x_t, noise)?;
    sched.check_step(t)?;
    let beta = sched.beta(t);
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = if t > 1 { sched.sigma2(t).sqrt() } else { 0.0 };
    Ok(x_t
        .iter()
        .zip(eps_pred)
        .zip(noise)
        .map(|((x, e), z)| {
            let mean = inv_sqrt_alpha * (x - coef * e);
            if t > 1 {
                mean + sigma * z
            } else {
                mean
            }
        })
        .collect())
}

/// Mean squared error over all elements.
pub fn ddpm_loss(eps: &[f64], eps_pred: &[f64]) -> Result<f64> {
    check_len(eps, eps_pred)?;
    if eps.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = eps.iter().zip(eps_pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / eps.len() as f64)
}

/// A noise predictor `eps(x_t, t)`.
pub trait Denoiser {
    fn predict(&mut self, x_t: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl<F> Denoiser for F
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    fn predict(&mut self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self(x_t, t)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Ancestral sampling from `N(0, I)` down to `t = 1`. The optional guidance
/// hook sees the iterate after every reverse step together with the step
/// that produced it.
pub fn sample_loop<D, R>(
    denoiser: &mut D,
    len: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
    mut guidance: Option<&mut dyn FnMut(&mut [f64], usize) -> Result<()>>,
) -> Result<Vec<f64>>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    let mut x = standard_normal(rng, len);
    for t in (1..=sched.t_max).rev() {
        let eps = denoiser.predict(&x, t)?;
        if eps.len() != len {
            return Err(Error::shape(len, eps.len()));
        }
        let noise = if t > 1 {
            standard_normal(rng, len)
        } else {
            vec![0.0; len]
        };
        x = posterior_step(&x, &eps, t, sched, &noise)?;
        if let Some(g) = guidance.as_mut() {
            g(&mut x, t)?;
        }
    }
    Ok(x)
}

/// Exact `E[eps | x_t]` when every coordinate of `x0` is an independent
/// Gaussian `N(mu[i], s2[i])`.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianDenoiser {
    pub mu: Vec<f64>,
    pub s2: Vec<f64>,
    pub sched: NoiseSchedule,
}

pub fn analytic_gaussian_denoiser(mu: f64, s2: f64, sched: &NoiseSchedule) -> AnalyticGaussianDenoiser {
    AnalyticGaussianDenoiser {
        mu: vec![mu],
        s2: vec![s2],
        sched: sched.clone(),
    }
}

impl AnalyticGaussianDenoiser {
    pub fn diagonal(mu: Vec<f64>, s2: Vec<f64>, sched: &NoiseSchedule) -> Self {
        AnalyticGaussianDenoiser {
            mu,
            s2,
            sched: sched.clone(),
        }
    }

    pub fn eps(&self, x_t: f64, t: usize, dim: usize) -> f64 {
        let ab = self.sched.alpha_bar(t);
        let (mu, s2) = (self.mu[dim], self.s2[dim]);
        (1.0 - ab).sqrt() * (x_t - ab.sqrt() * mu) / (ab * s2 + 1.0 - ab)
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    /// Coordinates beyond the parameter vectors reuse them cyclically, so a
    /// scalar denoiser can be applied to a batch of independent draws.
    fn predict(&mut self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self.sched.check_step(t)?;
        let d = self.mu.len();
        Ok(x_t.iter().enumerate().map(|(i, &x)| self.eps(x, t, i % d)).collect())
    }
}

/// Index of the candidate nearest to `x` in Euclidean distance; ties go to
/// the lower index.
pub fn nearest_candidate(x: &[f64], candidates: &[Vec<f64>]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut best = (0, f64::INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        check_len(x, c)?;
        let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    Ok(best.0)
}

/// One gradient step of `½‖x - c*‖²` toward the nearest candidate `c*`.
pub fn guided_step(x: &[f64], candidates: &[Vec<f64>], strength: f64) -> Result<Vec<f64>> {
    if !(strength >= 0.0) {
        return Err(Error::InvalidConfig(format!("guidance strength {strength} < 0")));
    }
    let c = &candidates[nearest_candidate(x, candidates)?];
    Ok(x.iter().zip(c).map(|(a, b)| a - strength * (a - b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar, vec![0.5]);
        assert_eq!(s.sigma2, vec![0.5]);
    }

    #[test]
    fn two_step_schedule() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert_abs_diff_eq!(s.alpha_bar[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bar[1], 0.72, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sigma2[1], 0.2 * 0.1 / 0.28, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sigma2[1], 0.0714286, epsilon = 1e-7);
    }

    #[test]
    fn schedule_monotone_and_validated() {
        let s = make_schedule(100, 1e-4, 0.2).unwrap();
        assert!(s.beta.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bar.windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bar[0] > 0.999 && s.alpha_bar[99] < 1e-3);
        for (a, b, t) in [(0.0, 0.1, 10), (0.2, 0.1, 10), (0.1, 1.0, 10), (0.1, 0.2, 0)] {
            assert!(matches!(make_schedule(t, a, b), Err(Error::InvalidScheduleParams(_))));
        }
    }

    #[test]
    fn forward_sample_arithmetic() {
        let s = make_schedule(1, 0.75, 0.75).unwrap();
        assert_abs_diff_eq!(s.alpha_bar[0], 0.25);
        let out = forward_sample(&[2.0], 1, &[1.0], &s).unwrap();
        assert_abs_diff_eq!(out[0], 1.0 + 0.75_f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(out[0], 1.8660, epsilon = 1e-4);
        let out = forward_sample(&[2.0, -1.0], 1, &[0.0, 0.0], &s).unwrap();
        assert_eq!(out, vec![0.5 * 2.0, 0.5 * -1.0]);
        let tiny = make_schedule(1, 1e-12, 1e-12).unwrap();
        let out = forward_sample(&[3.0], 1, &[1.0], &tiny).unwrap();
        assert_abs_diff_eq!(out[0], 3.0, epsilon = 1e-5);
        assert!(matches!(forward_sample(&[1.0], 1, &[1.0, 2.0], &s), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn posterior_mean_arithmetic() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        let out = posterior_step(&[1.0], &[1.0], 2, &s, &[0.0]).unwrap();
        let expected = (1.0 / 0.8_f64.sqrt()) * (1.0 - 0.2 / 0.28_f64.sqrt());
        assert_abs_diff_eq!(out[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0], 0.6955, epsilon = 1e-4);
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = make_schedule(3, 0.1, 0.3).unwrap();
        let a = posterior_step(&[0.5], &[0.2], 1, &s, &[5.0]).unwrap();
        let b = posterior_step(&[0.5], &[0.2], 1, &s, &[-5.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_step_in_small_beta_limit() {
        let s = make_schedule(1, 1e-15, 1e-15).unwrap();
        let out = posterior_step(&[0.7, -2.0], &[0.0, 0.0], 1, &s, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(out[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_values() {
        assert_eq!(ddpm_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ddpm_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(ddpm_loss(&[1.0, -1.0, 2.0], &[0.0, 0.0, 0.0]).unwrap(), 2.0);
        assert!(ddpm_loss(&[1.0], &[]).is_err());
    }

    #[test]
    fn analytic_denoiser_limits() {
        let s = make_schedule(10, 0.01, 0.5).unwrap();
        let standard = analytic_gaussian_denoiser(0.0, 1.0, &s);
        for t in 1..=10 {
            let ab = s.alpha_bar(t);
            assert_abs_diff_eq!(standard.eps(0.8, t, 0), (1.0 - ab).sqrt() * 0.8, epsilon = 1e-12);
        }
        let g = analytic_gaussian_denoiser(3.0, 4.0, &s);
        let mode = s.alpha_bar(4).sqrt() * 3.0;
        assert_eq!(g.eps(mode, 4, 0), 0.0);
        let noisy = make_schedule(1, 0.999_999_999, 0.999_999_999).unwrap();
        let g = analytic_gaussian_denoiser(3.0, 4.0, &noisy);
        assert_abs_diff_eq!(g.eps(1.7, 1, 0), 1.7, epsilon = 1e-4);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = make_schedule(20, 1e-3, 0.3).unwrap();
        let run = |seed| {
            let mut d = analytic_gaussian_denoiser(1.0, 0.5, &s);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_loop(&mut d, 16, &s, &mut rng, None).unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn zero_denoiser_single_step() {
        let s = make_schedule(1, 1.0 - 1e-9, 1.0 - 1e-9).unwrap();
        let mut zero = |x: &[f64], _t: usize| -> Result<Vec<f64>> { Ok(vec![0.0; x.len()]) };
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = sample_loop(&mut zero, 4, &s, &mut r1, None).unwrap();
        let b = sample_loop(&mut zero, 4, &s, &mut r2, None).unwrap();
        assert_eq!(a, b);
        let mut r3 = ChaCha8Rng::seed_from_u64(3);
        let prior = standard_normal(&mut r3, 4);
        for (x, z) in a.iter().zip(prior) {
            assert_abs_diff_eq!(*x, z / (1e-9_f64).sqrt(), epsilon = 1e-6 * x.abs());
        }
    }

    #[test]
    fn identity_guidance_changes_nothing() {
        let s = make_schedule(30, 1e-3, 0.3).unwrap();
        let mut d = analytic_gaussian_denoiser(2.0, 1.0, &s);
        let plain = sample_loop(&mut d, 8, &s, &mut ChaCha8Rng::seed_from_u64(11), None).unwrap();
        let mut hook = |_x: &mut [f64], _t: usize| -> Result<()> { Ok(()) };
        let guided = sample_loop(&mut d, 8, &s, &mut ChaCha8Rng::seed_from_u64(11), Some(&mut hook)).unwrap();
        assert_eq!(plain, guided);
    }

    #[test]
    fn guided_step_examples() {
        let cands = vec![vec![0.0, 0.0], vec![4.0, 0.0]];
        assert_eq!(guided_step(&[2.0, 0.0], &cands, 0.5).unwrap(), vec![1.0, 0.0]);
        assert_eq!(guided_step(&[4.0, 0.0], &cands, 0.7).unwrap(), vec![4.0, 0.0]);
        assert_eq!(guided_step(&[3.0, 1.0], &cands, 0.0).unwrap(), vec![3.0, 1.0]);
        assert!(matches!(guided_step(&[1.0], &[], 0.5), Err(Error::EmptyCandidates)));
    }
}
