//! Closed-form diffusion process: variance schedules, forward noising,
//! posterior mean, reverse sampling, and the noise-prediction loss.
//!
//! All timestep arguments are 1-based (t in 1..=T). Every stochastic input
//! (noise, reverse draws) is an explicit argument, so each operation is a
//! pure function.

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Serializable schedule parameters; the full table is always rebuilt from
/// these, never persisted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            t_max: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<VarianceSchedule> {
        build_schedule(self.t_max, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    pub params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

impl VarianceSchedule {
    pub fn t_max(&self) -> usize {
        self.params.t_max
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max() {
            return Err(Error::invalid(format!(
                "timestep {t} outside schedule range 1..={}",
                self.t_max()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// Reverse-step variance, the fixed (unlearned) choice sigma_t^2 = beta_t.
    pub fn sigma2(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.sigma2[t - 1])
    }
}

pub fn build_schedule(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<VarianceSchedule> {
    if t_max < 1 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "betas must satisfy 0 < start <= end < 1; got start={beta_start}, end={beta_end}"
        )));
    }
    let denom = (t_max.max(2) - 1) as f64;
    let mut beta = Vec::with_capacity(t_max);
    let mut alpha = Vec::with_capacity(t_max);
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut running = 1.0;
    for t in 1..=t_max {
        let b = beta_start + (t - 1) as f64 * (beta_end - beta_start) / denom;
        debug_assert!(b > 0.0 && b < 1.0);
        beta.push(b);
        alpha.push(1.0 - b);
        running *= 1.0 - b;
        alpha_bar.push(running);
    }
    Ok(VarianceSchedule {
        params: ScheduleParams {
            t_max,
            beta_start,
            beta_end,
            kind,
        },
        sigma2: beta.clone(),
        beta,
        alpha,
        alpha_bar,
    })
}

fn check_same_shape<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// One forward Markov transition: sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps.
pub fn forward_step<D: Dimension>(
    s: &VarianceSchedule,
    x_prev: &Array<f64, D>,
    t: usize,
    eps: &Array<f64, D>,
) -> Result<Array<f64, D>> {
    check_same_shape(x_prev, eps, "forward_step x_prev vs eps")?;
    let b = s.beta(t)?;
    let (ca, cb) = ((1.0 - b).sqrt(), b.sqrt());
    let mut out = x_prev.clone();
    out.zip_mut_with(eps, |x, &e| *x = ca * *x + cb * e);
    Ok(out)
}

/// Closed-form jump to timestep t: sqrt(abar_t) x_0 + sqrt(1-abar_t) eps.
pub fn forward_noise<D: Dimension>(
    s: &VarianceSchedule,
    x0: &Array<f64, D>,
    t: usize,
    eps: &Array<f64, D>,
) -> Result<Array<f64, D>> {
    check_same_shape(x0, eps, "forward_noise x0 vs eps")?;
    let ab = s.alpha_bar(t)?;
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0.clone();
    out.zip_mut_with(eps, |x, &e| *x = ca * *x + cb * e);
    Ok(out)
}

/// Mean of the reverse transition given the predicted noise.
pub fn posterior_mean<D: Dimension>(
    s: &VarianceSchedule,
    x_t: &Array<f64, D>,
    t: usize,
    eps_pred: &Array<f64, D>,
) -> Result<Array<f64, D>> {
    check_same_shape(x_t, eps_pred, "posterior_mean x_t vs eps_pred")?;
    let a = s.alpha(t)?;
    let ab = s.alpha_bar(t)?;
    let inv_sqrt_a = 1.0 / a.sqrt();
    let coeff = (1.0 - a) / (1.0 - ab).sqrt();
    let mut out = x_t.clone();
    out.zip_mut_with(eps_pred, |x, &e| *x = inv_sqrt_a * (*x - coeff * e));
    Ok(out)
}

/// One reverse sampling step. The caller supplies the standard-normal draw z;
/// the final step (t=1) must be noiseless, which is enforced here.
pub fn reverse_step<D: Dimension>(
    s: &VarianceSchedule,
    x_t: &Array<f64, D>,
    t: usize,
    eps_pred: &Array<f64, D>,
    z: &Array<f64, D>,
) -> Result<Array<f64, D>> {
    check_same_shape(x_t, z, "reverse_step x_t vs z")?;
    if t == 1 && z.iter().any(|&v| v != 0.0) {
        return Err(Error::invalid("reverse_step at t=1 requires z = 0"));
    }
    let sigma = s.sigma2(t)?.sqrt();
    let mut out = posterior_mean(s, x_t, t, eps_pred)?;
    out.zip_mut_with(z, |x, &n| *x += sigma * n);
    Ok(out)
}

/// Mean squared error between true and predicted noise.
pub fn diffusion_loss<D: Dimension>(
    eps_true: &Array<f64, D>,
    eps_pred: &Array<f64, D>,
) -> Result<f64> {
    check_same_shape(eps_true, eps_pred, "diffusion_loss eps_true vs eps_pred")?;
    let n = eps_true.len();
    if n == 0 {
        return Err(Error::invalid("diffusion_loss over empty arrays"));
    }
    let mut acc = 0.0;
    for (a, b) in eps_true.iter().zip(eps_pred.iter()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::{arr1, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn default_schedule() -> VarianceSchedule {
        ScheduleParams::default().build().unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        assert_eq!(s.beta(1).unwrap(), 0.1);
        assert_abs_diff_eq!(s.alpha_bar(1).unwrap(), 0.9, epsilon = 1e-15);
        assert!(s.beta(2).is_err());
        assert!(s.beta(0).is_err());
    }

    #[test]
    fn constant_beta_cumulative_product() {
        let s = build_schedule(3, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(3).unwrap(), 0.729, epsilon = 1e-15);
    }

    #[test]
    fn thousand_step_signal_retention() {
        // Frozen from an independent cumulative-product computation.
        let s = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        assert_relative_eq!(
            s.alpha_bar(1000).unwrap(),
            4.035829765376e-5,
            max_relative = 1e-9
        );
    }

    #[test]
    fn schedule_rejects_bad_betas() {
        assert!(build_schedule(10, 0.0, 0.1, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.2, 0.1, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
        assert!(build_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn forward_step_scalar_cases() {
        let s = build_schedule(1, 0.19, 0.19, ScheduleKind::Linear).unwrap();
        let x = arr1(&[2.0]);
        let zero = arr1(&[0.0]);
        let one = arr1(&[1.0]);
        let noiseless = forward_step(&s, &x, 1, &zero).unwrap();
        assert_abs_diff_eq!(noiseless[0], 0.81f64.sqrt() * 2.0, epsilon = 1e-15);
        // Frozen scalar oracle: 0.9*2 + sqrt(0.19).
        let noisy = forward_step(&s, &x, 1, &one).unwrap();
        assert_abs_diff_eq!(noisy[0], 2.2358898943540675, epsilon = 1e-14);

        let s04 = build_schedule(1, 0.04, 0.04, ScheduleKind::Linear).unwrap();
        let pure = forward_step(&s04, &zero, 1, &one).unwrap();
        assert_abs_diff_eq!(pure[0], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn forward_noise_scalar_cases() {
        // alpha_bar(1) = 1 - 0.36 = 0.64 with a one-step schedule.
        let s = build_schedule(1, 0.36, 0.36, ScheduleKind::Linear).unwrap();
        let x0 = arr1(&[1.0]);
        let eps = arr1(&[0.5]);
        let xt = forward_noise(&s, &x0, 1, &eps).unwrap();
        assert_abs_diff_eq!(xt[0], 1.1, epsilon = 1e-15);
        let mean_only = forward_noise(&s, &x0, 1, &arr1(&[0.0])).unwrap();
        assert_abs_diff_eq!(mean_only[0], 0.8, epsilon = 1e-15);
        let noise_only = forward_noise(&s, &arr1(&[0.0]), 1, &eps).unwrap();
        assert_abs_diff_eq!(noise_only[0], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn posterior_mean_matches_frozen_scalar() {
        // Needs alpha_t = 0.99 and abar_t = 0.5: T=2 with beta = (0.01, ...)
        // cannot hit both, so synthesize the schedule directly.
        let s = VarianceSchedule {
            params: ScheduleParams {
                t_max: 2,
                beta_start: 0.01,
                beta_end: 0.01,
                kind: ScheduleKind::Linear,
            },
            beta: vec![0.01, 0.01],
            alpha: vec![0.99, 0.99],
            alpha_bar: vec![0.99, 0.5],
            sigma2: vec![0.01, 0.01],
        };
        let m = posterior_mean(&s, &arr1(&[1.0]), 2, &arr1(&[1.0])).unwrap();
        assert_abs_diff_eq!(m[0], 0.9908244341688381, epsilon = 1e-14);
        let no_noise = posterior_mean(&s, &arr1(&[1.0]), 2, &arr1(&[0.0])).unwrap();
        assert_abs_diff_eq!(no_noise[0], 1.0 / 0.99f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn one_step_inversion_is_exact() {
        let s = default_schedule();
        let x0 = arr1(&[0.3, -1.7, 2.5, 0.0]);
        let eps = arr1(&[1.0, -0.5, 0.25, 2.0]);
        let x1 = forward_noise(&s, &x0, 1, &eps).unwrap();
        let rec = posterior_mean(&s, &x1, 1, &eps).unwrap();
        for (r, x) in rec.iter().zip(x0.iter()) {
            assert_abs_diff_eq!(r, x, epsilon = 1e-14);
        }
    }

    #[test]
    fn reverse_step_adds_scaled_noise() {
        let s = build_schedule(2, 0.04, 0.04, ScheduleKind::Linear).unwrap();
        let x = arr1(&[1.0]);
        let eps = arr1(&[0.0]);
        let mean = posterior_mean(&s, &x, 2, &eps).unwrap();
        let stepped = reverse_step(&s, &x, 2, &eps, &arr1(&[1.0])).unwrap();
        assert_abs_diff_eq!(stepped[0], mean[0] + 0.2, epsilon = 1e-15);
        let det = reverse_step(&s, &x, 2, &eps, &arr1(&[0.0])).unwrap();
        assert_abs_diff_eq!(det[0], mean[0], epsilon = 1e-15);
    }

    #[test]
    fn reverse_step_final_timestep_requires_zero_draw() {
        let s = default_schedule();
        let x = arr1(&[1.0]);
        let eps = arr1(&[0.0]);
        assert!(reverse_step(&s, &x, 1, &eps, &arr1(&[0.5])).is_err());
        assert!(reverse_step(&s, &x, 1, &eps, &arr1(&[0.0])).is_ok());
    }

    #[test]
    fn loss_cases() {
        let a = arr1(&[0.0, 1.0]);
        let b = arr1(&[1.0, 1.0]);
        assert_abs_diff_eq!(diffusion_loss(&a, &b).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        let c = arr1(&[3.0, 3.0, 3.0]);
        let z = arr1(&[0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(diffusion_loss(&z, &c).unwrap(), 9.0, epsilon = 1e-15);
        assert!(diffusion_loss(&a, &c).is_err());
    }

    #[test]
    fn iterated_forward_matches_closed_form_moments() {
        // t applications of forward_step with fresh noise must land on the
        // closed-form marginal: mean sqrt(abar_t) x0, variance 1 - abar_t.
        let s = build_schedule(8, 0.05, 0.2, ScheduleKind::Linear).unwrap();
        let t = 6;
        let x0 = 1.5;
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..draws {
            let mut x = arr1(&[x0]);
            for step in 1..=t {
                let eps: f64 = rng.sample(StandardNormal);
                x = forward_step(&s, &x, step, &arr1(&[eps])).unwrap();
            }
            sum += x[0];
            sumsq += x[0] * x[0];
        }
        let n = draws as f64;
        let mean = sum / n;
        let var = sumsq / n - mean * mean;
        let ab = s.alpha_bar(t).unwrap();
        let expect_mean = ab.sqrt() * x0;
        let expect_var = 1.0 - ab;
        let se = (expect_var / n).sqrt();
        assert!(
            (mean - expect_mean).abs() <= 3.0 * se,
            "mean {mean} vs {expect_mean} (se {se})"
        );
        assert!(
            (var - expect_var).abs() <= 0.02 * expect_var,
            "var {var} vs {expect_var}"
        );
    }

    fn random_array(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        Array1::from_iter((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
    }

    #[test]
    fn reconstruction_identity_all_timesteps() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..=s.t_max() {
            let x0 = random_array(&mut rng, 8);
            let eps = random_array(&mut rng, 8);
            let xt = forward_noise(&s, &x0, t, &eps).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            let rec = xt
                .iter()
                .zip(eps.iter())
                .map(|(x, e)| (x - (1.0 - ab).sqrt() * e) / ab.sqrt())
                .collect::<Vec<_>>();
            for (r, x) in rec.iter().zip(x0.iter()) {
                let denom = x.abs().max(1.0);
                assert!(
                    ((r - x) / denom).abs() <= 1e-6,
                    "t={t}: {r} vs {x}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn schedule_invariants_hold(
            t_max in 1usize..600,
            beta_start in 1e-6f64..0.01,
            spread in 0.0f64..0.05,
        ) {
            let beta_end = beta_start + spread;
            let s = build_schedule(t_max, beta_start, beta_end, ScheduleKind::Linear).unwrap();
            let mut prev_ab = f64::INFINITY;
            let mut prev_snr = f64::INFINITY;
            for t in 1..=t_max {
                let b = s.beta(t).unwrap();
                prop_assert!(b > 0.0 && b < 1.0);
                prop_assert_eq!(s.alpha(t).unwrap(), 1.0 - b);
                prop_assert_eq!(s.sigma2(t).unwrap(), b);
                let ab = s.alpha_bar(t).unwrap();
                prop_assert!(ab < prev_ab, "alpha_bar not strictly decreasing at t={}", t);
                let snr = ab / (1.0 - ab);
                prop_assert!(snr < prev_snr, "snr not strictly decreasing at t={}", t);
                prev_ab = ab;
                prev_snr = snr;
            }
            prop_assert_eq!(s.alpha_bar(1).unwrap(), s.alpha(1).unwrap());
        }

        #[test]
        fn reconstruction_inverts_forward_noise(
            seed in 0u64..1000,
            t in 1usize..=500,
        ) {
            let s = default_schedule();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = random_array(&mut rng, 4);
            let eps = random_array(&mut rng, 4);
            let xt = forward_noise(&s, &x0, t, &eps).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            for i in 0..4 {
                let rec = (xt[i] - (1.0 - ab).sqrt() * eps[i]) / ab.sqrt();
                let denom = x0[i].abs().max(1.0);
                prop_assert!(((rec - x0[i]) / denom).abs() <= 1e-6);
            }
        }
    }
}
