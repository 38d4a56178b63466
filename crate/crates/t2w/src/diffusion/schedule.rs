//! Forward-process constants: linear beta schedule, cumulative signal
//! fractions, and posterior variances (with the step-zero cumulative product
//! defined as 1, so the variance of the final reverse step is exactly 0).

use super::DiffusionError;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub n_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior_variance: Vec<f64>,
}

impl NoiseSchedule {
    /// 1-indexed step accessors, matching the process notation.
    pub fn beta_at(&self, n: usize) -> f64 {
        self.beta[n - 1]
    }

    pub fn alpha_at(&self, n: usize) -> f64 {
        self.alpha[n - 1]
    }

    pub fn alpha_bar_at(&self, n: usize) -> f64 {
        self.alpha_bar[n - 1]
    }

    pub fn posterior_variance_at(&self, n: usize) -> f64 {
        self.posterior_variance[n - 1]
    }

    pub fn check_step(&self, n: usize) -> Result<(), DiffusionError> {
        if n == 0 || n > self.n_steps {
            return Err(DiffusionError::StepOutOfRange { n, n_steps: self.n_steps });
        }
        Ok(())
    }
}

/// Linear beta schedule over `n_steps` steps.
pub fn make_schedule(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    if n_steps == 0 {
        return Err(DiffusionError::BadSchedule { detail: "step count must be positive".into() });
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadSchedule {
            detail: format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"),
        });
    }
    let beta: Vec<f64> = if n_steps == 1 {
        vec![beta_start]
    } else {
        (0..n_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n_steps - 1) as f64)
            .collect()
    };
    from_betas(beta)
}

/// Two-phase schedule: a low-noise tail over the first 15% of steps (the
/// reverse chain's final polish, where injected posterior noise cannot be
/// re-identified and must simply be small), then a linear ramp that carries
/// the signal-to-noise sweep. The tail uses `beta_start`; the ramp runs from
/// `beta_end / 5` to `beta_end`.
pub fn make_two_phase_schedule(
    n_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if n_steps == 0 {
        return Err(DiffusionError::BadSchedule { detail: "step count must be positive".into() });
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadSchedule {
            detail: format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"),
        });
    }
    let tail = (n_steps as f64 * 0.15).round() as usize;
    let ramp_lo = beta_end / 5.0;
    let ramp_len = (n_steps - tail).max(1);
    let beta: Vec<f64> = (0..n_steps)
        .map(|i| {
            if i < tail {
                beta_start
            } else {
                let t = (i - tail) as f64 / (ramp_len.saturating_sub(1).max(1)) as f64;
                ramp_lo + (beta_end - ramp_lo) * t
            }
        })
        .collect();
    from_betas(beta)
}

/// Log-linear betas from `beta_start` to `beta_end`: the per-step noise
/// decays geometrically toward step 1, so the late reverse steps tighten
/// gently instead of outrunning the chain's own accuracy.
pub fn make_geometric_schedule(
    n_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if n_steps == 0 {
        return Err(DiffusionError::BadSchedule { detail: "step count must be positive".into() });
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadSchedule {
            detail: format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"),
        });
    }
    let ratio = beta_end / beta_start;
    let beta: Vec<f64> = (0..n_steps)
        .map(|i| {
            let t = if n_steps == 1 { 0.0 } else { i as f64 / (n_steps - 1) as f64 };
            beta_start * ratio.powf(t)
        })
        .collect();
    from_betas(beta)
}

/// Flat betas at `beta_end` with a geometric decay over the first 15% of
/// steps down to `beta_start`.
pub fn make_geo_tail_schedule(
    n_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if n_steps == 0 {
        return Err(DiffusionError::BadSchedule { detail: "step count must be positive".into() });
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadSchedule {
            detail: format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"),
        });
    }
    let tail = ((n_steps as f64 * 0.15).round() as usize).max(1);
    let ratio = beta_end / beta_start;
    let beta: Vec<f64> = (0..n_steps)
        .map(|i| {
            if i + 1 >= tail {
                beta_end
            } else {
                let t = i as f64 / (tail - 1).max(1) as f64;
                beta_start * ratio.powf(t)
            }
        })
        .collect();
    from_betas(beta)
}

/// Betas near zero for the first `1 - hot_frac` of steps, then flat at the
/// level that drives the cumulative signal to `terminal` over the hot zone.
/// Concentrates the generative sweep into few steps; the long quiet tail
/// only polishes.
pub fn make_burst_schedule(
    n_steps: usize,
    quiet_beta: f64,
    hot_frac: f64,
    terminal: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if n_steps == 0 {
        return Err(DiffusionError::BadSchedule { detail: "step count must be positive".into() });
    }
    if !(quiet_beta > 0.0 && quiet_beta < 1.0 && hot_frac > 0.0 && hot_frac <= 1.0 && terminal > 0.0 && terminal < 1.0) {
        return Err(DiffusionError::BadSchedule { detail: "invalid burst parameters".into() });
    }
    let hot = ((n_steps as f64 * hot_frac).round() as usize).clamp(1, n_steps);
    let quiet = n_steps - hot;
    // (1-q)^quiet * (1-b)^hot = terminal
    let quiet_log = (1.0 - quiet_beta).ln() * quiet as f64;
    let hot_beta = 1.0 - ((terminal.ln() - quiet_log) / hot as f64).exp();
    if !(hot_beta > 0.0 && hot_beta < 1.0) {
        return Err(DiffusionError::BadSchedule { detail: "burst terminal unreachable".into() });
    }
    let beta: Vec<f64> =
        (0..n_steps).map(|i| if i < quiet { quiet_beta } else { hot_beta }).collect();
    from_betas(beta)
}

/// Squared-cosine signal schedule: tiny noise increments near step 1 (the
/// reverse chain's final polish) with the signal-to-noise sweep spread over
/// the middle of the chain.
pub fn make_cosine_schedule(n_steps: usize) -> Result<NoiseSchedule, DiffusionError> {
    if n_steps == 0 {
        return Err(DiffusionError::BadSchedule { detail: "step count must be positive".into() });
    }
    let s = 0.008;
    let f = |t: f64| ((t / n_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let f0 = f(0.0);
    let mut beta = Vec::with_capacity(n_steps);
    let mut prev = 1.0;
    for n in 1..=n_steps {
        let bar = (f(n as f64) / f0).clamp(1e-8, 1.0);
        beta.push((1.0 - bar / prev).clamp(1e-8, 0.999));
        prev = bar;
    }
    from_betas(beta)
}

fn from_betas(beta: Vec<f64>) -> Result<NoiseSchedule, DiffusionError> {
    let n_steps = beta.len();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(n_steps);
    let mut product = 1.0;
    for &a in &alpha {
        product *= a;
        alpha_bar.push(product);
    }
    let posterior_variance: Vec<f64> = (0..n_steps)
        .map(|i| {
            let bar_prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - bar_prev) / (1.0 - alpha_bar[i]) * beta[i]
        })
        .collect();
    Ok(NoiseSchedule { n_steps, beta, alpha, alpha_bar, posterior_variance })
}

/// `theta_n = sqrt(alpha_bar_n) theta_0 + sqrt(1 - alpha_bar_n) eps`.
pub fn forward_sample(
    theta0: &[f64],
    n: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check_step(n)?;
    assert_eq!(theta0.len(), eps.len(), "noise length mismatch");
    let bar = schedule.alpha_bar_at(n);
    let signal = bar.sqrt();
    let noise = (1.0 - bar).sqrt();
    Ok(theta0.iter().zip(eps).map(|(t, e)| signal * t + noise * e).collect())
}

/// The noise implied by the marginal at step `n` for a known clean vector:
/// `(theta_n - sqrt(alpha_bar_n) theta_0) / sqrt(1 - alpha_bar_n)`.
pub fn implied_noise(theta0: &[f64], theta_n: &[f64], n: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let bar = schedule.alpha_bar_at(n);
    let signal = bar.sqrt();
    let noise = (1.0 - bar).sqrt();
    theta0.iter().zip(theta_n).map(|(t0, tn)| (tn - signal * t0) / noise).collect()
}

pub fn gaussian_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        assert!((s.alpha_bar_at(1) - 0.7).abs() < 1e-15);
        assert_eq!(s.posterior_variance_at(1), 0.0);
    }

    #[test]
    fn reference_schedule_terminal_signal() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        // independent route: sum of logs
        let log_bar: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let expected = log_bar.exp();
        let got = s.alpha_bar_at(1000);
        assert!((got - expected).abs() / expected < 1e-12);
        assert!((got - 4.0e-5).abs() < 0.1e-5, "terminal alpha_bar {got}");
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        for (n, b0, b1) in [(10, 0.01, 0.2), (100, 1e-4, 0.05), (3, 0.5, 0.5)] {
            let s = make_schedule(n, b0, b1).unwrap();
            for w in s.alpha_bar.windows(2) {
                assert!(w[1] < w[0]);
            }
            for i in 2..=n {
                assert!(s.posterior_variance_at(i) > 0.0);
            }
            assert_eq!(s.posterior_variance_at(1), 0.0);
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn forward_sample_trivial_cases() {
        let s = make_schedule(50, 1e-6, 1e-5).unwrap();
        let theta = vec![0.5, -0.25, 1.0];
        // tiny betas at small n: theta_n stays close to theta
        let out = forward_sample(&theta, 1, &[1.0, 1.0, 1.0], &s).unwrap();
        for (o, t) in out.iter().zip(&theta) {
            assert!((o - t).abs() < 2e-3);
        }
        // zero noise scales by sqrt(alpha_bar)
        let s2 = make_schedule(10, 0.1, 0.3).unwrap();
        let out = forward_sample(&theta, 4, &[0.0, 0.0, 0.0], &s2).unwrap();
        let signal = s2.alpha_bar_at(4).sqrt();
        for (o, t) in out.iter().zip(&theta) {
            assert!((o - signal * t).abs() < 1e-15);
        }
        assert!(forward_sample(&theta, 11, &[0.0; 3], &s2).is_err());
    }

    #[test]
    fn forward_sample_variance_matches_schedule() {
        let s = make_schedule(20, 0.01, 0.2).unwrap();
        let n = 13;
        let mut rng = rng_for(3, "fw-var", 0);
        let draws = 10_000;
        let mut values = Vec::with_capacity(draws);
        for _ in 0..draws {
            let eps = gaussian_vector(&mut rng, 1);
            let out = forward_sample(&[0.3], n, &eps, &s).unwrap();
            values.push(out[0]);
        }
        let mean: f64 = values.iter().sum::<f64>() / draws as f64;
        let var: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / draws as f64;
        let expected = 1.0 - s.alpha_bar_at(n);
        assert!((var - expected).abs() / expected < 0.05, "var {var} vs {expected}");
    }
}
