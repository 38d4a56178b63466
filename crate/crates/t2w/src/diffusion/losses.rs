//! Standalone evaluation forms of the three training losses. Per-item
//! squared error is summed over coordinates and averaged over the batch; the
//! trainer reproduces the same reduction inside its differentiable graph.

use super::discriminator::{Discriminator, PROB_CLAMP};
use super::model::Denoiser;
use super::schedule::{forward_sample, gaussian_vector, NoiseSchedule};
use super::DiffusionError;
use crate::weightspace::{apply_permutation_flatvec, sample_permutation, ParamSchema, PermSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One corpus item in diffusion state space: normalized padded weights plus
/// the condition vector.
#[derive(Debug, Clone)]
pub struct StateItem {
    pub theta0: Vec<f64>,
    pub v_c: Vec<f64>,
}

fn sq_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over the batch of `||eps - eps_hat||^2` with `n ~ U{1..N}` and fresh
/// Gaussian noise per item.
pub fn loss_diff(
    batch: &[StateItem],
    schedule: &NoiseSchedule,
    denoiser: &mut dyn Denoiser,
    rng: &mut ChaCha8Rng,
) -> Result<f64, DiffusionError> {
    let mut total = 0.0;
    for item in batch {
        let n = rng.gen_range(1..=schedule.n_steps);
        let eps = gaussian_vector(rng, item.theta0.len());
        let theta_n = forward_sample(&item.theta0, n, &eps, schedule)?;
        let eps_hat = denoiser.predict(&theta_n, n, &item.v_c)?;
        total += sq_norm_diff(&eps, &eps_hat);
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Mean over the batch of the equivariance defect
/// `||eps_hat(g theta_n) - g eps_hat(theta_n)||^2` with `g` drawn per item.
pub fn loss_sym(
    batch: &[StateItem],
    schedule: &NoiseSchedule,
    denoiser: &mut dyn Denoiser,
    schema: ParamSchema,
    rng: &mut ChaCha8Rng,
) -> Result<f64, DiffusionError> {
    let mut total = 0.0;
    for item in batch {
        let n = rng.gen_range(1..=schedule.n_steps);
        let eps = gaussian_vector(rng, item.theta0.len());
        let g = sample_permutation(rng, schema.hidden_dim);
        total += sym_defect(item, n, &eps, &g, schedule, denoiser, schema)?;
    }
    Ok(total / batch.len().max(1) as f64)
}

/// The squared equivariance defect for one fixed draw.
pub fn sym_defect(
    item: &StateItem,
    n: usize,
    eps: &[f64],
    g: &PermSpec,
    schedule: &NoiseSchedule,
    denoiser: &mut dyn Denoiser,
    schema: ParamSchema,
) -> Result<f64, DiffusionError> {
    let theta_n = forward_sample(&item.theta0, n, eps, schedule)?;
    let theta_n_perm = apply_permutation_flatvec(&theta_n, g, schema)?;
    let eps_hat = denoiser.predict(&theta_n, n, &item.v_c)?;
    let eps_hat_perm_input = denoiser.predict(&theta_n_perm, n, &item.v_c)?;
    let perm_eps_hat = apply_permutation_flatvec(&eps_hat, g, schema)?;
    Ok(sq_norm_diff(&eps_hat_perm_input, &perm_eps_hat))
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Discriminator and (non-saturating) generator objectives on explicit real
/// and generated batches.
pub fn loss_adv(
    batch_real: &[Vec<f64>],
    batch_generated: &[Vec<f64>],
    disc: &Discriminator,
) -> (f64, f64) {
    assert!(!batch_real.is_empty() && !batch_generated.is_empty(), "batches must be nonempty");
    let mut real_term = 0.0;
    for x in batch_real {
        real_term += clamp_prob(disc.prob(x)).ln();
    }
    real_term /= batch_real.len() as f64;
    let mut fake_term = 0.0;
    let mut gen_term = 0.0;
    for x in batch_generated {
        let p = clamp_prob(disc.prob(x));
        fake_term += (1.0 - p).ln();
        gen_term += p.ln();
    }
    fake_term /= batch_generated.len() as f64;
    gen_term /= batch_generated.len() as f64;
    (-(real_term + fake_term), -gen_term)
}

/// `L_diff + lambda1 L_sym + lambda2 L_adv(gen side)`.
pub fn loss_total(diff: f64, sym: f64, gen_adv: f64, lambda1: f64, lambda2: f64) -> f64 {
    diff + lambda1 * sym + lambda2 * gen_adv
}
