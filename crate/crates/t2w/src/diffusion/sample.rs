//! Reverse-process sampling and partial denoising of existing weights.

use super::model::Denoiser;
use super::schedule::{forward_sample, gaussian_vector, NoiseSchedule};
use super::{state_to_weights, weights_to_state, DiffusionError};
use crate::weightspace::{ChunkSpec, FlatWeights, ParamSchema};
use rand_chacha::ChaCha8Rng;

/// Runs the reverse chain from step `from` down to 1, starting at `state`.
/// `noiseless` forces the per-step Gaussian to zero (the algebraic-inversion
/// mode); the final step never adds noise.
///
/// `clip_denoised` bounds the implied clean estimate to the normalized data
/// range [-1, 1] before forming the posterior mean. Normalized weights live
/// in that range by construction, so the clip only activates when the model
/// predicts an off-manifold point; whenever the estimate is in range the
/// update equals the plain posterior-mean parameterization exactly.
pub fn reverse_chain(
    denoiser: &mut dyn Denoiser,
    v_c: &[f64],
    schedule: &NoiseSchedule,
    from: usize,
    mut state: Vec<f64>,
    rng: &mut ChaCha8Rng,
    noiseless: bool,
    clip_denoised: bool,
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check_step(from)?;
    for n in (1..=from).rev() {
        let eps_hat = denoiser.predict(&state, n, v_c)?;
        let alpha = schedule.alpha_at(n);
        let beta = schedule.beta_at(n);
        let bar = schedule.alpha_bar_at(n);
        let bar_prev = if n > 1 { schedule.alpha_bar_at(n - 1) } else { 1.0 };
        let coef = beta / (1.0 - bar).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sigma = if noiseless { 0.0 } else { schedule.posterior_variance_at(n).sqrt() };
        // posterior mean in x0 form: mu = c0 * x0_hat + ct * theta_n
        let c0 = bar_prev.sqrt() * beta / (1.0 - bar);
        let ct = alpha.sqrt() * (1.0 - bar_prev) / (1.0 - bar);
        let noise = if n > 1 && !noiseless { Some(gaussian_vector(rng, state.len())) } else { None };
        for (i, (x, e)) in state.iter_mut().zip(&eps_hat).enumerate() {
            let mu = if clip_denoised {
                let x0 = (*x - (1.0 - bar).sqrt() * e) / bar.sqrt();
                if x0.abs() > 1.0 {
                    c0 * x0.clamp(-1.0, 1.0) + ct * *x
                } else {
                    inv_sqrt_alpha * (*x - coef * e)
                }
            } else {
                inv_sqrt_alpha * (*x - coef * e)
            };
            *x = match &noise {
                Some(z) => mu + sigma * z[i],
                None => mu,
            };
        }
        if state.iter().any(|x| !x.is_finite()) {
            return Err(DiffusionError::NonFiniteState { step: n });
        }
    }
    Ok(state)
}

/// Full generation: start from standard Gaussian noise at step N, run the
/// reverse chain, then denormalize and strip padding.
pub fn sample(
    denoiser: &mut dyn Denoiser,
    v_c: &[f64],
    schedule: &NoiseSchedule,
    chunk: &ChunkSpec,
    schema: ParamSchema,
    rng: &mut ChaCha8Rng,
) -> Result<FlatWeights, DiffusionError> {
    let state = gaussian_vector(rng, chunk.padded_len());
    let final_state =
        reverse_chain(denoiser, v_c, schedule, schedule.n_steps, state, rng, false, true)?;
    state_to_weights(&final_state, chunk, schema)
}

/// Forward-noises existing weights to step `m`, then denoises back.
pub fn partial_denoise(
    weights: &FlatWeights,
    v_c: &[f64],
    m: usize,
    denoiser: &mut dyn Denoiser,
    schedule: &NoiseSchedule,
    chunk: &ChunkSpec,
    rng: &mut ChaCha8Rng,
) -> Result<FlatWeights, DiffusionError> {
    schedule.check_step(m)?;
    let state = weights_to_state(weights, chunk);
    let eps = gaussian_vector(rng, state.len());
    let noised = forward_sample(&state, m, &eps, schedule)?;
    let final_state = reverse_chain(denoiser, v_c, schedule, m, noised, rng, false, true)?;
    state_to_weights(&final_state, chunk, weights.schema)
}
