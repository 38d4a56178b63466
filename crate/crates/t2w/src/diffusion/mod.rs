//! The generative core: noise schedule, transformer denoiser, weight-space
//! critic, the three training losses, alternating training, and sampling.

pub mod discriminator;
pub mod losses;
pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

pub use discriminator::{DiscConfig, Discriminator};
pub use losses::{loss_adv, loss_diff, loss_sym, loss_total, StateItem};
pub use model::{Denoiser, DenoiserConfig, DenoiserEval, DenoiserModel};
pub use sample::{partial_denoise, reverse_chain, sample};
pub use schedule::{forward_sample, make_schedule, NoiseSchedule};
pub use train::{train, CheckpointHeader, CurveRow, DiffusionTrainConfig, TrainOutput};

use crate::weightspace::{
    chunk_with_count, denormalize_blocks, normalize_blocks_with, unchunk, ChunkSpec, FlatWeights,
    ParamSchema,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("graph error: {0}")]
    Graph(#[from] crate::graph::GraphError),
    #[error("weight space error: {0}")]
    WeightSpace(#[from] crate::weightspace::WeightSpaceError),
    #[error("store error: {0}")]
    Store(#[from] crate::store::StoreError),
    #[error("invalid schedule: {detail}")]
    BadSchedule { detail: String },
    #[error("diffusion step {n} out of range 1..={n_steps}")]
    StepOutOfRange { n: usize, n_steps: usize },
    #[error("non-finite state at reverse step {step}")]
    NonFiniteState { step: usize },
    #[error("training diverged at epoch {epoch}, step {step} (loss {loss}); last checkpoint retained")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset/model geometry mismatch: {detail}")]
    GeometryMismatch { detail: String },
}

/// Raw weights -> padded normalized diffusion state, using the dataset-global
/// block statistics carried by `chunk`.
pub fn weights_to_state(weights: &FlatWeights, chunk: &ChunkSpec) -> Vec<f64> {
    let (blocks, _) = chunk_with_count(&weights.values, chunk.block_size, chunk.block_count)
        .expect("chunk spec fits schema");
    let normalized = normalize_blocks_with(&blocks, chunk);
    normalized.concat()
}

/// Padded normalized state -> raw weights (denormalize, strip padding).
pub fn state_to_weights(
    state: &[f64],
    chunk: &ChunkSpec,
    schema: ParamSchema,
) -> Result<FlatWeights, DiffusionError> {
    assert_eq!(state.len(), chunk.padded_len(), "state length mismatch");
    let blocks: Vec<Vec<f64>> =
        state.chunks(chunk.block_size).map(|b| b.to_vec()).collect();
    let restored = unchunk(&denormalize_blocks(&blocks, chunk), chunk);
    Ok(FlatWeights::new(schema, restored)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;
    use crate::weightspace::{chunk, normalize_blocks};
    use rand::Rng;

    #[test]
    fn state_round_trip() {
        let schema = ParamSchema::new(5, 3);
        let mut rng = rng_for(1, "state-rt", 0);
        let values: Vec<f64> = (0..schema.flat_len()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let weights = FlatWeights::new(schema, values).unwrap();
        let (blocks, spec) = chunk(&weights.values, 7);
        let (_, spec) = normalize_blocks(&blocks, spec).unwrap();
        let state = weights_to_state(&weights, &spec);
        assert_eq!(state.len(), spec.padded_len());
        assert!(state.iter().all(|x| (-1.0..=1.0).contains(x)));
        let back = state_to_weights(&state, &spec, schema).unwrap();
        for (a, b) in back.values.iter().zip(&weights.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
