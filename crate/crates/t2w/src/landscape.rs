//! Loss-landscape grids: a 2D slice of the task loss around converged
//! weights, with a trajectory direction and a layer-wise-normalized random
//! direction, cached by a content hash of every input.

use crate::headtrainer::{HeadActivation, HeadWeights};
use crate::matrix::l2_norm;
use crate::seeds::rng_for;
use crate::taskgen::{sample_task_features, ClassUniverse, TaskSpec};
use crate::weightspace::{FlatWeights, ParamSchema};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("initial and final weights are identical (zero displacement)")]
    ZeroDisplacement,
    #[error("direction length {got} does not match schema length {need}")]
    BadDirectionLength { got: usize, need: usize },
    #[error("head evaluation error: {0}")]
    Head(#[from] crate::headtrainer::HeadTrainError),
    #[error("evaluation error: {0}")]
    Eval(#[from] crate::downstream::DownstreamError),
    #[error("store error: {0}")]
    Store(#[from] crate::store::StoreError),
    #[error("grid is empty (resolution must be at least 1)")]
    EmptyGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub resolution: usize,
    /// Evaluate on the task's training stream instead of its test stream.
    pub train_loss: bool,
    pub samples_per_class: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            alpha_range: (-4.0, 4.0),
            beta_range: (-4.0, 4.0),
            resolution: 50,
            train_loss: false,
            samples_per_class: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Row-major: `z[i][j]` is the loss at `(alphas[i], betas[j])`.
    pub z: Vec<Vec<f64>>,
    pub baseline: f64,
    pub cache_key: String,
}

/// Unit vector along the optimization displacement.
pub fn trajectory_direction(
    theta_init: &FlatWeights,
    theta_final: &FlatWeights,
) -> Result<Vec<f64>, LandscapeError> {
    let mut delta: Vec<f64> =
        theta_final.values.iter().zip(&theta_init.values).map(|(a, b)| a - b).collect();
    let norm = l2_norm(&delta);
    if norm < 1e-15 {
        return Err(LandscapeError::ZeroDisplacement);
    }
    for d in delta.iter_mut() {
        *d /= norm;
    }
    Ok(delta)
}

/// Gaussian direction rescaled per layer so each layer block matches the
/// corresponding layer norm of `delta1`. Layers are the W1 and W2 blocks of
/// the flattened layout.
pub fn random_direction(
    rng: &mut ChaCha8Rng,
    schema: ParamSchema,
    delta1: &[f64],
) -> Result<Vec<f64>, LandscapeError> {
    if delta1.len() != schema.flat_len() {
        return Err(LandscapeError::BadDirectionLength {
            got: delta1.len(),
            need: schema.flat_len(),
        });
    }
    let split = schema.feature_dim * schema.hidden_dim;
    let mut out: Vec<f64> =
        (0..schema.flat_len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for (start, end) in [(0, split), (split, schema.flat_len())] {
        let target = l2_norm(&delta1[start..end]);
        let own = l2_norm(&out[start..end]);
        let scale = if own > 0.0 { target / own } else { 0.0 };
        for v in out[start..end].iter_mut() {
            *v *= scale;
        }
    }
    Ok(out)
}

/// Mirror-symmetric grid coordinates: when the range is symmetric around 0,
/// coordinate `i` and its mirror are exact negations, which makes the
/// direction-negation flip identity exact.
fn grid_coords(lo: f64, hi: f64, resolution: usize) -> Vec<f64> {
    if resolution == 1 {
        return vec![lo];
    }
    let mut coords = vec![0.0; resolution];
    let step = (hi - lo) / (resolution - 1) as f64;
    if lo == -hi {
        for i in 0..resolution / 2 {
            let v = lo + step * i as f64;
            coords[i] = v;
            coords[resolution - 1 - i] = -v;
        }
        if resolution % 2 == 1 {
            coords[resolution / 2] = 0.0;
        }
    } else {
        for (i, c) in coords.iter_mut().enumerate() {
            *c = lo + step * i as f64;
        }
        coords[resolution - 1] = hi;
    }
    coords
}

fn hash_inputs(
    theta: &FlatWeights,
    delta1: &[f64],
    delta2: &[f64],
    task: &TaskSpec,
    universe_seed: u64,
    activation: HeadActivation,
    master_seed: u64,
    spec: &GridSpec,
) -> String {
    let mut hasher = Sha256::new();
    let push_f64s = |values: &[f64], hasher: &mut Sha256| {
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    };
    push_f64s(&theta.values, &mut hasher);
    push_f64s(delta1, &mut hasher);
    push_f64s(delta2, &mut hasher);
    hasher.update(spec.alpha_range.0.to_le_bytes());
    hasher.update(spec.alpha_range.1.to_le_bytes());
    hasher.update(spec.beta_range.0.to_le_bytes());
    hasher.update(spec.beta_range.1.to_le_bytes());
    hasher.update((spec.resolution as u64).to_le_bytes());
    hasher.update([spec.train_loss as u8]);
    hasher.update((spec.samples_per_class as u64).to_le_bytes());
    hasher.update(task.task_id.to_le_bytes());
    for &c in &task.class_ids {
        hasher.update((c as u64).to_le_bytes());
    }
    hasher.update(universe_seed.to_le_bytes());
    hasher.update([matches!(activation, HeadActivation::Gelu) as u8]);
    hasher.update(master_seed.to_le_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cross-entropy of perturbed weights over the task's full sample set, for
/// every grid point. Returns the grid and the number of loss evaluations
/// performed (zero on a cache hit). `theta_star` is never mutated.
#[allow(clippy::too_many_arguments)]
pub fn compute_grid(
    theta_star: &FlatWeights,
    delta1: &[f64],
    delta2: &[f64],
    task: &TaskSpec,
    universe: &ClassUniverse,
    activation: HeadActivation,
    master_seed: u64,
    spec: &GridSpec,
    cache_dir: Option<&Path>,
) -> Result<(LandscapeGrid, usize), LandscapeError> {
    if spec.resolution == 0 {
        return Err(LandscapeError::EmptyGrid);
    }
    let d = theta_star.schema.flat_len();
    for (name, dir) in [("delta1", delta1), ("delta2", delta2)] {
        if dir.len() != d {
            let _ = name;
            return Err(LandscapeError::BadDirectionLength { got: dir.len(), need: d });
        }
    }
    let cache_key = hash_inputs(
        theta_star,
        delta1,
        delta2,
        task,
        universe.seed,
        activation,
        master_seed,
        spec,
    );
    let cache_path = cache_dir.map(|dir| dir.join(format!("grid-{cache_key}.json")));
    if let Some(path) = &cache_path {
        if path.exists() {
            match std::fs::read_to_string(path)
                .ok()
                .and_then(|text| serde_json::from_str::<LandscapeGrid>(&text).ok())
            {
                Some(grid) if grid.cache_key == cache_key => return Ok((grid, 0)),
                _ => eprintln!(
                    "warning: landscape cache {} is corrupt; recomputing",
                    path.display()
                ),
            }
        }
    }

    let stream = if spec.train_loss { "head-data" } else { "head-test" };
    let mut rng = rng_for(master_seed, stream, task.task_id);
    let (features, labels) = sample_task_features(task, universe, spec.samples_per_class, &mut rng);
    let class_vectors: Vec<Vec<f64>> = task
        .class_ids
        .iter()
        .map(|&id| crate::headtrainer::logit_vectors(universe)[id].clone())
        .collect();

    let alphas = grid_coords(spec.alpha_range.0, spec.alpha_range.1, spec.resolution);
    let betas = grid_coords(spec.beta_range.0, spec.beta_range.1, spec.resolution);
    let mut evaluations = 0usize;
    let mut point_loss = |theta: &[f64]| -> Result<f64, LandscapeError> {
        evaluations += 1;
        let flat = FlatWeights { schema: theta_star.schema, values: theta.to_vec() };
        let head = HeadWeights::from_flat(&flat);
        Ok(crate::downstream::head_test_loss(&head, activation, &features, &labels, &class_vectors)?)
    };

    let baseline = point_loss(&theta_star.values)?;
    let mut z = vec![vec![0.0; betas.len()]; alphas.len()];
    let mut perturbed = vec![0.0; d];
    for (i, &a) in alphas.iter().enumerate() {
        for (j, &b) in betas.iter().enumerate() {
            for k in 0..d {
                perturbed[k] = theta_star.values[k] + a * delta1[k] + b * delta2[k];
            }
            z[i][j] = point_loss(&perturbed)?;
        }
    }
    let grid = LandscapeGrid { alphas, betas, z, baseline, cache_key };
    if let Some(path) = &cache_path {
        let text = serde_json::to_string(&grid).expect("grid serializes");
        crate::store::atomic_write(path, text.as_bytes())?;
    }
    Ok((grid, evaluations))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridFormat {
    Csv,
    Json,
}

/// CSV rows run alpha-major with beta fastest; JSON carries the whole struct.
pub fn emit_grid(grid: &LandscapeGrid, path: &Path, format: GridFormat) -> Result<(), LandscapeError> {
    let bytes = match format {
        GridFormat::Csv => {
            let mut out = String::from("alpha,beta,loss\n");
            for (i, a) in grid.alphas.iter().enumerate() {
                for (j, b) in grid.betas.iter().enumerate() {
                    out.push_str(&format!("{},{},{}\n", a, b, grid.z[i][j]));
                }
            }
            out.into_bytes()
        }
        GridFormat::Json => serde_json::to_vec(grid).expect("grid serializes"),
    };
    crate::store::atomic_write(path, &bytes)?;
    Ok(())
}
