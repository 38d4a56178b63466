//! Synthetic task families: class universes with unit-norm feature anchors
//! and text embeddings, subtask sampling, description templating, pluggable
//! text embedders, and cosine-weighted fusion of per-class embeddings into a
//! single condition vector.

use crate::matrix::{dot, l2_norm, normalize_in_place};
use crate::seeds::derive_seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskGenError {
    #[error("k range {k_min}..={k_max} invalid for universe of {classes} classes")]
    BadKRange { k_min: usize, k_max: usize, classes: usize },
    #[error("class id {0} out of range")]
    BadClassId(usize),
    #[error("embedding for description `{0}` not found")]
    MissingEmbedding(String),
    #[error("degenerate fusion input: {0}")]
    DegenerateFusion(&'static str),
    #[error("embedder dimension {got}, expected {need}")]
    BadEmbedderDim { got: usize, need: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniverseConfig {
    pub class_count: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// Gaussian noise scale added to class anchors when drawing features.
    pub sigma_f: f64,
    /// Fraction of the anchor direction mixed into each class text embedding.
    pub alignment: f64,
}

/// The class pool: names, unit feature anchors (dimension F) and unit text
/// embeddings (dimension E).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassUniverse {
    pub config: UniverseConfig,
    pub names: Vec<String>,
    pub anchors: Vec<Vec<f64>>,
    pub class_embeddings: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ClassUniverse {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Builds the synthetic universe. Anchors are orthonormalized when the class
/// count fits inside the feature dimension, otherwise plain normalized
/// Gaussian draws. Class text embeddings mix the (projected) anchor direction
/// with a hash embedding of the templated class description.
pub fn build_universe(config: &UniverseConfig, master_seed: u64) -> ClassUniverse {
    let seed = derive_seed(master_seed, "universe", 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..config.class_count).map(|i| format!("class_{i:02}")).collect();

    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(config.class_count);
    let orthonormalize = config.class_count <= config.feature_dim;
    for _ in 0..config.class_count {
        let mut v = gaussian_vec(&mut rng, config.feature_dim);
        if orthonormalize {
            for prev in &anchors {
                let proj = dot(&v, prev);
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= proj * p;
                }
            }
        }
        normalize_in_place(&mut v).expect("gaussian draw has full norm");
        anchors.push(v);
    }

    // fixed projection from anchor space into embedding space
    let proj_rows: Vec<Vec<f64>> = (0..config.feature_dim)
        .map(|_| gaussian_vec(&mut rng, config.embed_dim))
        .collect();
    let project = |anchor: &[f64]| -> Vec<f64> {
        if config.embed_dim == config.feature_dim {
            return anchor.to_vec();
        }
        let mut out = vec![0.0; config.embed_dim];
        for (a, row) in anchor.iter().zip(&proj_rows) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += a * r;
            }
        }
        normalize_in_place(&mut out);
        out
    };

    let embedder = HashEmbedder::new(config.embed_dim, derive_seed(master_seed, "text-embed", 0));
    let class_embeddings = names
        .iter()
        .zip(&anchors)
        .map(|(name, anchor)| {
            let text = embedder.embed(&template_for(name)).expect("hash embedder is total");
            let projected = project(anchor);
            let mut mixed: Vec<f64> = projected
                .iter()
                .zip(&text)
                .map(|(a, t)| config.alignment * a + (1.0 - config.alignment) * t)
                .collect();
            normalize_in_place(&mut mixed).expect("mixed embedding has full norm");
            mixed
        })
        .collect();

    ClassUniverse { config: config.clone(), names, anchors, class_embeddings, seed }
}

/// One k-class subtask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u64,
    pub class_ids: Vec<usize>,
}

impl TaskSpec {
    pub fn k(&self) -> usize {
        self.class_ids.len()
    }

    /// Sorted copy used for set-level deduplication.
    pub fn sorted_ids(&self) -> Vec<usize> {
        let mut ids = self.class_ids.clone();
        ids.sort_unstable();
        ids
    }
}

/// Condition vector for a task, together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Synthetic,
    File,
}

pub fn sample_task(
    rng: &mut ChaCha8Rng,
    universe: &ClassUniverse,
    task_id: u64,
    k_min: usize,
    k_max: usize,
) -> Result<TaskSpec, TaskGenError> {
    if k_min == 0 || k_min > k_max || k_max > universe.len() {
        return Err(TaskGenError::BadKRange { k_min, k_max, classes: universe.len() });
    }
    let k = rng.gen_range(k_min..=k_max);
    let mut ids: Vec<usize> = (0..universe.len()).collect();
    ids.shuffle(rng);
    ids.truncate(k);
    Ok(TaskSpec { task_id, class_ids: ids })
}

fn template_for(name: &str) -> String {
    format!("A photo of {}", name.replace('_', " "))
}

/// "A photo of {class}" with underscores read as spaces.
pub fn template_descriptions(task: &TaskSpec, universe: &ClassUniverse) -> Result<Vec<String>, TaskGenError> {
    task.class_ids
        .iter()
        .map(|&id| {
            universe
                .names
                .get(id)
                .map(|n| template_for(n))
                .ok_or(TaskGenError::BadClassId(id))
        })
        .collect()
}

pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, description: &str) -> Result<Vec<f64>, TaskGenError>;
    fn source(&self) -> EmbeddingSource;
}

/// Deterministic unit vector from a seeded hash of the description.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, description: &str) -> Result<Vec<f64>, TaskGenError> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(description.as_bytes());
        let digest = hasher.finalize();
        let word = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(word);
        let mut v = gaussian_vec(&mut rng, self.dim);
        normalize_in_place(&mut v).expect("gaussian draw has full norm");
        Ok(v)
    }

    fn source(&self) -> EmbeddingSource {
        EmbeddingSource::Synthetic
    }
}

/// Embeddings precomputed externally, keyed by exact description string.
#[derive(Debug, Clone)]
pub struct FileEmbedder {
    dim: usize,
    map: HashMap<String, Vec<f64>>,
}

impl FileEmbedder {
    pub fn new(dim: usize, map: HashMap<String, Vec<f64>>) -> Result<Self, TaskGenError> {
        for v in map.values() {
            if v.len() != dim {
                return Err(TaskGenError::BadEmbedderDim { got: v.len(), need: dim });
            }
        }
        Ok(Self { dim, map })
    }
}

impl TextEmbedder for FileEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, description: &str) -> Result<Vec<f64>, TaskGenError> {
        self.map
            .get(description)
            .cloned()
            .ok_or_else(|| TaskGenError::MissingEmbedding(description.to_string()))
    }

    fn source(&self) -> EmbeddingSource {
        EmbeddingSource::File
    }
}

pub fn embed_text(description: &str, embedder: &dyn TextEmbedder) -> Result<TextEmbedding, TaskGenError> {
    Ok(TextEmbedding { vector: embedder.embed(description)?, source: embedder.source() })
}

/// Cosine-weighted feature fusion: softmax over dot products of the
/// normalized rows with the normalized mean, then a weighted sum of the
/// un-normalized rows.
pub fn fuse_features(rows: &[Vec<f64>]) -> Result<Vec<f64>, TaskGenError> {
    if rows.is_empty() {
        return Err(TaskGenError::DegenerateFusion("no rows"));
    }
    let dim = rows[0].len();
    let k = rows.len();
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / k as f64;
        }
    }
    let mean_norm = l2_norm(&mean);
    if mean_norm < 1e-12 {
        return Err(TaskGenError::DegenerateFusion("zero-norm mean"));
    }
    let mut scores = Vec::with_capacity(k);
    for row in rows {
        let norm = l2_norm(row);
        if norm < 1e-12 {
            return Err(TaskGenError::DegenerateFusion("zero-norm row"));
        }
        scores.push(dot(row, &mean) / (norm * mean_norm));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
    let mut fused = vec![0.0; dim];
    for (w, row) in weights.iter().zip(rows) {
        for (f, x) in fused.iter_mut().zip(row) {
            *f += w * x;
        }
    }
    Ok(fused)
}

/// Condition vector for a task: fusion over its classes' universe embeddings.
pub fn task_condition(task: &TaskSpec, universe: &ClassUniverse) -> Result<TextEmbedding, TaskGenError> {
    let rows: Vec<Vec<f64>> = task
        .class_ids
        .iter()
        .map(|&id| {
            universe
                .class_embeddings
                .get(id)
                .cloned()
                .ok_or(TaskGenError::BadClassId(id))
        })
        .collect::<Result<_, _>>()?;
    Ok(TextEmbedding { vector: fuse_features(&rows)?, source: EmbeddingSource::Synthetic })
}

/// One feature draw for a class: anchor plus Gaussian noise, L2-normalized
/// (the backbone features this stands in for are normalized the same way).
pub fn synth_features(class_id: usize, rng: &mut ChaCha8Rng, universe: &ClassUniverse) -> Vec<f64> {
    let anchor = &universe.anchors[class_id];
    if universe.config.sigma_f == 0.0 {
        // anchors are already unit vectors
        return anchor.clone();
    }
    let mut v: Vec<f64> = anchor
        .iter()
        .map(|a| a + universe.config.sigma_f * rng.sample::<f64, _>(StandardNormal))
        .collect();
    normalize_in_place(&mut v).expect("anchor plus noise has full norm");
    v
}

/// Labelled feature batch for a task, drawn with the given rng.
pub fn sample_task_features(
    task: &TaskSpec,
    universe: &ClassUniverse,
    samples_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut features = Vec::with_capacity(task.k() * samples_per_class);
    let mut labels = Vec::with_capacity(task.k() * samples_per_class);
    for (local, &class_id) in task.class_ids.iter().enumerate() {
        for _ in 0..samples_per_class {
            features.push(synth_features(class_id, rng, universe));
            labels.push(local);
        }
    }
    (features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;

    fn test_universe(classes: usize) -> ClassUniverse {
        build_universe(
            &UniverseConfig {
                class_count: classes,
                feature_dim: 16,
                embed_dim: 32,
                sigma_f: 0.1,
                alignment: 0.5,
            },
            99,
        )
    }

    #[test]
    fn universe_vectors_are_unit() {
        let u = test_universe(10);
        for a in &u.anchors {
            assert!((l2_norm(a) - 1.0).abs() < 1e-12);
        }
        for e in &u.class_embeddings {
            assert!((l2_norm(e) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn small_universe_anchors_are_orthogonal() {
        let u = test_universe(8);
        for i in 0..8 {
            for j in 0..i {
                assert!(dot(&u.anchors[i], &u.anchors[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn full_universe_task() {
        let u = test_universe(6);
        let mut rng = rng_for(1, "task", 0);
        let task = sample_task(&mut rng, &u, 0, 6, 6).unwrap();
        assert_eq!(task.sorted_ids(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn k_out_of_range_rejected() {
        let u = test_universe(6);
        let mut rng = rng_for(1, "task", 0);
        assert!(sample_task(&mut rng, &u, 0, 2, 7).is_err());
    }

    #[test]
    fn k_frequencies_are_uniform() {
        let u = test_universe(12);
        let mut rng = rng_for(2, "task", 0);
        let (k_min, k_max) = (3, 8);
        let draws = 10_000usize;
        let mut counts = vec![0usize; k_max + 1];
        for i in 0..draws {
            let t = sample_task(&mut rng, &u, i as u64, k_min, k_max).unwrap();
            counts[t.k()] += 1;
        }
        let p = 1.0 / (k_max - k_min + 1) as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for k in k_min..=k_max {
            let dev = (counts[k] as f64 - draws as f64 * p).abs();
            assert!(dev < 3.0 * sigma, "k={k} count={}", counts[k]);
        }
    }

    #[test]
    fn task_sampling_is_reproducible() {
        let u = test_universe(12);
        let a = sample_task(&mut rng_for(5, "task", 3), &u, 3, 2, 6).unwrap();
        let b = sample_task(&mut rng_for(5, "task", 3), &u, 3, 2, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn templates_replace_underscores() {
        let mut u = test_universe(3);
        u.names = vec!["otter".into(), "palm_tree".into(), "rocket".into()];
        let task = TaskSpec { task_id: 0, class_ids: vec![0, 1] };
        let descriptions = template_descriptions(&task, &u).unwrap();
        assert_eq!(descriptions[0], "A photo of otter");
        assert_eq!(descriptions[1], "A photo of palm tree");
        let empty = TaskSpec { task_id: 1, class_ids: vec![] };
        assert!(template_descriptions(&empty, &u).unwrap().is_empty());
    }

    #[test]
    fn hash_embedder_is_deterministic_and_unit() {
        let e = HashEmbedder::new(32, 7);
        let a = e.embed("A photo of otter").unwrap();
        let b = e.embed("A photo of otter").unwrap();
        assert_eq!(a, b);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_strings_embed_far_apart() {
        let e = HashEmbedder::new(32, 11);
        let mut rng = rng_for(11, "pairs", 0);
        let mut close_pairs = 0usize;
        let pairs = 1000;
        for _ in 0..pairs {
            let a: String = (0..8).map(|_| (b'a' + rng.gen_range(0..26)) as char).collect();
            let b: String = (0..9).map(|_| (b'a' + rng.gen_range(0..26)) as char).collect();
            let va = e.embed(&a).unwrap();
            let vb = e.embed(&b).unwrap();
            if dot(&va, &vb) >= 0.5 {
                close_pairs += 1;
            }
        }
        assert!(close_pairs <= 10, "{close_pairs} of {pairs} pairs too close");
    }

    #[test]
    fn file_embedder_missing_key_names_it() {
        let e = FileEmbedder::new(2, HashMap::new()).unwrap();
        let err = e.embed("A photo of otter").unwrap_err();
        assert!(err.to_string().contains("A photo of otter"));
    }

    #[test]
    fn fusion_singleton_is_identity() {
        let row = vec![vec![0.3, -0.2, 0.9]];
        assert_eq!(fuse_features(&row).unwrap(), row[0]);
    }

    #[test]
    fn fusion_of_identical_rows_is_identity() {
        let e = vec![0.5, 0.5, -0.1];
        let rows = vec![e.clone(), e.clone(), e.clone()];
        let fused = fuse_features(&rows).unwrap();
        for (a, b) in fused.iter().zip(&e) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_matches_step_by_step_recomputation() {
        let mut rng = rng_for(13, "fuse", 0);
        let rows: Vec<Vec<f64>> =
            (0..3).map(|_| (0..4).map(|_| rng.gen::<f64>() + 0.1).collect()).collect();
        let fused = fuse_features(&rows).unwrap();

        // independent recomputation, plain loops
        let k = rows.len();
        let mut mu = vec![0.0; 4];
        for row in &rows {
            for i in 0..4 {
                mu[i] += row[i] / k as f64;
            }
        }
        let mu_n = l2_norm(&mu);
        let scores: Vec<f64> =
            rows.iter().map(|r| dot(r, &mu) / (l2_norm(r) * mu_n)).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let mut expect = vec![0.0; 4];
        for (s, row) in scores.iter().zip(&rows) {
            let w = s.exp() / z;
            for i in 0..4 {
                expect[i] += w * row[i];
            }
        }
        for (a, b) in fused.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_rejects_zero_rows() {
        assert!(fuse_features(&[vec![0.0, 0.0]]).is_err());
        assert!(fuse_features(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).is_err());
    }

    #[test]
    fn fusion_is_row_order_invariant() {
        let mut rng = rng_for(17, "fuse", 1);
        let rows: Vec<Vec<f64>> =
            (0..5).map(|_| (0..6).map(|_| rng.gen::<f64>() + 0.05).collect()).collect();
        let fused = fuse_features(&rows).unwrap();
        let mut reversed = rows.clone();
        reversed.reverse();
        let fused_rev = fuse_features(&reversed).unwrap();
        for (a, b) in fused.iter().zip(&fused_rev) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_features_equal_anchor() {
        let mut u = test_universe(4);
        u.config.sigma_f = 0.0;
        let mut rng = rng_for(19, "feat", 0);
        let f = synth_features(2, &mut rng, &u);
        assert_eq!(f, u.anchors[2]);
    }

    #[test]
    fn features_stay_near_own_anchor() {
        let u = test_universe(6);
        let mut rng = rng_for(23, "feat", 1);
        let mut own = 0.0;
        let mut best_other = f64::NEG_INFINITY;
        let n = 1000;
        for _ in 0..n {
            let f = synth_features(1, &mut rng, &u);
            assert!((l2_norm(&f) - 1.0).abs() < 1e-12);
            own += dot(&f, &u.anchors[1]) / n as f64;
        }
        for (i, anchor) in u.anchors.iter().enumerate() {
            if i == 1 {
                continue;
            }
            let mut mean = 0.0;
            let mut rng2 = rng_for(23, "feat", 1);
            for _ in 0..n {
                let f = synth_features(1, &mut rng2, &u);
                mean += dot(&f, anchor) / n as f64;
            }
            best_other = best_other.max(mean);
        }
        assert!(own > best_other, "own {own} vs other {best_other}");
    }
}
