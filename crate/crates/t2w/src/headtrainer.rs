//! Two-stage training of the per-task projection heads and assembly of the
//! text-to-weight corpus.
//!
//! Stage 1 trains a single base head on the full class universe for one
//! epoch; stage 2 fine-tunes a copy of that base on each subtask. Starting
//! every task from the same base keeps all corpus weights in one permutation
//! basin, which is what makes the text-to-weight map learnable.

use crate::graph::{Activation, Graph, GraphError, NodeId};
use crate::matrix::{dot, DenseMatrix};
use crate::optim::{Adam, AdamConfig};
use crate::seeds::rng_for;
use crate::taskgen::{sample_task, sample_task_features, task_condition, ClassUniverse, TaskSpec, TextEmbedding};
use crate::weightspace::{flatten, unflatten, FlatWeights, ParamSchema};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeadTrainError {
    #[error("graph error: {0}")]
    Graph(#[from] GraphError),
    #[error("task generation error: {0}")]
    TaskGen(#[from] crate::taskgen::TaskGenError),
    #[error("weight space error: {0}")]
    WeightSpace(#[from] crate::weightspace::WeightSpaceError),
    #[error("non-finite loss at epoch {epoch}, step {step} (loss {loss})")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("could not generate {want} distinct tasks after {attempts} attempts")]
    TaskExhaustion { want: usize, attempts: usize },
    #[error("degenerate projection: head output has zero norm")]
    DegenerateProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    Gelu,
    None,
}

/// Which parameters stage-2 fine-tuning moves. The two-stage protocol
/// freezes the shared projection between stages; scoping the fine-tune to
/// the final layer keeps every task's W1 identical to the base, which makes
/// the text-to-weight map far better conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneScope {
    Both,
    W2Only,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
}

impl HeadWeights {
    pub fn schema(&self) -> ParamSchema {
        ParamSchema::new(self.w1.rows(), self.w1.cols())
    }

    pub fn to_flat(&self) -> FlatWeights {
        flatten(&self.w1, &self.w2, self.schema()).expect("shapes match by construction")
    }

    pub fn from_flat(flat: &FlatWeights) -> Self {
        let (w1, w2) = unflatten(flat);
        Self { w1, w2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadTrainConfig {
    pub hidden_dim: usize,
    pub epochs_base: usize,
    pub epochs_subtask: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub activation: HeadActivation,
    pub finetune_scope: FinetuneScope,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 4,
            epochs_base: 1,
            epochs_subtask: 32,
            learning_rate: 3e-4,
            batch_size: 64,
            train_samples_per_class: 64,
            test_samples_per_class: 16,
            activation: HeadActivation::Gelu,
            finetune_scope: FinetuneScope::Both,
        }
    }
}

/// One corpus entry: a task, its condition vector, the trained weights and
/// their accuracies.
#[derive(Debug, Clone)]
pub struct WeightRecord {
    pub task: TaskSpec,
    pub embedding: TextEmbedding,
    pub weights: FlatWeights,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Class vectors the logits are scored against. Text embeddings when their
/// dimension matches the head output, feature anchors otherwise.
pub fn logit_vectors(universe: &ClassUniverse) -> &Vec<Vec<f64>> {
    if universe.config.embed_dim == universe.config.feature_dim {
        &universe.class_embeddings
    } else {
        &universe.anchors
    }
}

/// `h = act(x W1) W2`, L2-normalized. Rejects zero-norm projections.
pub fn head_forward(
    x: &[f64],
    head: &HeadWeights,
    activation: HeadActivation,
) -> Result<Vec<f64>, HeadTrainError> {
    let (f, r) = (head.w1.rows(), head.w1.cols());
    assert_eq!(x.len(), f, "feature length mismatch");
    let mut hidden = vec![0.0; r];
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = head.w1.row(i);
        for j in 0..r {
            hidden[j] += xv * row[j];
        }
    }
    if activation == HeadActivation::Gelu {
        for h in hidden.iter_mut() {
            *h = crate::graph::gelu(*h);
        }
    }
    let mut out = vec![0.0; f];
    for (j, &hv) in hidden.iter().enumerate() {
        if hv == 0.0 {
            continue;
        }
        let row = head.w2.row(j);
        for k in 0..f {
            out[k] += hv * row[k];
        }
    }
    match crate::matrix::normalize_in_place(&mut out) {
        Some(_) => Ok(out),
        None => Err(HeadTrainError::DegenerateProjection),
    }
}

/// Dot-product scores of a projected vector against class vectors.
pub fn logits(h_proj: &[f64], class_vectors: &[Vec<f64>]) -> Vec<f64> {
    class_vectors.iter().map(|e| dot(h_proj, e)).collect()
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of a head on labelled features, scoring only the task's classes.
pub fn head_accuracy(
    head: &HeadWeights,
    activation: HeadActivation,
    features: &[Vec<f64>],
    labels: &[usize],
    class_vectors: &[Vec<f64>],
) -> Result<f64, HeadTrainError> {
    let mut correct = 0usize;
    for (x, &y) in features.iter().zip(labels) {
        let h = head_forward(x, head, activation)?;
        let scores = logits(&h, class_vectors);
        if argmax(&scores) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / features.len().max(1) as f64)
}

struct HeadGraph {
    graph: Graph,
    loss: NodeId,
    batch: usize,
    k: usize,
    feature_dim: usize,
}

impl HeadGraph {
    fn build(
        feature_dim: usize,
        hidden_dim: usize,
        k: usize,
        batch: usize,
        activation: HeadActivation,
    ) -> Result<Self, GraphError> {
        let mut g = Graph::new();
        let x = g.input("x", batch, feature_dim);
        let w1 = g.input("w1", feature_dim, hidden_dim);
        let w2 = g.input("w2", hidden_dim, feature_dim);
        let et = g.input("et", feature_dim, k);
        let t = g.input("t", batch, k);
        let pre = g.matmul(x, w1)?;
        let hidden = match activation {
            HeadActivation::Gelu => g.activation(pre, Activation::Gelu),
            HeadActivation::None => pre,
        };
        let proj = g.matmul(hidden, w2)?;
        let normed = g.normalize_rows(proj);
        let scores = g.matmul(normed, et)?;
        let loss = g.cross_entropy_loss(scores, t)?;
        Ok(Self { graph: g, loss, batch, k, feature_dim })
    }

    fn bind_class_vectors(&mut self, class_vectors: &[Vec<f64>]) -> Result<(), GraphError> {
        let mut et = DenseMatrix::zeros(self.feature_dim, self.k);
        for (j, e) in class_vectors.iter().enumerate() {
            for (i, &v) in e.iter().enumerate() {
                et.set(i, j, v);
            }
        }
        self.graph.set_input("et", et)
    }

    fn bind_batch(&mut self, features: &[&Vec<f64>], labels: &[usize]) -> Result<(), GraphError> {
        let mut x = DenseMatrix::zeros(self.batch, self.feature_dim);
        let mut t = DenseMatrix::zeros(self.batch, self.k);
        for (row, (f, &y)) in features.iter().zip(labels).enumerate() {
            for (c, &v) in f.iter().enumerate() {
                x.set(row, c, v);
            }
            t.set(row, y, 1.0);
        }
        self.graph.set_input("x", x)?;
        self.graph.set_input("t", t)
    }

    /// One optimizer step; returns the batch loss.
    fn step(
        &mut self,
        head: &mut HeadWeights,
        adam: &mut Adam,
        lr_scale: f64,
        scope: FinetuneScope,
    ) -> Result<f64, GraphError> {
        self.graph.set_input_from("w1", &head.w1)?;
        self.graph.set_input_from("w2", &head.w2)?;
        let loss = self.graph.evaluate(self.loss)?.values()[0];
        self.graph.backward(self.loss)?;
        let mut g1 = self.graph.grad(self.graph.input_id("w1").unwrap()).clone();
        let g2 = self.graph.grad(self.graph.input_id("w2").unwrap()).clone();
        if scope == FinetuneScope::W2Only {
            g1.values_mut().fill(0.0);
        }
        let mut params = vec![head.w1.clone(), head.w2.clone()];
        adam.step(&mut params, &[g1, g2], lr_scale);
        head.w2 = params.pop().unwrap();
        head.w1 = params.pop().unwrap();
        Ok(loss)
    }
}

fn xavier_normal_init(feature_dim: usize, hidden_dim: usize, seed_rng: &mut rand_chacha::ChaCha8Rng) -> HeadWeights {
    let std1 = (2.0 / (feature_dim + hidden_dim) as f64).sqrt();
    let w1 = DenseMatrix::from_vec_unchecked(
        feature_dim,
        hidden_dim,
        (0..feature_dim * hidden_dim)
            .map(|_| std1 * seed_rng.sample::<f64, _>(StandardNormal))
            .collect(),
    );
    let w2 = DenseMatrix::from_vec_unchecked(
        hidden_dim,
        feature_dim,
        (0..feature_dim * hidden_dim)
            .map(|_| std1 * seed_rng.sample::<f64, _>(StandardNormal))
            .collect(),
    );
    HeadWeights { w1, w2 }
}

/// Core loop shared by base pretraining, per-task fine-tuning and the
/// initialization comparison. `cosine_lr` switches between a constant rate
/// and cosine decay over the epoch budget.
pub fn train_head_on(
    features: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    init: HeadWeights,
    config: &HeadTrainConfig,
    class_vectors: &[Vec<f64>],
    epochs: usize,
    shuffle_rng: &mut rand_chacha::ChaCha8Rng,
    cosine_lr: bool,
) -> Result<(HeadWeights, Vec<f64>), HeadTrainError> {
    train_head_scoped(
        features, labels, k, init, config, class_vectors, epochs, shuffle_rng, cosine_lr,
        FinetuneScope::Both,
    )
}

/// `train_head_on` with explicit control over which layers move.
#[allow(clippy::too_many_arguments)]
pub fn train_head_scoped(
    features: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    init: HeadWeights,
    config: &HeadTrainConfig,
    class_vectors: &[Vec<f64>],
    epochs: usize,
    shuffle_rng: &mut rand_chacha::ChaCha8Rng,
    cosine_lr: bool,
    scope: FinetuneScope,
) -> Result<(HeadWeights, Vec<f64>), HeadTrainError> {
    let feature_dim = init.w1.rows();
    let mut head = init;
    if epochs == 0 || features.is_empty() {
        return Ok((head, Vec::new()));
    }
    let batch = config.batch_size.min(features.len());
    let mut hg = HeadGraph::build(feature_dim, config.hidden_dim, k, batch, config.activation)?;
    hg.bind_class_vectors(class_vectors)?;
    let mut adam = Adam::new(
        AdamConfig::with_lr(config.learning_rate),
        &[head.w1.shape(), head.w2.shape()],
    );
    let mut order: Vec<usize> = (0..features.len()).collect();
    let steps_per_epoch = features.len().div_ceil(batch);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(shuffle_rng);
        let lr_scale = if cosine_lr {
            crate::optim::cosine_warmup_scale(epoch, epochs, 0)
        } else {
            1.0
        };
        let mut epoch_loss = 0.0;
        for step in 0..steps_per_epoch {
            // wrap around so every batch has full shape
            let idx: Vec<usize> =
                (0..batch).map(|i| order[(step * batch + i) % order.len()]).collect();
            let batch_features: Vec<&Vec<f64>> = idx.iter().map(|&i| &features[i]).collect();
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            hg.bind_batch(&batch_features, &batch_labels)?;
            let loss = hg.step(&mut head, &mut adam, lr_scale, scope)?;
            if !loss.is_finite() {
                return Err(HeadTrainError::NonFiniteLoss { epoch, step, loss });
            }
            epoch_loss += loss;
        }
        epoch_losses.push(epoch_loss / steps_per_epoch as f64);
    }
    Ok((head, epoch_losses))
}

/// Stage 1: one pass over the full universe from a fresh random init.
pub fn train_base(
    universe: &ClassUniverse,
    config: &HeadTrainConfig,
    master_seed: u64,
) -> Result<HeadWeights, HeadTrainError> {
    let mut init_rng = rng_for(master_seed, "head-init", 0);
    let init = xavier_normal_init(universe.config.feature_dim, config.hidden_dim, &mut init_rng);
    let full_task = TaskSpec { task_id: u64::MAX, class_ids: (0..universe.len()).collect() };
    let mut data_rng = rng_for(master_seed, "base-data", 0);
    let (features, labels) =
        sample_task_features(&full_task, universe, config.train_samples_per_class, &mut data_rng);
    let mut shuffle_rng = rng_for(master_seed, "base-shuffle", 0);
    let (head, _) = train_head_on(
        &features,
        &labels,
        universe.len(),
        init,
        config,
        logit_vectors(universe),
        config.epochs_base,
        &mut shuffle_rng,
        false,
    )?;
    Ok(head)
}

/// Stage 2: fine-tune from `base` (or a fresh random init) on one subtask.
pub fn train_head(
    task: &TaskSpec,
    universe: &ClassUniverse,
    base: Option<&HeadWeights>,
    config: &HeadTrainConfig,
    master_seed: u64,
) -> Result<(HeadWeights, TrainMetrics), HeadTrainError> {
    let init = match base {
        Some(b) => b.clone(),
        None => {
            let mut init_rng = rng_for(master_seed, "head-init", task.task_id + 1);
            xavier_normal_init(universe.config.feature_dim, config.hidden_dim, &mut init_rng)
        }
    };
    let class_vectors: Vec<Vec<f64>> =
        task.class_ids.iter().map(|&id| logit_vectors(universe)[id].clone()).collect();
    let mut data_rng = rng_for(master_seed, "head-data", task.task_id);
    let (features, labels) =
        sample_task_features(task, universe, config.train_samples_per_class, &mut data_rng);
    let mut shuffle_rng = rng_for(master_seed, "head-shuffle", task.task_id);
    let scope = if base.is_some() { config.finetune_scope } else { FinetuneScope::Both };
    let (head, epoch_losses) = train_head_scoped(
        &features,
        &labels,
        task.k(),
        init,
        config,
        &class_vectors,
        config.epochs_subtask,
        &mut shuffle_rng,
        false,
        scope,
    )?;
    let train_accuracy =
        head_accuracy(&head, config.activation, &features, &labels, &class_vectors)?;
    let mut test_rng = rng_for(master_seed, "head-test", task.task_id);
    let (test_features, test_labels) =
        sample_task_features(task, universe, config.test_samples_per_class, &mut test_rng);
    let test_accuracy =
        head_accuracy(&head, config.activation, &test_features, &test_labels, &class_vectors)?;
    Ok((head, TrainMetrics { train_accuracy, test_accuracy, epoch_losses }))
}

/// Samples `n_tasks` distinct tasks (distinct class-id sets), with a bounded
/// retry budget.
pub fn sample_distinct_tasks(
    universe: &ClassUniverse,
    n_tasks: usize,
    k_min: usize,
    k_max: usize,
    master_seed: u64,
) -> Result<Vec<TaskSpec>, HeadTrainError> {
    let mut tasks: Vec<TaskSpec> = Vec::with_capacity(n_tasks);
    let mut seen = std::collections::HashSet::new();
    let max_attempts = 50 * n_tasks + 100;
    let mut attempt = 0u64;
    while tasks.len() < n_tasks {
        if attempt as usize >= max_attempts {
            return Err(HeadTrainError::TaskExhaustion { want: n_tasks, attempts: max_attempts });
        }
        let mut rng = rng_for(master_seed, "task", attempt);
        let task = sample_task(&mut rng, universe, tasks.len() as u64, k_min, k_max)?;
        attempt += 1;
        if seen.insert(task.sorted_ids()) {
            tasks.push(task);
        }
    }
    Ok(tasks)
}

/// The full corpus build: distinct tasks, shared base, parallel per-task
/// fine-tuning, task-level split. Records come back in task order so the
/// split and the files are deterministic.
pub fn build_dataset(
    universe: &ClassUniverse,
    n_tasks: usize,
    split_fraction: f64,
    k_min: usize,
    k_max: usize,
    config: &HeadTrainConfig,
    master_seed: u64,
) -> Result<(Vec<WeightRecord>, Vec<WeightRecord>), HeadTrainError> {
    assert!(split_fraction > 0.0 && split_fraction < 1.0, "split fraction must be in (0,1)");
    let tasks = sample_distinct_tasks(universe, n_tasks, k_min, k_max, master_seed)?;
    let base = train_base(universe, config, master_seed)?;
    let records: Vec<WeightRecord> = tasks
        .par_iter()
        .map(|task| {
            let (head, metrics) = train_head(task, universe, Some(&base), config, master_seed)?;
            let embedding = task_condition(task, universe)?;
            Ok(WeightRecord {
                task: task.clone(),
                embedding,
                weights: head.to_flat(),
                train_accuracy: metrics.train_accuracy,
                test_accuracy: metrics.test_accuracy,
            })
        })
        .collect::<Result<_, HeadTrainError>>()?;
    let n_seen = ((n_tasks as f64) * split_fraction).round() as usize;
    let n_seen = n_seen.clamp(1, n_tasks - 1);
    let mut records = records;
    let unseen = records.split_off(n_seen);
    Ok((records, unseen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{build_universe, UniverseConfig};
    use crate::weightspace::{apply_permutation, sample_permutation};

    fn small_universe(sigma_f: f64) -> ClassUniverse {
        build_universe(
            &UniverseConfig {
                class_count: 6,
                feature_dim: 8,
                embed_dim: 8,
                sigma_f,
                alignment: 0.5,
            },
            7,
        )
    }

    fn quick_config() -> HeadTrainConfig {
        HeadTrainConfig {
            hidden_dim: 3,
            epochs_base: 1,
            epochs_subtask: 32,
            learning_rate: 3e-2,
            batch_size: 16,
            train_samples_per_class: 16,
            test_samples_per_class: 8,
            activation: HeadActivation::Gelu,
            finetune_scope: FinetuneScope::Both,
        }
    }

    #[test]
    fn zero_head_is_degenerate() {
        let head = HeadWeights { w1: DenseMatrix::zeros(4, 2), w2: DenseMatrix::zeros(2, 4) };
        let err = head_forward(&[1.0, 0.0, 0.0, 0.0], &head, HeadActivation::Gelu).unwrap_err();
        assert!(matches!(err, HeadTrainError::DegenerateProjection));
    }

    #[test]
    fn identity_composition_returns_normalized_input() {
        // activation none, W1 = W2 = I (r = F): h = x / |x|
        let head = HeadWeights { w1: DenseMatrix::identity(3), w2: DenseMatrix::identity(3) };
        let x = vec![3.0, 0.0, 4.0];
        let h = head_forward(&x, &head, HeadActivation::None).unwrap();
        assert!((h[0] - 0.6).abs() < 1e-12);
        assert!((h[2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn head_forward_matches_straight_line_recomputation() {
        let mut rng = rng_for(31, "hf", 0);
        let f = 5;
        let r = 2;
        let w1 = DenseMatrix::from_vec_unchecked(
            f, r, (0..f * r).map(|_| rng.gen::<f64>() - 0.5).collect());
        let w2 = DenseMatrix::from_vec_unchecked(
            r, f, (0..f * r).map(|_| rng.gen::<f64>() - 0.5).collect());
        let head = HeadWeights { w1: w1.clone(), w2: w2.clone() };
        let x: Vec<f64> = (0..f).map(|_| rng.gen::<f64>() - 0.5).collect();
        let got = head_forward(&x, &head, HeadActivation::Gelu).unwrap();

        // independent recomputation
        let mut hidden = vec![0.0; r];
        for j in 0..r {
            for i in 0..f {
                hidden[j] += x[i] * w1.get(i, j);
            }
        }
        for h in hidden.iter_mut() {
            *h = crate::graph::gelu(*h);
        }
        let mut out = vec![0.0; f];
        for k in 0..f {
            for j in 0..r {
                out[k] += hidden[j] * w2.get(j, k);
            }
        }
        let n = crate::matrix::l2_norm(&out);
        for (a, b) in got.iter().zip(&out) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_trivial_cases() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(logits(&[0.0, 0.0], &e), vec![0.0, 0.0]);
        let scores = logits(&[0.0, 1.0], &e);
        assert_eq!(argmax(&scores), 1);
    }

    #[test]
    fn logits_match_graph_path() {
        let mut rng = rng_for(37, "lg", 0);
        let h: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
        let class_vectors: Vec<Vec<f64>> =
            (0..3).map(|_| (0..4).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
        let direct = logits(&h, &class_vectors);

        let mut g = Graph::new();
        let hv = g.input("h", 1, 4);
        let et = g.input("et", 4, 3);
        let z = g.matmul(hv, et).unwrap();
        g.set_input("h", DenseMatrix::from_vec(1, 4, h).unwrap()).unwrap();
        let mut etm = DenseMatrix::zeros(4, 3);
        for (j, e) in class_vectors.iter().enumerate() {
            for (i, &v) in e.iter().enumerate() {
                etm.set(i, j, v);
            }
        }
        g.set_input("et", etm).unwrap();
        let from_graph = g.evaluate(z).unwrap();
        for (a, b) in direct.iter().zip(from_graph.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_two_class_task_reaches_full_accuracy() {
        let universe = small_universe(0.0);
        let config = quick_config();
        let task = TaskSpec { task_id: 0, class_ids: vec![1, 4] };
        let (_, metrics) = train_head(&task, &universe, None, &config, 11).unwrap();
        assert_eq!(metrics.test_accuracy, 1.0, "metrics: {metrics:?}");
    }

    #[test]
    fn zero_epochs_returns_base_unchanged() {
        let universe = small_universe(0.1);
        let mut config = quick_config();
        config.epochs_subtask = 0;
        let base = train_base(&universe, &config, 13).unwrap();
        let task = TaskSpec { task_id: 0, class_ids: vec![0, 2] };
        let (head, _) = train_head(&task, &universe, Some(&base), &config, 13).unwrap();
        assert_eq!(head, base);
    }

    #[test]
    fn training_is_deterministic() {
        let universe = small_universe(0.1);
        let config = quick_config();
        let task = TaskSpec { task_id: 3, class_ids: vec![0, 3, 5] };
        let (a, _) = train_head(&task, &universe, None, &config, 17).unwrap();
        let (b, _) = train_head(&task, &universe, None, &config, 17).unwrap();
        assert_eq!(a.w1.values(), b.w1.values());
        assert_eq!(a.w2.values(), b.w2.values());
    }

    #[test]
    fn base_beats_chance_and_moves_from_init() {
        let universe = small_universe(0.05);
        let mut config = quick_config();
        config.epochs_base = 4;
        let base = train_base(&universe, &config, 19).unwrap();
        let mut init_rng = rng_for(19, "head-init", 0);
        let init =
            xavier_normal_init(universe.config.feature_dim, config.hidden_dim, &mut init_rng);
        let dist = base.w1.sub(&init.w1).unwrap().frobenius_norm();
        assert!(dist > 0.0);

        let full = TaskSpec { task_id: 9, class_ids: (0..universe.len()).collect() };
        let mut rng = rng_for(19, "base-eval", 0);
        let (features, labels) = sample_task_features(&full, &universe, 16, &mut rng);
        let acc = head_accuracy(
            &base,
            config.activation,
            &features,
            &labels,
            logit_vectors(&universe),
        )
        .unwrap();
        assert!(acc > 1.0 / universe.len() as f64, "accuracy {acc}");
    }

    #[test]
    fn noiseless_loss_is_nonincreasing_within_jitter() {
        let universe = small_universe(0.0);
        let config = quick_config();
        let task = TaskSpec { task_id: 5, class_ids: vec![1, 2, 4] };
        let (_, metrics) = train_head(&task, &universe, None, &config, 23).unwrap();
        for pair in metrics.epoch_losses.windows(2) {
            assert!(
                pair[1] <= pair[0] * 1.05 + 1e-9,
                "loss increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn permuted_head_has_identical_accuracy() {
        let universe = small_universe(0.1);
        let config = quick_config();
        let task = TaskSpec { task_id: 6, class_ids: vec![0, 1, 5] };
        let (head, metrics) = train_head(&task, &universe, None, &config, 29).unwrap();
        let mut rng = rng_for(29, "perm", 0);
        let g = sample_permutation(&mut rng, config.hidden_dim);
        let permuted = HeadWeights::from_flat(&apply_permutation(&head.to_flat(), &g).unwrap());
        let class_vectors: Vec<Vec<f64>> =
            task.class_ids.iter().map(|&id| logit_vectors(&universe)[id].clone()).collect();
        let mut test_rng = rng_for(29, "head-test", task.task_id);
        let (features, labels) = sample_task_features(&task, &universe, 8, &mut test_rng);
        let a = head_accuracy(&head, config.activation, &features, &labels, &class_vectors).unwrap();
        let b =
            head_accuracy(&permuted, config.activation, &features, &labels, &class_vectors).unwrap();
        assert_eq!(a, b);
        let _ = metrics;
    }

    #[test]
    fn dataset_split_counts_and_disjointness() {
        let universe = small_universe(0.1);
        let mut config = quick_config();
        config.epochs_subtask = 2;
        config.train_samples_per_class = 8;
        let (seen, unseen) = build_dataset(&universe, 11, 8.0 / 11.0, 2, 4, &config, 31).unwrap();
        assert_eq!(seen.len(), 8);
        assert_eq!(unseen.len(), 3);
        let seen_sets: std::collections::HashSet<Vec<usize>> =
            seen.iter().map(|r| r.task.sorted_ids()).collect();
        for r in &unseen {
            assert!(!seen_sets.contains(&r.task.sorted_ids()));
        }
    }
}
