//! Downstream applications: evaluation metrics, initialization comparison,
//! text-driven fusion against interpolation baselines, weight enhancement,
//! and the universal-model baseline.

pub mod assign;

use crate::headtrainer::{
    head_accuracy, head_forward, logit_vectors, logits, train_head_on, HeadActivation,
    HeadTrainConfig, HeadTrainError, HeadWeights, WeightRecord,
};
use crate::matrix::{dot, DenseMatrix};
use crate::seeds::rng_for;
use crate::taskgen::{sample_task_features, ClassUniverse, TaskSpec};
use crate::weightspace::{apply_permutation, FlatWeights, ParamSchema, PermSpec};
use assign::max_profit_assignment;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("head training error: {0}")]
    Head(#[from] HeadTrainError),
    #[error("tasks overlap on class {0}")]
    OverlappingTasks(usize),
    #[error("schema mismatch: {0:?} vs {1:?}")]
    SchemaMismatch(ParamSchema, ParamSchema),
    #[error("unknown initialization method `{0}`")]
    UnknownMethod(String),
    #[error("weight generation failed: {0}")]
    Generation(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub test_samples_per_class: usize,
    pub tau: f64,
    pub tau_test: f64,
    pub activation: HeadActivation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { test_samples_per_class: 16, tau: 0.5, tau_test: 0.4, activation: HeadActivation::Gelu }
    }
}

/// Accuracy of a weight vector on a task's fresh synthetic test set, plus
/// the parameter-space MSE against a target when one is supplied. The test
/// stream is keyed by the task id, so evaluating a stored record reproduces
/// its recorded accuracy.
pub fn evaluate(
    weights: &FlatWeights,
    task: &TaskSpec,
    universe: &ClassUniverse,
    config: &EvalConfig,
    master_seed: u64,
    target: Option<&FlatWeights>,
) -> Result<(f64, Option<f64>), DownstreamError> {
    let head = HeadWeights::from_flat(weights);
    let class_vectors: Vec<Vec<f64>> =
        task.class_ids.iter().map(|&id| logit_vectors(universe)[id].clone()).collect();
    let mut rng = rng_for(master_seed, "head-test", task.task_id);
    let (features, labels) =
        sample_task_features(task, universe, config.test_samples_per_class, &mut rng);
    let accuracy = head_accuracy(&head, config.activation, &features, &labels, &class_vectors)?;
    let weight_mse = target.map(|t| {
        debug_assert_eq!(t.schema, weights.schema);
        let n = weights.values.len() as f64;
        weights.values.iter().zip(&t.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
    });
    Ok((accuracy, weight_mse))
}

/// Mean cross-entropy of a head on labelled features (the T.Loss column of
/// the initialization comparison).
pub fn head_test_loss(
    head: &HeadWeights,
    activation: HeadActivation,
    features: &[Vec<f64>],
    labels: &[usize],
    class_vectors: &[Vec<f64>],
) -> Result<f64, DownstreamError> {
    let mut total = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let h = head_forward(x, head, activation)?;
        let scores = logits(&h, class_vectors);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total -= scores[y] - max - log_sum;
    }
    Ok(total / features.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    XavierUniform,
    XavierNormal,
    KaimingUniform,
    KaimingNormal,
    /// U(-0.1, 0.1)
    Uniform,
    /// N(0, std 0.01)
    Normal,
    T2w,
}

impl InitMethod {
    pub fn parse(name: &str) -> Result<Self, DownstreamError> {
        Ok(match name {
            "xavier-uniform" => Self::XavierUniform,
            "xavier-normal" => Self::XavierNormal,
            "kaiming-uniform" => Self::KaimingUniform,
            "kaiming-normal" => Self::KaimingNormal,
            "uniform" => Self::Uniform,
            "normal" => Self::Normal,
            "t2w" => Self::T2w,
            other => return Err(DownstreamError::UnknownMethod(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::XavierUniform => "xavier-uniform",
            Self::XavierNormal => "xavier-normal",
            Self::KaimingUniform => "kaiming-uniform",
            Self::KaimingNormal => "kaiming-normal",
            Self::Uniform => "uniform",
            Self::Normal => "normal",
            Self::T2w => "t2w",
        }
    }
}

fn fill_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R, mut draw: impl FnMut(&mut R) -> f64) -> DenseMatrix {
    DenseMatrix::from_vec_unchecked(rows, cols, (0..rows * cols).map(|_| draw(rng)).collect())
}

/// Classical initialization schemes. Xavier uses fan_in + fan_out; Kaiming
/// uses fan_in with the ReLU gain sqrt(2).
pub fn init_weights<R: Rng>(
    method: InitMethod,
    schema: ParamSchema,
    rng: &mut R,
) -> Result<HeadWeights, DownstreamError> {
    let (f, r) = (schema.feature_dim, schema.hidden_dim);
    let make = |rng: &mut R, rows: usize, cols: usize, method: InitMethod| -> DenseMatrix {
        let (fan_in, fan_out) = (rows as f64, cols as f64);
        match method {
            InitMethod::XavierUniform => {
                let bound = (6.0 / (fan_in + fan_out)).sqrt();
                fill_matrix(rows, cols, rng, |rng| rng.gen_range(-bound..=bound))
            }
            InitMethod::XavierNormal => {
                let std = (2.0 / (fan_in + fan_out)).sqrt();
                fill_matrix(rows, cols, rng, |rng| std * rng.sample::<f64, _>(StandardNormal))
            }
            InitMethod::KaimingUniform => {
                let bound = (6.0 / fan_in).sqrt();
                fill_matrix(rows, cols, rng, |rng| rng.gen_range(-bound..=bound))
            }
            InitMethod::KaimingNormal => {
                let std = (2.0 / fan_in).sqrt();
                fill_matrix(rows, cols, rng, |rng| std * rng.sample::<f64, _>(StandardNormal))
            }
            InitMethod::Uniform => fill_matrix(rows, cols, rng, |rng| rng.gen_range(-0.1..=0.1)),
            InitMethod::Normal => {
                fill_matrix(rows, cols, rng, |rng| 0.01 * rng.sample::<f64, _>(StandardNormal))
            }
            InitMethod::T2w => unreachable!("generated init handled by the caller"),
        }
    };
    if method == InitMethod::T2w {
        return Err(DownstreamError::Generation(
            "t2w initialization needs a generator; use init_compare".into(),
        ));
    }
    Ok(HeadWeights { w1: make(rng, f, r, method), w2: make(rng, r, f, method) })
}

#[derive(Debug, Clone, Serialize)]
pub struct InitOutcome {
    pub method: InitMethod,
    pub final_test_loss: f64,
    pub accuracy: f64,
}

/// Trains the same task from each initialization under identical settings
/// (Adam + cosine decay over `epochs`), reporting final test loss and
/// accuracy. `generate` supplies weights for the generated-init method.
#[allow(clippy::too_many_arguments)]
pub fn init_compare(
    task: &TaskSpec,
    universe: &ClassUniverse,
    methods: &[InitMethod],
    config: &HeadTrainConfig,
    epochs: usize,
    master_seed: u64,
    eval: &EvalConfig,
    mut generate: Option<&mut dyn FnMut(&TaskSpec) -> Result<FlatWeights, DownstreamError>>,
) -> Result<Vec<InitOutcome>, DownstreamError> {
    let class_vectors: Vec<Vec<f64>> =
        task.class_ids.iter().map(|&id| logit_vectors(universe)[id].clone()).collect();
    let mut data_rng = rng_for(master_seed, "init-data", task.task_id);
    let (features, labels) =
        sample_task_features(task, universe, config.train_samples_per_class, &mut data_rng);
    let mut test_rng = rng_for(master_seed, "head-test", task.task_id);
    let (test_features, test_labels) =
        sample_task_features(task, universe, eval.test_samples_per_class, &mut test_rng);

    let mut outcomes = Vec::with_capacity(methods.len());
    for (idx, &method) in methods.iter().enumerate() {
        let init = if method == InitMethod::T2w {
            let generate = generate
                .as_deref_mut()
                .ok_or_else(|| DownstreamError::Generation("no generator supplied".into()))?;
            HeadWeights::from_flat(&generate(task)?)
        } else {
            let mut rng = rng_for(master_seed, "init-method", idx as u64);
            init_weights(method, ParamSchema::new(universe.config.feature_dim, config.hidden_dim), &mut rng)?
        };
        let mut shuffle_rng = rng_for(master_seed, "init-shuffle", idx as u64);
        let (head, _) = train_head_on(
            &features,
            &labels,
            task.k(),
            init,
            config,
            &class_vectors,
            epochs,
            &mut shuffle_rng,
            true,
        )?;
        let final_test_loss =
            head_test_loss(&head, config.activation, &test_features, &test_labels, &class_vectors)?;
        let accuracy =
            head_accuracy(&head, config.activation, &test_features, &test_labels, &class_vectors)?;
        outcomes.push(InitOutcome { method, final_test_loss, accuracy });
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMethod {
    TextFusion,
    Interpolation,
    PermAlignedInterpolation,
}

#[derive(Debug, Clone, Serialize)]
pub struct FusionResult {
    pub method: FusionMethod,
    pub accuracy_on_a: f64,
    pub accuracy_on_b: f64,
    pub average: f64,
}

impl FusionResult {
    fn new(method: FusionMethod, a: f64, b: f64) -> Self {
        Self { method, accuracy_on_a: a, accuracy_on_b: b, average: 0.5 * (a + b) }
    }
}

fn check_disjoint(task_a: &TaskSpec, task_b: &TaskSpec) -> Result<(), DownstreamError> {
    let set: std::collections::HashSet<usize> = task_a.class_ids.iter().copied().collect();
    for &c in &task_b.class_ids {
        if set.contains(&c) {
            return Err(DownstreamError::OverlappingTasks(c));
        }
    }
    Ok(())
}

/// The union task both fusion routes are evaluated on: A's classes followed
/// by B's.
pub fn union_task(task_a: &TaskSpec, task_b: &TaskSpec) -> Result<TaskSpec, DownstreamError> {
    check_disjoint(task_a, task_b)?;
    let mut class_ids = task_a.class_ids.clone();
    class_ids.extend_from_slice(&task_b.class_ids);
    Ok(TaskSpec { task_id: task_a.task_id ^ (task_b.task_id << 32), class_ids })
}

/// Accuracy of combined weights over the union label set, measured on each
/// side's own test samples.
pub fn evaluate_fused(
    weights: &FlatWeights,
    task_a: &TaskSpec,
    task_b: &TaskSpec,
    universe: &ClassUniverse,
    config: &EvalConfig,
    master_seed: u64,
    method: FusionMethod,
) -> Result<FusionResult, DownstreamError> {
    let union = union_task(task_a, task_b)?;
    let head = HeadWeights::from_flat(weights);
    let union_vectors: Vec<Vec<f64>> =
        union.class_ids.iter().map(|&id| logit_vectors(universe)[id].clone()).collect();
    let mut acc = [0.0f64; 2];
    for (side, task) in [task_a, task_b].into_iter().enumerate() {
        let mut rng = rng_for(master_seed, "head-test", task.task_id);
        let (features, labels) =
            sample_task_features(task, universe, config.test_samples_per_class, &mut rng);
        let offset = if side == 0 { 0 } else { task_a.k() };
        let mut correct = 0usize;
        for (x, &y) in features.iter().zip(&labels) {
            let h = head_forward(x, &head, config.activation)?;
            let scores = logits(&h, &union_vectors);
            if crate::headtrainer::argmax(&scores) == y + offset {
                correct += 1;
            }
        }
        acc[side] = correct as f64 / features.len().max(1) as f64;
    }
    Ok(FusionResult::new(method, acc[0], acc[1]))
}

/// Text-driven fusion: generate weights for the concatenated description
/// list (fused condition over the union class set) and evaluate both sides.
pub fn fuse_by_text(
    task_a: &TaskSpec,
    task_b: &TaskSpec,
    universe: &ClassUniverse,
    config: &EvalConfig,
    master_seed: u64,
    generate: &mut dyn FnMut(&TaskSpec) -> Result<FlatWeights, DownstreamError>,
) -> Result<FusionResult, DownstreamError> {
    let union = union_task(task_a, task_b)?;
    let weights = generate(&union)?;
    evaluate_fused(&weights, task_a, task_b, universe, config, master_seed, FusionMethod::TextFusion)
}

/// Elementwise midpoint of two weight vectors.
pub fn fuse_interpolate(a: &FlatWeights, b: &FlatWeights) -> Result<FlatWeights, DownstreamError> {
    if a.schema != b.schema {
        return Err(DownstreamError::SchemaMismatch(a.schema, b.schema));
    }
    let values = a.values.iter().zip(&b.values).map(|(x, y)| 0.5 * (x + y)).collect();
    Ok(FlatWeights { schema: a.schema, values })
}

/// Hidden-unit signature: W1 column i concatenated with W2 row i.
fn unit_signatures(head: &HeadWeights) -> Vec<Vec<f64>> {
    let (f, r) = (head.w1.rows(), head.w1.cols());
    (0..r)
        .map(|unit| {
            let mut sig = Vec::with_capacity(2 * f);
            for row in 0..f {
                sig.push(head.w1.get(row, unit));
            }
            sig.extend_from_slice(head.w2.row(unit));
            sig
        })
        .collect()
}

/// Aligns `b`'s hidden units to `a`'s by exact linear assignment on
/// signature dot products. Returns the permutation and the aligned copy.
pub fn permutation_align(
    a: &FlatWeights,
    b: &FlatWeights,
) -> Result<(PermSpec, FlatWeights), DownstreamError> {
    if a.schema != b.schema {
        return Err(DownstreamError::SchemaMismatch(a.schema, b.schema));
    }
    let head_a = HeadWeights::from_flat(a);
    let head_b = HeadWeights::from_flat(b);
    let sig_a = unit_signatures(&head_a);
    let sig_b = unit_signatures(&head_b);
    let r = sig_a.len();
    let profit: Vec<Vec<f64>> =
        (0..r).map(|i| (0..r).map(|j| dot(&sig_a[i], &sig_b[j])).collect()).collect();
    let (assignment, _) = max_profit_assignment(&profit);
    let g = PermSpec::new(assignment).expect("assignment is a bijection");
    let aligned = apply_permutation(b, &g).expect("schema checked above");
    Ok((g, aligned))
}

/// Trains a head to `fraction` of the epoch budget, evaluates, applies the
/// supplied enhancement (partial denoising through a trained generator),
/// and evaluates again on the identical test set.
#[allow(clippy::too_many_arguments)]
pub fn enhance(
    task: &TaskSpec,
    universe: &ClassUniverse,
    base: Option<&HeadWeights>,
    config: &HeadTrainConfig,
    fraction_trained: f64,
    eval: &EvalConfig,
    master_seed: u64,
    enhancer: &mut dyn FnMut(&FlatWeights, &TaskSpec) -> Result<FlatWeights, DownstreamError>,
) -> Result<(f64, f64), DownstreamError> {
    assert!(
        fraction_trained > 0.0 && fraction_trained < 1.0,
        "fraction trained must be in (0,1)"
    );
    let mut short_config = config.clone();
    short_config.epochs_subtask =
        ((config.epochs_subtask as f64 * fraction_trained).round() as usize).max(1);
    let (head, _) = crate::headtrainer::train_head(task, universe, base, &short_config, master_seed)?;
    let before_weights = head.to_flat();
    let (before, _) = evaluate(&before_weights, task, universe, eval, master_seed, None)?;
    let enhanced = enhancer(&before_weights, task)?;
    let (after, _) = evaluate(&enhanced, task, universe, eval, master_seed, None)?;
    Ok((before, after))
}

/// One head trained on every class jointly; per-subtask evaluation restricts
/// the logits to the subtask's classes.
pub fn universal_baseline(
    universe: &ClassUniverse,
    config: &HeadTrainConfig,
    epochs: usize,
    master_seed: u64,
) -> Result<HeadWeights, DownstreamError> {
    let full_task = TaskSpec { task_id: u64::MAX - 1, class_ids: (0..universe.len()).collect() };
    let mut config = config.clone();
    config.epochs_subtask = epochs;
    let (head, _) = crate::headtrainer::train_head(&full_task, universe, None, &config, master_seed)?;
    Ok(head)
}

/// Record lookup helper shared by the CLI and the acceptance suite.
pub fn record_for_task<'a>(records: &'a [WeightRecord], task_id: u64) -> Option<&'a WeightRecord> {
    records.iter().find(|r| r.task.task_id == task_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headtrainer::train_head;
    use crate::taskgen::{build_universe, UniverseConfig};
    use crate::weightspace::sample_permutation;

    fn small_universe() -> ClassUniverse {
        build_universe(
            &UniverseConfig {
                class_count: 8,
                feature_dim: 8,
                embed_dim: 8,
                sigma_f: 0.1,
                alignment: 0.5,
            },
            41,
        )
    }

    fn quick_config() -> HeadTrainConfig {
        HeadTrainConfig {
            hidden_dim: 4,
            epochs_base: 1,
            epochs_subtask: 24,
            learning_rate: 3e-2,
            batch_size: 16,
            train_samples_per_class: 16,
            test_samples_per_class: 8,
            activation: HeadActivation::Gelu,
            finetune_scope: crate::headtrainer::FinetuneScope::Both,
        }
    }

    fn eval_config() -> EvalConfig {
        EvalConfig { test_samples_per_class: 8, tau: 0.5, tau_test: 0.4, activation: HeadActivation::Gelu }
    }

    fn random_flat(seed: u64, schema: ParamSchema) -> FlatWeights {
        let mut rng = rng_for(seed, "ds-flat", 0);
        FlatWeights::new(
            schema,
            (0..schema.flat_len()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn evaluate_reproduces_stored_accuracy() {
        let universe = small_universe();
        let config = quick_config();
        let task = TaskSpec { task_id: 3, class_ids: vec![0, 2, 5] };
        let (head, metrics) = train_head(&task, &universe, None, &config, 77).unwrap();
        let (acc, mse) = evaluate(&head.to_flat(), &task, &universe, &eval_config(), 77, None).unwrap();
        assert_eq!(acc, metrics.test_accuracy);
        assert!(mse.is_none());
    }

    #[test]
    fn random_weights_score_near_chance() {
        let universe = small_universe();
        let k = 4;
        let task = TaskSpec { task_id: 9, class_ids: vec![0, 1, 2, 3] };
        let mut total = 0.0;
        let runs = 20;
        let mut cfg = eval_config();
        cfg.test_samples_per_class = 50; // 200 samples per run, 4000 total
        for seed in 0..runs {
            let w = random_flat(seed, ParamSchema::new(8, 4));
            let (acc, _) = evaluate(&w, &task, &universe, &cfg, 99, None).unwrap();
            total += acc;
        }
        let mean = total / runs as f64;
        let p = 1.0 / k as f64;
        // 4000 Bernoulli trials of mean p, but draws correlate across the 20
        // random heads; allow a generous window around chance
        assert!((mean - p).abs() < 0.15, "mean accuracy {mean} vs chance {p}");
    }

    #[test]
    fn weight_mse_of_identical_weights_is_zero() {
        let universe = small_universe();
        let task = TaskSpec { task_id: 1, class_ids: vec![1, 4] };
        let w = random_flat(5, ParamSchema::new(8, 4));
        let (_, mse) = evaluate(&w, &task, &universe, &eval_config(), 5, Some(&w)).unwrap();
        assert_eq!(mse, Some(0.0));
    }

    #[test]
    fn xavier_uniform_bound_formula() {
        // F=4, r=2: bound = sqrt(6/(4+2)) = 1
        let schema = ParamSchema::new(4, 2);
        let mut rng = rng_for(7, "init", 0);
        let mut observed_max = 0.0f64;
        for _ in 0..200 {
            let head = init_weights(InitMethod::XavierUniform, schema, &mut rng).unwrap();
            for &v in head.w1.values().iter().chain(head.w2.values()) {
                observed_max = observed_max.max(v.abs());
            }
        }
        assert!(observed_max <= 1.0, "max {observed_max}");
        assert!(observed_max > 0.9, "bound looks too small: {observed_max}");
    }

    #[test]
    fn normal_init_std_matches() {
        let schema = ParamSchema::new(50, 10);
        let mut rng = rng_for(8, "init", 1);
        let mut values = Vec::new();
        for _ in 0..10 {
            let head = init_weights(InitMethod::Normal, schema, &mut rng).unwrap();
            values.extend_from_slice(head.w1.values());
        }
        let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
        let std =
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64).sqrt();
        assert!((std - 0.01).abs() / 0.01 < 0.05, "std {std}");
    }

    #[test]
    fn all_methods_produce_correct_shapes() {
        let schema = ParamSchema::new(6, 3);
        let mut rng = rng_for(9, "init", 2);
        for method in [
            InitMethod::XavierUniform,
            InitMethod::XavierNormal,
            InitMethod::KaimingUniform,
            InitMethod::KaimingNormal,
            InitMethod::Uniform,
            InitMethod::Normal,
        ] {
            let head = init_weights(method, schema, &mut rng).unwrap();
            assert_eq!(head.w1.shape(), (6, 3));
            assert_eq!(head.w2.shape(), (3, 6));
        }
        assert!(InitMethod::parse("kaiming-normal").is_ok());
        assert!(InitMethod::parse("lecun").is_err());
    }

    #[test]
    fn interpolation_trivial_cases() {
        let schema = ParamSchema::new(3, 2);
        let a = random_flat(1, schema);
        assert_eq!(fuse_interpolate(&a, &a).unwrap(), a);
        let neg = FlatWeights::new(schema, a.values.iter().map(|v| -v).collect()).unwrap();
        let mid = fuse_interpolate(&a, &neg).unwrap();
        assert!(mid.values.iter().all(|v| *v == 0.0));
        // linearity cross-check
        let b = random_flat(2, schema);
        let mid = fuse_interpolate(&a, &b).unwrap();
        for ((m, x), y) in mid.values.iter().zip(&a.values).zip(&b.values) {
            assert!((m - (x + y) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn planted_permutation_is_recovered() {
        let schema = ParamSchema::new(5, 6);
        let a = random_flat(3, schema);
        let mut rng = rng_for(3, "plant", 0);
        let g = sample_permutation(&mut rng, 6);
        let b = apply_permutation(&a, &g).unwrap();
        let (g_star, aligned) = permutation_align(&a, &b).unwrap();
        assert_eq!(aligned, a);
        assert_eq!(g_star, g.inverse());
    }

    #[test]
    fn planted_recovery_succeeds_at_r8() {
        let schema = ParamSchema::new(4, 8);
        for seed in 0..10 {
            let a = random_flat(100 + seed, schema);
            let mut rng = rng_for(100 + seed, "plant8", 0);
            let g = sample_permutation(&mut rng, 8);
            let b = apply_permutation(&a, &g).unwrap();
            let (_, aligned) = permutation_align(&a, &b).unwrap();
            assert_eq!(aligned, a, "seed {seed}");
        }
    }

    #[test]
    fn alignment_matches_brute_force_at_r4() {
        let schema = ParamSchema::new(3, 4);
        for seed in 0..10 {
            let a = random_flat(200 + seed, schema);
            let b = random_flat(300 + seed, schema);
            let (g_star, _) = permutation_align(&a, &b).unwrap();
            // brute-force the profit over all 24 permutations
            let head_a = HeadWeights::from_flat(&a);
            let head_b = HeadWeights::from_flat(&b);
            let sig_a = unit_signatures(&head_a);
            let sig_b = unit_signatures(&head_b);
            let profit: Vec<Vec<f64>> = (0..4)
                .map(|i| (0..4).map(|j| dot(&sig_a[i], &sig_b[j])).collect())
                .collect();
            let (best, _) = assign::brute_force_assignment(&profit);
            let got: f64 = g_star.indices().iter().enumerate().map(|(i, &j)| profit[i][j]).sum();
            let want: f64 = best.iter().enumerate().map(|(i, &j)| profit[i][j]).sum();
            assert!((got - want).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn alignment_is_idempotent_and_identity_on_self() {
        let schema = ParamSchema::new(4, 5);
        let a = random_flat(11, schema);
        let (g, aligned) = permutation_align(&a, &a).unwrap();
        assert!(g.is_identity());
        assert_eq!(aligned, a);
        let b = random_flat(12, schema);
        let (_, aligned_b) = permutation_align(&a, &b).unwrap();
        let (g2, _) = permutation_align(&a, &aligned_b).unwrap();
        assert!(g2.is_identity());
    }

    #[test]
    fn interpolation_commutes_with_joint_permutation() {
        let schema = ParamSchema::new(3, 4);
        let a = random_flat(13, schema);
        let b = random_flat(14, schema);
        let mut rng = rng_for(13, "joint", 0);
        let g = sample_permutation(&mut rng, 4);
        let left = fuse_interpolate(
            &apply_permutation(&a, &g).unwrap(),
            &apply_permutation(&b, &g).unwrap(),
        )
        .unwrap();
        let right = apply_permutation(&fuse_interpolate(&a, &b).unwrap(), &g).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn fusion_rejects_overlapping_tasks() {
        let task_a = TaskSpec { task_id: 0, class_ids: vec![0, 1] };
        let task_b = TaskSpec { task_id: 1, class_ids: vec![1, 2] };
        assert!(matches!(union_task(&task_a, &task_b), Err(DownstreamError::OverlappingTasks(1))));
    }

    #[test]
    fn degenerate_self_fusion_reduces_to_single_task_generation() {
        // task B is a relabelled copy with disjoint ids; the generate hook
        // returns a trained head for the union, so accuracies land in [0,1]
        let universe = small_universe();
        let config = quick_config();
        let task_a = TaskSpec { task_id: 21, class_ids: vec![0, 1] };
        let task_b = TaskSpec { task_id: 22, class_ids: vec![4, 5] };
        let mut generate = |task: &TaskSpec| -> Result<FlatWeights, DownstreamError> {
            let (head, _) = train_head(task, &universe, None, &config, 55)?;
            Ok(head.to_flat())
        };
        let result =
            fuse_by_text(&task_a, &task_b, &universe, &eval_config(), 55, &mut generate).unwrap();
        assert!((0.0..=1.0).contains(&result.accuracy_on_a));
        assert!((0.0..=1.0).contains(&result.accuracy_on_b));
        assert!((result.average - 0.5 * (result.accuracy_on_a + result.accuracy_on_b)).abs() < 1e-15);
    }

    #[test]
    fn enhance_returns_bounded_accuracies() {
        let universe = small_universe();
        let config = quick_config();
        let task = TaskSpec { task_id: 31, class_ids: vec![2, 3, 6] };
        let mut enhancer = |w: &FlatWeights, _t: &TaskSpec| Ok(w.clone());
        let (before, after) =
            enhance(&task, &universe, None, &config, 0.5, &eval_config(), 61, &mut enhancer).unwrap();
        assert!((0.0..=1.0).contains(&before));
        assert_eq!(before, after); // identity enhancer
    }

    #[test]
    fn universal_baseline_beats_chance_and_is_deterministic() {
        let universe = small_universe();
        let config = quick_config();
        let head_a = universal_baseline(&universe, &config, 8, 71).unwrap();
        let head_b = universal_baseline(&universe, &config, 8, 71).unwrap();
        assert_eq!(head_a.w1.values(), head_b.w1.values());
        let sub = TaskSpec { task_id: 51, class_ids: vec![0, 3, 5, 7] };
        let (acc, _) =
            evaluate(&head_a.to_flat(), &sub, &universe, &eval_config(), 71, None).unwrap();
        assert!(acc > 0.25, "accuracy {acc}");
        // restricting to a single class forces accuracy 1
        let single = TaskSpec { task_id: 52, class_ids: vec![2] };
        let (acc, _) =
            evaluate(&head_a.to_flat(), &single, &universe, &eval_config(), 71, None).unwrap();
        assert_eq!(acc, 1.0);
    }
}
