//! Alternating training of the denoiser and the weight-space critic.
//!
//! Every epoch the denoiser takes gradient steps on
//! `L_diff + lambda1 L_sym + lambda2 L_gen` with the critic frozen, then the
//! critic takes steps on its real/fake objective with the denoiser frozen.
//! The generated input to the critic is the one-step clean estimate
//! `x0_hat = (theta_n - sqrt(1-a_bar) eps_hat) / sqrt(a_bar)`.
//!
//! Per-item work runs on a pool of worker graphs; per-item gradients are
//! reduced in slot order, so results do not depend on the thread count.

use super::discriminator::{
    append_disc_forward, bind_disc_params, declare_disc_inputs, DiscConfig, Discriminator,
};
use super::model::{
    append_forward, declare_param_inputs, timestep_embedding, DenoiserConfig, DenoiserModel,
};
use super::schedule::{forward_sample, gaussian_vector, make_burst_schedule, make_cosine_schedule, make_geo_tail_schedule, make_geometric_schedule, make_schedule, make_two_phase_schedule, NoiseSchedule};
use super::DiffusionError;
use crate::graph::{Graph, NodeId};
use crate::matrix::DenseMatrix;
use crate::optim::{clip_global_norm, cosine_warmup_scale, Adam, AdamConfig};
use crate::seeds::rng_for;
use crate::store::{DatasetHeader, WeightDataset};
use crate::weightspace::{apply_permutation_flatvec, flat_index_map, sample_permutation, ChunkSpec, ParamSchema};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub n_steps: usize,
    /// "linear" or "cosine"; cosine ignores the beta endpoints.
    #[serde(default = "default_schedule_kind")]
    pub schedule: String,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub disc_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub grad_clip: f64,
    pub token_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub disc_hidden: Vec<usize>,
    /// Ablation: train on permuted inputs with unpermuted targets instead of
    /// the explicit symmetry loss.
    pub augment_permutations: bool,
}

pub fn default_schedule_kind() -> String {
    "linear".to_string()
}

/// Builds the schedule named by the config.
pub fn schedule_for(kind: &str, n_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    match kind {
        "linear" => make_schedule(n_steps, beta_start, beta_end),
        "cosine" => make_cosine_schedule(n_steps),
        "two-phase" => make_two_phase_schedule(n_steps, beta_start, beta_end),
        "geometric" => make_geometric_schedule(n_steps, beta_start, beta_end),
        "geo-tail" => make_geo_tail_schedule(n_steps, beta_start, beta_end),
        "burst-15" => make_burst_schedule(n_steps, beta_start, 0.15, 2e-3),
        "burst-50" => make_burst_schedule(n_steps, beta_start, 0.50, 2e-3),
        other => Err(DiffusionError::BadSchedule { detail: format!("unknown schedule kind `{other}`") }),
    }
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            n_steps: 200,
            schedule: default_schedule_kind(),
            beta_start: 1e-4,
            beta_end: 0.02,
            lambda1: 0.1,
            lambda2: 0.01,
            lr: 4e-4,
            disc_lr: 1e-2,
            batch_size: 32,
            epochs: 30,
            warmup_epochs: 5,
            grad_clip: 0.1,
            token_dim: 64,
            depth: 4,
            heads: 4,
            ff_mult: 4,
            disc_hidden: vec![128, 64, 32],
            augment_permutations: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub denoiser: DenoiserConfig,
    pub disc: DiscConfig,
    pub schema: ParamSchema,
    pub embed_dim: usize,
    pub chunk: ChunkSpec,
    #[serde(default = "default_schedule_kind")]
    pub schedule: String,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub training_step: u64,
    pub epoch: usize,
    pub optimizer_state: bool,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub loss_diff: f64,
    pub loss_sym: f64,
    pub loss_adv_disc: f64,
    pub loss_adv_gen: f64,
    pub loss_total: f64,
}

pub struct TrainOutput {
    pub model: DenoiserModel,
    pub discriminator: Discriminator,
    pub schedule: NoiseSchedule,
    pub curve: Vec<CurveRow>,
    pub header: CheckpointHeader,
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<(), crate::store::StoreError> {
    let mut out = String::from("step,loss_diff,loss_sym,loss_adv_disc,loss_adv_gen,loss_total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.loss_diff, r.loss_sym, r.loss_adv_disc, r.loss_adv_gen, r.loss_total
        ));
    }
    crate::store::atomic_write(path, out.as_bytes())
}

pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    model: &DenoiserModel,
    disc: &Discriminator,
) -> Result<(), crate::store::StoreError> {
    let mut tensors = model.params.clone();
    tensors.extend(disc.params.iter().cloned());
    crate::store::write_checkpoint(path, header, &tensors)
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(CheckpointHeader, DenoiserModel, Discriminator), DiffusionError> {
    let (header, tensors): (CheckpointHeader, Vec<DenseMatrix>) =
        crate::store::read_checkpoint(path)?;
    let n_model = header.denoiser.param_shapes().len();
    let n_disc = header.disc.param_shapes().len();
    if tensors.len() != n_model + n_disc {
        return Err(DiffusionError::GeometryMismatch {
            detail: format!("checkpoint has {} tensors, configs need {}", tensors.len(), n_model + n_disc),
        });
    }
    let mut tensors = tensors;
    let disc_params = tensors.split_off(n_model);
    for ((_, shape), tensor) in header.denoiser.param_shapes().iter().zip(&tensors) {
        if tensor.shape() != *shape {
            return Err(DiffusionError::GeometryMismatch {
                detail: format!("tensor shape {:?} vs declared {:?}", tensor.shape(), shape),
            });
        }
    }
    let model = DenoiserModel { config: header.denoiser.clone(), params: tensors };
    let disc = Discriminator { config: header.disc.clone(), params: disc_params };
    Ok((header, model, disc))
}

/// Handles into the per-item training graph.
struct ItemGraph {
    graph: Graph,
    param_ids: Vec<NodeId>,
    x0_node: NodeId,
    loss_diff: NodeId,
    loss_sym: NodeId,
    loss_gen: NodeId,
    disc_metric: NodeId,
    total: NodeId,
}

impl ItemGraph {
    fn build(
        dn: &DenoiserConfig,
        disc: &DiscConfig,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<Self, DiffusionError> {
        let d = dn.state_dim();
        let mut g = Graph::new();
        declare_param_inputs(&mut g, dn);
        declare_disc_inputs(&mut g, disc);
        let theta_n = g.input("theta_n", dn.block_count, dn.block_size);
        let theta_n_perm = g.input("theta_n_perm", dn.block_count, dn.block_size);
        let tstep = g.input("tstep", 1, dn.token_dim);
        let vc = g.input("vc", 1, dn.embed_dim);
        let eps_col = g.input("eps_col", d, 1);
        let perm_idx = g.input("perm_idx", d, 1);
        let theta_col = g.input("theta_col", d, 1);
        let coef_a = g.input("coef_a", 1, 1);
        let coef_b = g.input("coef_b", 1, 1);
        let theta0_col = g.input("theta0_col", d, 1);
        let one = g.input("one", 1, 1);

        let pass1 = append_forward(&mut g, dn, theta_n, tstep, vc)?;
        // one-step clean estimate feeding the critic
        let xa = g.matmul(theta_col, coef_a)?;
        let xb = g.matmul(pass1.eps_col, coef_b)?;
        let x0 = g.add(xa, xb)?;
        let x0_node = x0;
        let x0_row = g.transpose(x0);

        let pass2 = append_forward(&mut g, dn, theta_n_perm, tstep, vc)?;

        let diff_raw = g.mse_loss(pass1.eps_col, eps_col)?;
        let loss_diff = g.scale(diff_raw, d as f64);

        let g_eps1 = g.gather_rows(pass1.eps_col, perm_idx, d)?;
        let sym_raw = g.mse_loss(pass2.eps_col, g_eps1)?;
        let loss_sym = g.scale(sym_raw, d as f64);

        let p_fake = append_disc_forward(&mut g, disc, x0_row)?;
        let log_fake = g.log(p_fake);
        let loss_gen = g.scale(log_fake, -1.0);

        let theta0_row = g.transpose(theta0_col);
        let p_real = append_disc_forward(&mut g, disc, theta0_row)?;
        let log_real = g.log(p_real);
        let neg_fake = g.scale(p_fake, -1.0);
        let one_minus_fake = g.add(neg_fake, one)?;
        let log_one_minus = g.log(one_minus_fake);
        let metric_sum = g.add(log_real, log_one_minus)?;
        let disc_metric = g.scale(metric_sum, -1.0);

        let sym_scaled = g.scale(loss_sym, lambda1);
        let gen_scaled = g.scale(loss_gen, lambda2);
        let partial = g.add(loss_diff, sym_scaled)?;
        let total = g.add(partial, gen_scaled)?;

        let param_ids = dn
            .param_shapes()
            .iter()
            .map(|(name, _)| g.input_id(name).expect("declared"))
            .collect();
        Ok(Self { graph: g, param_ids, x0_node, loss_diff, loss_sym, loss_gen, disc_metric, total })
    }

    fn bind_model(&mut self, model: &DenoiserModel) -> Result<(), DiffusionError> {
        for (name, value) in model.param_names().iter().zip(&model.params) {
            self.graph.set_input_from(name, value)?;
        }
        Ok(())
    }

    fn bind_disc(&mut self, disc: &Discriminator) -> Result<(), DiffusionError> {
        bind_disc_params(&mut self.graph, disc)?;
        Ok(())
    }

    fn bind_item(&mut self, item: &PreparedItem) -> Result<(), DiffusionError> {
        self.graph.set_input_from("theta_n", &item.theta_n)?;
        self.graph.set_input_from("theta_n_perm", &item.theta_n_perm)?;
        self.graph.set_input_from("tstep", &item.tstep)?;
        self.graph.set_input_from("vc", &item.vc)?;
        self.graph.set_input_from("eps_col", &item.eps_col)?;
        self.graph.set_input_from("perm_idx", &item.perm_idx)?;
        self.graph.set_input_from("theta_col", &item.theta_col)?;
        self.graph.set_input_from("coef_a", &item.coef_a)?;
        self.graph.set_input_from("coef_b", &item.coef_b)?;
        self.graph.set_input_from("theta0_col", &item.theta0_col)?;
        Ok(())
    }

    /// Full forward/backward for one item; gradients come back flattened in
    /// parameter declaration order.
    fn run_item(&mut self, item: &PreparedItem) -> Result<ItemOutput, DiffusionError> {
        self.bind_item(item)?;
        self.graph.evaluate(self.total)?;
        self.graph.backward(self.total)?;
        let mut grads = Vec::new();
        for &id in &self.param_ids {
            grads.extend_from_slice(self.graph.grad(id).values());
        }
        Ok(ItemOutput {
            grads,
            loss_diff: self.graph.value(self.loss_diff).values()[0],
            loss_sym: self.graph.value(self.loss_sym).values()[0],
            loss_gen: self.graph.value(self.loss_gen).values()[0],
            disc_metric: self.graph.value(self.disc_metric).values()[0],
            total: self.graph.value(self.total).values()[0],
        })
    }

    /// Forward only, up to the one-step clean estimate (critic training data).
    fn run_x0(&mut self, item: &PreparedItem) -> Result<Vec<f64>, DiffusionError> {
        self.bind_item(item)?;
        let x0 = self.graph.evaluate(self.x0_node)?;
        Ok(x0.values().to_vec())
    }
}

struct ItemOutput {
    grads: Vec<f64>,
    loss_diff: f64,
    loss_sym: f64,
    loss_gen: f64,
    disc_metric: f64,
    total: f64,
}

/// Everything one training item binds into the graph.
struct PreparedItem {
    theta_n: DenseMatrix,
    theta_n_perm: DenseMatrix,
    tstep: DenseMatrix,
    vc: DenseMatrix,
    eps_col: DenseMatrix,
    perm_idx: DenseMatrix,
    theta_col: DenseMatrix,
    coef_a: DenseMatrix,
    coef_b: DenseMatrix,
    theta0_col: DenseMatrix,
}

fn prepare_item(
    theta0: &[f64],
    vc: &[f64],
    schema: ParamSchema,
    dn: &DenoiserConfig,
    schedule: &NoiseSchedule,
    augment: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<PreparedItem, DiffusionError> {
    let d = dn.state_dim();
    let n = rng.gen_range(1..=schedule.n_steps);
    let eps = gaussian_vector(rng, d);
    let g = sample_permutation(rng, schema.hidden_dim);
    let mut theta_n = forward_sample(theta0, n, &eps, schedule)?;
    let mut clean = theta0.to_vec();
    if augment {
        // permuted input, unpermuted target
        theta_n = apply_permutation_flatvec(&theta_n, &g, schema)?;
        clean = apply_permutation_flatvec(&clean, &g, schema)?;
    }
    let theta_n_perm = apply_permutation_flatvec(&theta_n, &g, schema)?;
    let mut idx: Vec<f64> = flat_index_map(&g, schema).iter().map(|&i| i as f64).collect();
    idx.extend((schema.flat_len()..d).map(|i| i as f64));
    let bar = schedule.alpha_bar_at(n);
    let coef_a = 1.0 / bar.sqrt();
    let coef_b = -((1.0 - bar).sqrt()) / bar.sqrt();
    Ok(PreparedItem {
        theta_n: DenseMatrix::from_vec_unchecked(dn.block_count, dn.block_size, theta_n.clone()),
        theta_n_perm: DenseMatrix::from_vec_unchecked(dn.block_count, dn.block_size, theta_n_perm),
        tstep: DenseMatrix::row_vector(timestep_embedding(n, dn.token_dim)),
        vc: DenseMatrix::row_vector(vc.to_vec()),
        eps_col: DenseMatrix::column_vector(eps),
        perm_idx: DenseMatrix::column_vector(idx),
        theta_col: DenseMatrix::column_vector(theta_n),
        coef_a: DenseMatrix::from_vec_unchecked(1, 1, vec![coef_a]),
        coef_b: DenseMatrix::from_vec_unchecked(1, 1, vec![coef_b]),
        theta0_col: DenseMatrix::column_vector(clean),
    })
}

fn grads_to_matrices(flat: &[f64], shapes: &[(String, (usize, usize))], scale: f64) -> Vec<DenseMatrix> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for (_, (rows, cols)) in shapes {
        let len = rows * cols;
        let values = flat[offset..offset + len].iter().map(|v| v * scale).collect();
        out.push(DenseMatrix::from_vec_unchecked(*rows, *cols, values));
        offset += len;
    }
    out
}

struct DiscGraph {
    graph: Graph,
    loss: NodeId,
    param_ids: Vec<NodeId>,
    batch: usize,
    dim: usize,
}

impl DiscGraph {
    fn build(config: &DiscConfig, batch: usize) -> Result<Self, DiffusionError> {
        let mut g = Graph::new();
        declare_disc_inputs(&mut g, config);
        let x_real = g.input("x_real", batch, config.input_dim);
        let x_fake = g.input("x_fake", batch, config.input_dim);
        let ones = g.input("ones", batch, 1);
        let p_real = append_disc_forward(&mut g, config, x_real)?;
        let p_fake = append_disc_forward(&mut g, config, x_fake)?;
        let log_real = g.log(p_real);
        let neg_fake = g.scale(p_fake, -1.0);
        let one_minus = g.add(neg_fake, ones)?;
        let log_fake = g.log(one_minus);
        let mr = g.reduce_mean(log_real);
        let mf = g.reduce_mean(log_fake);
        let sum = g.add(mr, mf)?;
        let loss = g.scale(sum, -1.0);
        let param_ids = config
            .param_shapes()
            .iter()
            .map(|(name, _)| g.input_id(name).expect("declared"))
            .collect();
        Ok(Self { graph: g, loss, param_ids, batch, dim: config.input_dim })
    }

    fn step(
        &mut self,
        disc: &mut Discriminator,
        adam: &mut Adam,
        real: &[&[f64]],
        fake: &[Vec<f64>],
        grad_clip: f64,
    ) -> Result<f64, DiffusionError> {
        let mut xr = DenseMatrix::zeros(self.batch, self.dim);
        let mut xf = DenseMatrix::zeros(self.batch, self.dim);
        for (row, (r, f)) in real.iter().zip(fake).enumerate() {
            xr.values_mut()[row * self.dim..(row + 1) * self.dim].copy_from_slice(r);
            xf.values_mut()[row * self.dim..(row + 1) * self.dim].copy_from_slice(f);
        }
        bind_disc_params(&mut self.graph, disc)?;
        self.graph.set_input("x_real", xr)?;
        self.graph.set_input("x_fake", xf)?;
        self.graph.set_input("ones", DenseMatrix::from_vec_unchecked(self.batch, 1, vec![1.0; self.batch]))?;
        let loss = self.graph.evaluate(self.loss)?.values()[0];
        self.graph.backward(self.loss)?;
        let mut grads: Vec<DenseMatrix> =
            self.param_ids.iter().map(|&id| self.graph.grad(id).clone()).collect();
        clip_global_norm(&mut grads, grad_clip);
        adam.step(&mut disc.params, &grads, 1.0);
        Ok(loss)
    }
}

/// Trains on the seen corpus. If `checkpoint_path` is given, a checkpoint is
/// written after every epoch, so a divergence abort always leaves the last
/// good state on disk.
pub fn train(
    dataset: &WeightDataset,
    config: &DiffusionTrainConfig,
    master_seed: u64,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutput, DiffusionError> {
    if dataset.records.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let header = &dataset.header;
    let schema = header.schema;
    let dn_config = DenoiserConfig {
        block_size: header.chunk.block_size,
        block_count: header.chunk.block_count,
        embed_dim: header.embed_dim,
        token_dim: config.token_dim,
        depth: config.depth,
        heads: config.heads,
        ff_mult: config.ff_mult,
        n_steps: config.n_steps,
    };
    let disc_config =
        DiscConfig { input_dim: dn_config.state_dim(), hidden: config.disc_hidden.clone() };
    let schedule = schedule_for(&config.schedule, config.n_steps, config.beta_start, config.beta_end)?;

    let mut model = DenoiserModel::init(dn_config.clone(), crate::seeds::derive_seed(master_seed, "denoiser-init", 0));
    let mut disc = Discriminator::init(disc_config.clone(), crate::seeds::derive_seed(master_seed, "disc-init", 0));

    // corpus in diffusion state space
    let states: Vec<Vec<f64>> =
        dataset.records.iter().map(|r| super::weights_to_state(&r.weights, &header.chunk)).collect();
    let conditions: Vec<&[f64]> =
        dataset.records.iter().map(|r| r.embedding.vector.as_slice()).collect();

    let effective_lambda1 = if config.augment_permutations { 0.0 } else { config.lambda1 };
    let template = ItemGraph::build(&dn_config, &disc_config, effective_lambda1, config.lambda2)?;
    let workers = rayon::current_num_threads().clamp(1, config.batch_size.max(1));
    let mut pool: Vec<ItemGraph> = Vec::with_capacity(workers);
    for _ in 0..workers {
        pool.push(ItemGraph {
            graph: template.graph.clone(),
            param_ids: template.param_ids.clone(),
            x0_node: template.x0_node,
            loss_diff: template.loss_diff,
            loss_sym: template.loss_sym,
            loss_gen: template.loss_gen,
            disc_metric: template.disc_metric,
            total: template.total,
        })
    }
    // static one-cell constant
    for w in pool.iter_mut() {
        w.graph.set_input("one", DenseMatrix::from_vec_unchecked(1, 1, vec![1.0]))?;
    }

    let shapes = dn_config.param_shapes();
    let mut adam = Adam::new(
        AdamConfig::with_lr(config.lr),
        &shapes.iter().map(|(_, s)| *s).collect::<Vec<_>>(),
    );
    let mut disc_adam = Adam::new(
        AdamConfig::with_lr(config.disc_lr),
        &disc_config.param_shapes().iter().map(|(_, s)| *s).collect::<Vec<_>>(),
    );
    let mut disc_graph = DiscGraph::build(&disc_config, config.batch_size)?;

    let n_items = states.len();
    let batch = config.batch_size;
    let steps_per_epoch = n_items.div_ceil(batch);
    let mut curve = Vec::new();
    let mut global_step = 0u64;
    let mut last_disc_loss = f64::NAN;

    let make_header = |epoch: usize, step: u64| CheckpointHeader {
        denoiser: dn_config.clone(),
        disc: disc_config.clone(),
        schema,
        embed_dim: header.embed_dim,
        chunk: header.chunk.clone(),
        schedule: config.schedule.clone(),
        beta_start: config.beta_start,
        beta_end: config.beta_end,
        lambda1: config.lambda1,
        lambda2: config.lambda2,
        training_step: step,
        epoch,
        optimizer_state: false,
        master_seed,
    };

    for epoch in 0..config.epochs {
        let lr_scale = cosine_warmup_scale(epoch, config.epochs, config.warmup_epochs);
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut rng_for(master_seed, "diff-shuffle", epoch as u64));

        for step in 0..steps_per_epoch {
            for w in pool.iter_mut() {
                w.bind_model(&model)?;
                w.bind_disc(&disc)?;
            }
            let mut items = Vec::with_capacity(batch);
            for slot in 0..batch {
                let record = order[(step * batch + slot) % n_items];
                let counter = (epoch as u64 * steps_per_epoch as u64 + step as u64)
                    * batch as u64
                    + slot as u64;
                let mut rng = rng_for(master_seed, "diff-item", counter);
                items.push(prepare_item(
                    &states[record],
                    conditions[record],
                    schema,
                    &dn_config,
                    &schedule,
                    config.augment_permutations,
                    &mut rng,
                )?);
            }
            let chunk_size = items.len().div_ceil(pool.len());
            let chunks: Vec<&[PreparedItem]> = items.chunks(chunk_size).collect();
            let results: Vec<Vec<ItemOutput>> = pool[..chunks.len()]
                .par_iter_mut()
                .zip(chunks.into_par_iter())
                .map(|(worker, chunk)| {
                    chunk.iter().map(|item| worker.run_item(item)).collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?;

            let total_params: usize = shapes.iter().map(|(_, (r, c))| r * c).sum();
            let mut grad_acc = vec![0.0; total_params];
            let mut sums = [0.0f64; 5];
            for out in results.iter().flatten() {
                for (a, g) in grad_acc.iter_mut().zip(&out.grads) {
                    *a += g;
                }
                sums[0] += out.loss_diff;
                sums[1] += out.loss_sym;
                sums[2] += out.loss_gen;
                sums[3] += out.disc_metric;
                sums[4] += out.total;
            }
            let inv_b = 1.0 / batch as f64;
            let mean_total = sums[4] * inv_b;
            if !mean_total.is_finite() || mean_total > DIVERGENCE_LIMIT {
                if let Some(path) = checkpoint_path {
                    save_checkpoint(path, &make_header(epoch, global_step), &model, &disc)?;
                }
                return Err(DiffusionError::Diverged { epoch, step, loss: mean_total });
            }
            let mut grads = grads_to_matrices(&grad_acc, &shapes, inv_b);
            clip_global_norm(&mut grads, config.grad_clip);
            adam.step(&mut model.params, &grads, lr_scale);

            curve.push(CurveRow {
                step: global_step,
                loss_diff: sums[0] * inv_b,
                loss_sym: sums[1] * inv_b,
                loss_adv_disc: sums[3] * inv_b,
                loss_adv_gen: sums[2] * inv_b,
                loss_total: mean_total,
            });
            global_step += 1;
        }

        // critic phase (skipped entirely when the adversarial term is ablated)
        if config.lambda2 > 0.0 {
            for w in pool.iter_mut() {
                w.bind_model(&model)?;
            }
            let mut disc_order: Vec<usize> = (0..n_items).collect();
            disc_order.shuffle(&mut rng_for(master_seed, "disc-shuffle", epoch as u64));
            for step in 0..steps_per_epoch {
                let mut items = Vec::with_capacity(batch);
                let mut real_refs: Vec<&[f64]> = Vec::with_capacity(batch);
                for slot in 0..batch {
                    let record = disc_order[(step * batch + slot) % n_items];
                    let counter = (epoch as u64 * steps_per_epoch as u64 + step as u64)
                        * batch as u64
                        + slot as u64;
                    let mut rng = rng_for(master_seed, "disc-item", counter);
                    items.push(prepare_item(
                        &states[record],
                        conditions[record],
                        schema,
                        &dn_config,
                        &schedule,
                        config.augment_permutations,
                        &mut rng,
                    )?);
                    real_refs.push(&states[record]);
                }
                let chunk_size = items.len().div_ceil(pool.len());
                let chunks: Vec<&[PreparedItem]> = items.chunks(chunk_size).collect();
                let fakes: Vec<Vec<Vec<f64>>> = pool[..chunks.len()]
                    .par_iter_mut()
                    .zip(chunks.into_par_iter())
                    .map(|(worker, chunk)| {
                        chunk.iter().map(|item| worker.run_x0(item)).collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let fakes: Vec<Vec<f64>> = fakes.concat();
                last_disc_loss =
                    disc_graph.step(&mut disc, &mut disc_adam, &real_refs, &fakes, config.grad_clip)?;
                if !last_disc_loss.is_finite() {
                    if let Some(path) = checkpoint_path {
                        save_checkpoint(path, &make_header(epoch, global_step), &model, &disc)?;
                    }
                    return Err(DiffusionError::Diverged { epoch, step, loss: last_disc_loss });
                }
            }
        }
        let _ = last_disc_loss;

        if let Some(path) = checkpoint_path {
            save_checkpoint(path, &make_header(epoch + 1, global_step), &model, &disc)?;
        }
    }

    let header = make_header(config.epochs, global_step);
    Ok(TrainOutput { model, discriminator: disc, schedule, curve, header })
}

/// Convenience for building the in-memory dataset geometry the trainer needs
/// when tests construct corpora by hand.
pub fn dataset_from_records(
    header: DatasetHeader,
    records: Vec<crate::headtrainer::WeightRecord>,
) -> WeightDataset {
    WeightDataset { header, records }
}
