//! Command implementations. Each one is deterministic given (config, seed)
//! and prints a short machine-parseable summary.

use crate::config::RunConfig;
use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use t2w::diffusion::losses::StateItem;
use t2w::diffusion::model::{DenoiserEval, DenoiserModel};
use t2w::diffusion::train::{load_checkpoint, save_checkpoint, schedule_for, write_curve_csv, CheckpointHeader};
use t2w::diffusion::{make_schedule, partial_denoise, sample as diffusion_sample, NoiseSchedule};
use t2w::downstream::{
    enhance as run_enhance, evaluate, evaluate_fused, fuse_by_text, fuse_interpolate, init_compare as run_init_compare,
    permutation_align, record_for_task, union_task, DownstreamError, FusionMethod, InitMethod,
};
use t2w::headtrainer::{build_dataset as build_corpus, train_base};
use t2w::landscape::{
    compute_grid, emit_grid, random_direction, trajectory_direction, GridFormat, GridSpec,
};
use t2w::seeds::rng_for;
use t2w::store::{
    read_dataset, read_weights, write_dataset, write_weights, DatasetHeader, UniverseSummary,
    WeightDataset, FORMAT_VERSION,
};
use t2w::taskgen::{build_universe, task_condition, ClassUniverse, TaskSpec};
use t2w::theory::decompose;
use t2w::weightspace::{chunk_with_count, FlatWeights, ParamSchema};

fn universe_for(config: &RunConfig) -> ClassUniverse {
    build_universe(&config.universe_config(), config.seed)
}

fn out_path(config: &RunConfig, name: &str) -> PathBuf {
    config.paths.out_dir.join(name)
}

fn load_task(path: &Path) -> Result<TaskSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading task file {}", path.display()))?;
    let task: TaskSpec = serde_json::from_str(&text)
        .with_context(|| format!("parsing task file {}", path.display()))?;
    Ok(task)
}

struct Generator {
    header: CheckpointHeader,
    eval: DenoiserEval,
    schedule: NoiseSchedule,
}

impl Generator {
    fn load(config: &RunConfig, checkpoint: Option<PathBuf>) -> Result<Self> {
        let path = checkpoint.unwrap_or_else(|| out_path(config, "model.ckpt"));
        let (header, model, _disc) = load_checkpoint(&path)
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
        let schedule = schedule_for(&header.schedule, header.denoiser.n_steps, header.beta_start, header.beta_end)?;
        let eval = DenoiserEval::new(&model)?;
        Ok(Self { header, eval, schedule })
    }

    fn check_universe(&self, universe: &ClassUniverse) -> Result<()> {
        if self.header.embed_dim != universe.config.embed_dim
            || self.header.schema.feature_dim != universe.config.feature_dim
        {
            bail!(
                "checkpoint geometry (E={}, F={}) does not match the configured universe (E={}, F={})",
                self.header.embed_dim,
                self.header.schema.feature_dim,
                universe.config.embed_dim,
                universe.config.feature_dim
            );
        }
        Ok(())
    }

    fn generate(&mut self, task: &TaskSpec, universe: &ClassUniverse, seed_tag: u64) -> Result<FlatWeights> {
        let condition = task_condition(task, universe)?;
        let mut rng = rng_for(self.header.master_seed, "sample", task.task_id ^ seed_tag);
        Ok(diffusion_sample(
            &mut self.eval,
            &condition.vector,
            &self.schedule,
            &self.header.chunk,
            self.header.schema,
            &mut rng,
        )?)
    }
}

pub fn gen_universe(config: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let universe = universe_for(config);
    #[derive(Serialize)]
    struct UniverseFile<'a> {
        summary: UniverseSummary,
        anchors: &'a [Vec<f64>],
        class_embeddings: &'a [Vec<f64>],
    }
    let path = out.unwrap_or_else(|| out_path(config, "universe.json"));
    let file = UniverseFile {
        summary: UniverseSummary::of(&universe),
        anchors: &universe.anchors,
        class_embeddings: &universe.class_embeddings,
    };
    t2w::store::atomic_write(&path, serde_json::to_string_pretty(&file)?.as_bytes())?;
    println!("universe: {} classes, F={}, E={} -> {}",
        universe.len(), universe.config.feature_dim, universe.config.embed_dim, path.display());
    Ok(())
}

/// Global per-block statistics over the seen records.
fn global_chunk_stats(
    records: &[t2w::headtrainer::WeightRecord],
    block_size: usize,
    block_count: Option<usize>,
) -> Result<t2w::weightspace::ChunkSpec> {
    let first = records.first().ok_or_else(|| anyhow!("no records"))?;
    let minimal = first.weights.values.len().div_ceil(block_size);
    let count = block_count.unwrap_or(minimal).max(minimal);
    let (_, mut spec) = chunk_with_count(&first.weights.values, block_size, count)?;
    spec.block_min = vec![f64::INFINITY; spec.block_count];
    spec.block_max = vec![f64::NEG_INFINITY; spec.block_count];
    for record in records {
        let (blocks, _) = chunk_with_count(&record.weights.values, block_size, count)?;
        for (b, block) in blocks.iter().enumerate() {
            for &x in block {
                spec.block_min[b] = spec.block_min[b].min(x);
                spec.block_max[b] = spec.block_max[b].max(x);
            }
        }
    }
    Ok(spec)
}

pub fn build_dataset(config: &RunConfig) -> Result<()> {
    let universe = universe_for(config);
    let head_config = config.head_config();
    let (seen, unseen) = build_corpus(
        &universe,
        config.dataset.n_tasks,
        config.dataset.split_fraction,
        config.dataset.k_min,
        config.dataset.k_max,
        &head_config,
        config.seed,
    )?;
    let chunk = global_chunk_stats(&seen, config.dataset.block_size, config.dataset.block_count)?;
    let schema = ParamSchema::new(universe.config.feature_dim, head_config.hidden_dim);
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        schema,
        embed_dim: universe.config.embed_dim,
        chunk,
        universe: UniverseSummary::of(&universe),
        master_seed: config.seed,
        record_count: 0,
    };
    let mean_acc = |records: &[t2w::headtrainer::WeightRecord]| {
        records.iter().map(|r| r.test_accuracy).sum::<f64>() / records.len().max(1) as f64
    };
    println!(
        "dataset: {} seen (mean test acc {:.3}), {} unseen (mean test acc {:.3})",
        seen.len(), mean_acc(&seen), unseen.len(), mean_acc(&unseen)
    );
    let seen_path = out_path(config, "seen.t2w");
    let unseen_path = out_path(config, "unseen.t2w");
    write_dataset(&seen_path, &WeightDataset { header: header.clone(), records: seen })?;
    write_dataset(&unseen_path, &WeightDataset { header, records: unseen })?;
    println!("wrote {} and {}", seen_path.display(), unseen_path.display());
    Ok(())
}

pub fn train_diffusion(config: &RunConfig, dataset: Option<PathBuf>) -> Result<()> {
    let path = dataset.unwrap_or_else(|| out_path(config, "seen.t2w"));
    let dataset = read_dataset(&path)?;
    let ckpt = out_path(config, "model.ckpt");
    let output = t2w::diffusion::train(&dataset, &config.diffusion_config(), config.seed, Some(&ckpt))?;
    save_checkpoint(&ckpt, &output.header, &output.model, &output.discriminator)?;
    let curve_path = out_path(config, "loss_curve.csv");
    write_curve_csv(&curve_path, &output.curve)?;
    let last = output.curve.last().expect("nonempty curve");
    println!(
        "trained {} steps; final loss_diff {:.4}, loss_sym {:.4}, loss_total {:.4}",
        output.curve.len(), last.loss_diff, last.loss_sym, last.loss_total
    );
    println!("wrote {} and {}", ckpt.display(), curve_path.display());
    Ok(())
}

pub fn sample(config: &RunConfig, task_file: &Path, out: &Path, checkpoint: Option<PathBuf>) -> Result<()> {
    let universe = universe_for(config);
    let task = load_task(task_file)?;
    let mut generator = Generator::load(config, checkpoint)?;
    generator.check_universe(&universe)?;
    let weights = generator.generate(&task, &universe, 0)?;
    write_weights(out, &weights)?;
    println!("sampled weights for task {} ({} classes) -> {}", task.task_id, task.k(), out.display());
    Ok(())
}

pub fn eval(config: &RunConfig, weights: &Path, task_file: &Path, dataset: Option<PathBuf>) -> Result<()> {
    let universe = universe_for(config);
    let task = load_task(task_file)?;
    let weights = read_weights(weights)?;
    let target_record;
    let target = match dataset {
        Some(path) => {
            let data = read_dataset(&path)?;
            target_record = record_for_task(&data.records, task.task_id).cloned();
            target_record.as_ref().map(|r| r.weights.clone())
        }
        None => None,
    };
    let (accuracy, weight_mse) =
        evaluate(&weights, &task, &universe, &config.eval_config(), config.seed, target.as_ref())?;
    println!("accuracy: {accuracy:.4}");
    if let Some(mse) = weight_mse {
        println!("weight-mse: {mse:.6e}");
    }
    Ok(())
}

pub fn init_compare(
    config: &RunConfig,
    task_file: &Path,
    methods: Option<String>,
    epochs: usize,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let universe = universe_for(config);
    let task = load_task(task_file)?;
    let methods: Vec<InitMethod> = match methods {
        Some(list) => list
            .split(',')
            .map(|name| InitMethod::parse(name.trim()).map_err(|e| anyhow!(e.to_string())))
            .collect::<Result<_>>()?,
        None => vec![
            InitMethod::XavierUniform,
            InitMethod::XavierNormal,
            InitMethod::Uniform,
            InitMethod::Normal,
            InitMethod::KaimingNormal,
            InitMethod::KaimingUniform,
            InitMethod::T2w,
        ],
    };
    let needs_generator = methods.contains(&InitMethod::T2w);
    let mut generator = if needs_generator {
        let g = Generator::load(config, checkpoint)?;
        g.check_universe(&universe)?;
        Some(g)
    } else {
        None
    };
    let seed = config.seed;
    let mut generate = |t: &TaskSpec| -> Result<FlatWeights, DownstreamError> {
        generator
            .as_mut()
            .expect("generator loaded when requested")
            .generate(t, &universe, 17)
            .map_err(|e| DownstreamError::Generation(e.to_string()))
    };
    let outcomes = run_init_compare(
        &task,
        &universe,
        &methods,
        &config.head_config(),
        epochs,
        seed,
        &config.eval_config(),
        Some(&mut generate),
    )?;
    println!("| method | t-loss | accuracy |");
    println!("|--------|--------|----------|");
    let mut csv = String::from("method,t_loss,accuracy\n");
    for outcome in &outcomes {
        println!(
            "| {} | {:.4} | {:.4} |",
            outcome.method.name(), outcome.final_test_loss, outcome.accuracy
        );
        csv.push_str(&format!(
            "{},{},{}\n",
            outcome.method.name(), outcome.final_test_loss, outcome.accuracy
        ));
    }
    if let Some(path) = out {
        t2w::store::atomic_write(&path, csv.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn fuse(
    config: &RunConfig,
    task_a: &Path,
    task_b: &Path,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let universe = universe_for(config);
    let task_a = load_task(task_a)?;
    let task_b = load_task(task_b)?;
    union_task(&task_a, &task_b)?; // overlap check up front
    let head_config = config.head_config();
    let eval_config = config.eval_config();
    let base = train_base(&universe, &head_config, config.seed)?;
    let (head_a, _) = t2w::headtrainer::train_head(&task_a, &universe, Some(&base), &head_config, config.seed)?;
    let (head_b, _) = t2w::headtrainer::train_head(&task_b, &universe, Some(&base), &head_config, config.seed)?;
    let flat_a = head_a.to_flat();
    let flat_b = head_b.to_flat();

    let mut generator = Generator::load(config, checkpoint)?;
    generator.check_universe(&universe)?;
    let mut generate = |t: &TaskSpec| -> Result<FlatWeights, DownstreamError> {
        generator.generate(t, &universe, 23).map_err(|e| DownstreamError::Generation(e.to_string()))
    };
    let text = fuse_by_text(&task_a, &task_b, &universe, &eval_config, config.seed, &mut generate)?;
    let interp = evaluate_fused(
        &fuse_interpolate(&flat_a, &flat_b)?,
        &task_a, &task_b, &universe, &eval_config, config.seed,
        FusionMethod::Interpolation,
    )?;
    let (_, aligned_b) = permutation_align(&flat_a, &flat_b)?;
    let aligned = evaluate_fused(
        &fuse_interpolate(&flat_a, &aligned_b)?,
        &task_a, &task_b, &universe, &eval_config, config.seed,
        FusionMethod::PermAlignedInterpolation,
    )?;

    println!("| method | acc A | acc B | avg |");
    println!("|--------|-------|-------|-----|");
    let mut csv = String::from("method,accuracy_a,accuracy_b,average\n");
    for r in [&text, &interp, &aligned] {
        let name = match r.method {
            FusionMethod::TextFusion => "text-fusion",
            FusionMethod::Interpolation => "interpolation",
            FusionMethod::PermAlignedInterpolation => "perm-aligned-interpolation",
        };
        println!("| {} | {:.4} | {:.4} | {:.4} |", name, r.accuracy_on_a, r.accuracy_on_b, r.average);
        csv.push_str(&format!("{},{},{},{}\n", name, r.accuracy_on_a, r.accuracy_on_b, r.average));
    }
    if let Some(path) = out {
        t2w::store::atomic_write(&path, csv.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn enhance(
    config: &RunConfig,
    task_file: &Path,
    fraction: f64,
    from_step: Option<usize>,
    checkpoint: Option<PathBuf>,
) -> Result<()> {
    let universe = universe_for(config);
    let task = load_task(task_file)?;
    let head_config = config.head_config();
    let base = train_base(&universe, &head_config, config.seed)?;
    let mut generator = Generator::load(config, checkpoint)?;
    generator.check_universe(&universe)?;
    let m = from_step.unwrap_or(generator.schedule.n_steps);
    let master_seed = config.seed;
    let mut enhancer = |w: &FlatWeights, t: &TaskSpec| -> Result<FlatWeights, DownstreamError> {
        let condition = task_condition(t, &universe).map_err(|e| DownstreamError::Generation(e.to_string()))?;
        let mut rng = rng_for(master_seed, "enhance", t.task_id);
        partial_denoise(
            w,
            &condition.vector,
            m,
            &mut generator.eval,
            &generator.schedule,
            &generator.header.chunk,
            &mut rng,
        )
        .map_err(|e| DownstreamError::Generation(e.to_string()))
    };
    let (before, after) = run_enhance(
        &task,
        &universe,
        Some(&base),
        &head_config,
        fraction,
        &config.eval_config(),
        config.seed,
        &mut enhancer,
    )?;
    println!("accuracy-before: {before:.4}");
    println!("accuracy-after: {after:.4}");
    Ok(())
}

pub fn landscape(
    config: &RunConfig,
    weights: &Path,
    task_file: &Path,
    init_weights: Option<PathBuf>,
    out: Option<PathBuf>,
    format: &str,
) -> Result<()> {
    let universe = universe_for(config);
    let task = load_task(task_file)?;
    let theta = read_weights(weights)?;
    let delta1 = match init_weights {
        Some(path) => {
            let init = read_weights(&path)?;
            trajectory_direction(&init, &theta)?
        }
        None => {
            let mut rng = rng_for(config.seed, "landscape-d1", task.task_id);
            let flat: Vec<f64> = vec![1.0; theta.schema.flat_len()];
            let unit = 1.0 / (flat.len() as f64).sqrt();
            let base: Vec<f64> = flat.iter().map(|v| v * unit).collect();
            random_direction(&mut rng, theta.schema, &base)?
        }
    };
    let mut rng = rng_for(config.seed, "landscape-d2", task.task_id);
    let delta2 = random_direction(&mut rng, theta.schema, &delta1)?;
    let spec = GridSpec {
        alpha_range: (config.landscape.alpha_min, config.landscape.alpha_max),
        beta_range: (config.landscape.beta_min, config.landscape.beta_max),
        resolution: config.landscape.resolution,
        train_loss: config.landscape.train_loss,
        samples_per_class: config.eval.test_samples_per_class,
    };
    let (grid, evaluations) = compute_grid(
        &theta,
        &delta1,
        &delta2,
        &task,
        &universe,
        config.head.activation,
        config.seed,
        &spec,
        Some(config.paths.cache_dir.as_path()),
    )?;
    let fmt = match format {
        "csv" => GridFormat::Csv,
        "json" => GridFormat::Json,
        other => bail!("unknown grid format `{other}` (csv|json)"),
    };
    let path = out.unwrap_or_else(|| {
        out_path(config, if fmt == GridFormat::Csv { "landscape.csv" } else { "landscape.json" })
    });
    emit_grid(&grid, &path, fmt)?;
    println!(
        "grid {}x{}, baseline {:.6}, {} evaluations -> {}",
        grid.alphas.len(), grid.betas.len(), grid.baseline, evaluations, path.display()
    );
    Ok(())
}

pub fn verify_theory(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
    batch: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    use rand::Rng;
    let report = if checkpoint.is_some() || out_path(config, "model.ckpt").exists() {
        let mut generator = Generator::load(config, checkpoint)?;
        let schema = generator.header.schema;
        let dim = generator.header.chunk.padded_len();
        let mut rng = rng_for(config.seed, "theory-batch", 0);
        let items: Vec<StateItem> = (0..batch)
            .map(|_| StateItem {
                theta0: (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
                v_c: (0..generator.header.embed_dim).map(|_| rng.gen::<f64>()).collect(),
            })
            .collect();
        decompose(&items, &generator.schedule, &mut generator.eval, schema, &mut rng)?
    } else {
        // no trained model around: verify the identity on a random miniature
        let schema = ParamSchema::new(4, 2);
        let dn = t2w::diffusion::DenoiserConfig {
            block_size: 4,
            block_count: 4,
            embed_dim: 8,
            token_dim: 8,
            depth: 1,
            heads: 2,
            ff_mult: 2,
            n_steps: 10,
        };
        let model = DenoiserModel::init(dn.clone(), config.seed);
        let mut eval = DenoiserEval::new(&model)?;
        let schedule = make_schedule(dn.n_steps, 1e-3, 0.1)?;
        let mut rng = rng_for(config.seed, "theory-batch", 0);
        let items: Vec<StateItem> = (0..batch)
            .map(|_| StateItem {
                theta0: (0..dn.state_dim()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
                v_c: (0..dn.embed_dim).map(|_| rng.gen::<f64>()).collect(),
            })
            .collect();
        decompose(&items, &schedule, &mut eval, schema, &mut rng)?
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = out {
        t2w::store::atomic_write(&path, json.as_bytes())?;
    }
    if report.residual > 1e-8 {
        bail!("decomposition residual {} exceeds 1e-8", report.residual);
    }
    Ok(())
}

pub fn gradcheck(cases: usize) -> Result<()> {
    use t2w::graph::check::random_composite_case;
    use t2w::graph::finite_diff_check;
    let mut worst: f64 = 0.0;
    for seed in 0..cases as u64 {
        let (mut graph, root, wrt) = random_composite_case(seed);
        let names: Vec<&str> = wrt.iter().map(|s| s.as_str()).collect();
        let report = finite_diff_check(&mut graph, root, &names, 1e-5, 1e-4)?;
        worst = worst.max(report.max_rel_error);
        if !report.pass {
            bail!("composite case {seed} failed: max rel error {}", report.max_rel_error);
        }
    }
    println!("composite cases: {cases} passed, max rel error {worst:.3e}");
    let mut denoiser_worst: f64 = 0.0;
    for seed in 0..3u64 {
        let (mut graph, root, wrt) = t2w::diffusion::model::denoiser_fd_case(seed);
        let names: Vec<&str> = wrt.iter().map(|s| s.as_str()).collect();
        let report = finite_diff_check(&mut graph, root, &names, 1e-5, 1e-4)?;
        denoiser_worst = denoiser_worst.max(report.max_rel_error);
        if !report.pass {
            bail!("denoiser case {seed} failed: max rel error {}", report.max_rel_error);
        }
    }
    println!("denoiser cases: 3 passed, max rel error {denoiser_worst:.3e}");
    Ok(())
}
