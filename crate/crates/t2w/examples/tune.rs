// scratch tuning harness; removed before finalizing
use std::time::Instant;
use t2w::diffusion::model::DenoiserEval;
use t2w::diffusion::{make_schedule, sample, train, DiffusionTrainConfig};
use t2w::downstream::{evaluate, EvalConfig};
use t2w::headtrainer::{build_dataset, FinetuneScope, HeadActivation, HeadTrainConfig};
use t2w::seeds::rng_for;
use t2w::store::{DatasetHeader, UniverseSummary, WeightDataset, FORMAT_VERSION};
use t2w::taskgen::{build_universe, task_condition, UniverseConfig};
use t2w::weightspace::{chunk_with_count, ParamSchema};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |name: &str, default: f64| -> f64 {
        args.iter()
            .position(|a| a == name)
            .map(|i| args[i + 1].parse().unwrap())
            .unwrap_or(default)
    };
    let seed = get("--seed", 42.0) as u64;
    let n_tasks = get("--tasks", 220.0) as usize;
    let epochs = get("--epochs", 30.0) as usize;
    let batch = get("--batch", 8.0) as usize;
    let lr = get("--lr", 2e-3);
    let lambda1 = get("--l1", 0.1);
    let lambda2 = get("--l2", 0.01);
    let token_dim = get("--h", 64.0) as usize;
    let depth = get("--depth", 4.0) as usize;
    let k_max = get("--kmax", 32.0) as usize;
    let sigma_f = get("--sf", 0.05);
    let head_lr = get("--headlr", 3e-3);
    let w2_only = std::env::args().any(|a| a == "--w2only");
    let beta_end = get("--bend", 0.1);
    let beta_start = get("--bstart", 1e-3);
    let augment = std::env::args().any(|a| a == "--aug");
    let cosine = std::env::args().any(|a| a == "--cosine");
    let two_phase = std::env::args().any(|a| a == "--twophase");
    let sched_name = {
        let args: Vec<String> = std::env::args().collect();
        args.iter().position(|a| a == "--sched").map(|i| args[i + 1].clone())
    };
    let warmup = get("--warmup", 5.0) as usize;
    let alignment = get("--align", 0.5);

    let universe = build_universe(
        &UniverseConfig { class_count: 40, feature_dim: 32, embed_dim: 32, sigma_f, alignment },
        seed,
    );
    let head_config = HeadTrainConfig {
        hidden_dim: 4,
        epochs_base: get("--base", 1.0) as usize,
        epochs_subtask: 32,
        learning_rate: head_lr,
        batch_size: 64,
        train_samples_per_class: 64,
        test_samples_per_class: 16,
        activation: HeadActivation::Gelu,
        finetune_scope: if w2_only { FinetuneScope::W2Only } else { FinetuneScope::Both },
    };
    let linear_only = std::env::args().any(|a| a == "--linear-only");
    let t0 = Instant::now();
    let n_seen = ((n_tasks as f64) * (200.0 / 220.0)).round() as usize;
    let (seen, unseen) =
        build_dataset(&universe, n_tasks, n_seen as f64 / n_tasks as f64, 8, k_max, &head_config, seed).unwrap();
    let mean = |rs: &[t2w::headtrainer::WeightRecord]| {
        rs.iter().map(|r| r.test_accuracy).sum::<f64>() / rs.len() as f64
    };
    println!(
        "dataset in {:.1}s: {} seen acc {:.3}, {} unseen acc {:.3}",
        t0.elapsed().as_secs_f64(), seen.len(), mean(&seen), unseen.len(), mean(&unseen)
    );

    let schema = ParamSchema::new(32, 4);
    // intrinsic learnability: ridge regression v_c -> theta over seen pairs
    {
        let e = 33usize; // embed + bias
        let d = 256usize;
        let mut xtx = vec![vec![0.0f64; e]; e];
        let mut xty = vec![vec![0.0f64; d]; e];
        for r in &seen {
            let mut x = r.embedding.vector.clone();
            x.push(1.0);
            for i in 0..e {
                for j in 0..e {
                    xtx[i][j] += x[i] * x[j];
                }
                for j in 0..d {
                    xty[i][j] += x[i] * r.weights.values[j];
                }
            }
        }
        for i in 0..e {
            xtx[i][i] += 1e-4;
        }
        // gaussian elimination solving xtx * W = xty
        let mut a = xtx.clone();
        let mut b = xty.clone();
        for col in 0..e {
            let pivot = (col..e).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            let inv = 1.0 / a[col][col];
            for j in 0..e {
                a[col][j] *= inv;
            }
            for j in 0..d {
                b[col][j] *= inv;
            }
            for row in 0..e {
                if row == col { continue; }
                let f = a[row][col];
                if f == 0.0 { continue; }
                for j in 0..e {
                    a[row][j] -= f * a[col][j];
                }
                for j in 0..d {
                    b[row][j] -= f * b[col][j];
                }
            }
        }
        let eval_config = EvalConfig {
            test_samples_per_class: 16,
            tau: 0.5,
            tau_test: 0.4,
            activation: HeadActivation::Gelu,
        };
        let mut lin_acc = 0.0;
        for r in &unseen {
            let mut x = r.embedding.vector.clone();
            x.push(1.0);
            let mut pred = vec![0.0; d];
            for i in 0..e {
                for j in 0..d {
                    pred[j] += x[i] * b[i][j];
                }
            }
            let w = t2w::weightspace::FlatWeights::new(schema, pred).unwrap();
            let (acc, _) = evaluate(&w, &r.task, &universe, &eval_config, seed, None).unwrap();
            lin_acc += acc / unseen.len() as f64;
        }
        println!("linear-regression baseline on unseen: {:.3}", lin_acc);
        if linear_only { return; }
    }

    // global stats over seen
    let (_, mut chunk) = chunk_with_count(&seen[0].weights.values, 32, 8).unwrap();
    chunk.block_min = vec![f64::INFINITY; 8];
    chunk.block_max = vec![f64::NEG_INFINITY; 8];
    for r in &seen {
        let (blocks, _) = chunk_with_count(&r.weights.values, 32, 8).unwrap();
        for (b, block) in blocks.iter().enumerate() {
            for &x in block {
                chunk.block_min[b] = chunk.block_min[b].min(x);
                chunk.block_max[b] = chunk.block_max[b].max(x);
            }
        }
    }
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        schema,
        embed_dim: 32,
        chunk,
        universe: UniverseSummary::of(&universe),
        master_seed: seed,
        record_count: seen.len() as u64,
    };
    let dataset = WeightDataset { header: header.clone(), records: seen };

    let config = DiffusionTrainConfig {
        n_steps: 200,
        schedule: sched_name.clone().unwrap_or_else(|| if two_phase { "two-phase".into() } else if cosine { "cosine".into() } else { "linear".into() }),
        beta_start,
        beta_end,
        lambda1,
        lambda2,
        lr,
        disc_lr: 1e-2,
        batch_size: batch,
        epochs,
        warmup_epochs: warmup,
        grad_clip: 0.1,
        token_dim,
        depth,
        heads: 4,
        ff_mult: 4,
        disc_hidden: vec![128, 64, 32],
        augment_permutations: augment,
    };
    let t1 = Instant::now();
    let out = train(&dataset, &config, seed, None).unwrap();
    let last = &out.curve[out.curve.len() - 1];
    println!(
        "trained in {:.1}s: {} steps, final diff {:.3} sym {:.4} gen {:.3} disc {:.3}",
        t1.elapsed().as_secs_f64(), out.curve.len(), last.loss_diff, last.loss_sym,
        last.loss_adv_gen, last.loss_adv_disc
    );

    // evaluate generated weights on unseen tasks
    let t2 = Instant::now();
    let kind = sched_name.unwrap_or_else(|| {
        if two_phase { "two-phase".into() } else if cosine { "cosine".into() } else { "linear".into() }
    });
    let schedule = t2w::diffusion::train::schedule_for(&kind, 200, beta_start, beta_end).unwrap();
    let mut eval = DenoiserEval::new(&out.model).unwrap();
    let eval_config = EvalConfig {
        test_samples_per_class: 16,
        tau: 0.5,
        tau_test: 0.4,
        activation: HeadActivation::Gelu,
    };
    let mut gen_acc = 0.0;
    let mut trained_acc = 0.0;
    let mut chance = 0.0;
    for record in &unseen {
        let condition = task_condition(&record.task, &universe).unwrap();
        let mut rng = rng_for(seed, "sample", record.task.task_id);
        let weights =
            sample(&mut eval, &condition.vector, &schedule, &header.chunk, schema, &mut rng).unwrap();
        let (acc, _) = evaluate(&weights, &record.task, &universe, &eval_config, seed, None).unwrap();
        gen_acc += acc / unseen.len() as f64;
        trained_acc += record.test_accuracy / unseen.len() as f64;
        chance += 1.0 / (record.task.k() as f64 * unseen.len() as f64);
    }
    println!(
        "eval in {:.1}s: generated {:.3}, trained {:.3}, chance {:.3}, ratio {:.3}",
        t2.elapsed().as_secs_f64(), gen_acc, trained_acc, chance, gen_acc / trained_acc
    );

    // chain diagnostic: walk one reverse chain, checking x0-hat quality and
    // state norms along the way
    {
        use t2w::diffusion::schedule::gaussian_vector;
        use t2w::diffusion::Denoiser;
        let record = &unseen[0];
        let condition = task_condition(&record.task, &universe).unwrap();
        let mut rng = rng_for(seed, "chain-diag", 0);
        let mut state = gaussian_vector(&mut rng, header.chunk.padded_len());
        for n in (1..=200usize).rev() {
            let eps_hat = eval.predict(&state, n, &condition.vector).unwrap();
            let alpha = schedule.alpha_at(n);
            let beta = schedule.beta_at(n);
            let bar = schedule.alpha_bar_at(n);
            if [200, 150, 100, 50, 20, 5, 1].contains(&n) {
                let x0: Vec<f64> = state
                    .iter()
                    .zip(&eps_hat)
                    .map(|(t, e)| (t - (1.0 - bar).sqrt() * e) / bar.sqrt())
                    .collect();
                let w = t2w::diffusion::state_to_weights(&x0, &header.chunk, schema).unwrap();
                let (acc, _) = evaluate(&w, &record.task, &universe, &eval_config, seed, None).unwrap();
                let state_norm = (state.iter().map(|v| v * v).sum::<f64>() / state.len() as f64).sqrt();
                let expected = (bar * 0.15 + (1.0 - bar)).sqrt(); // theta0 var ~0.15
                let x0_norm = (x0.iter().map(|v| v * v).sum::<f64>() / x0.len() as f64).sqrt();
                println!(
                    "  chain n={n}: x0-acc {:.3}, state rms {:.3} (expected ~{:.3}), x0 rms {:.3}",
                    acc, state_norm, expected, x0_norm
                );
            }
            let coef = beta / (1.0 - bar).sqrt();
            let sigma = schedule.posterior_variance_at(n).sqrt();
            if n > 1 {
                let z = gaussian_vector(&mut rng, state.len());
                for ((x, e), zi) in state.iter_mut().zip(&eps_hat).zip(&z) {
                    *x = (*x - coef * e) / alpha.sqrt() + sigma * zi;
                }
            } else {
                for (x, e) in state.iter_mut().zip(&eps_hat) {
                    *x = (*x - coef * e) / alpha.sqrt();
                }
            }
        }
    }

    // diagnostics: loss by timestep bucket on held-out records
    use t2w::diffusion::schedule::{forward_sample, gaussian_vector};
    use t2w::diffusion::Denoiser;
    let mut rng = rng_for(seed, "diag", 0);
    for n in [1usize, 25, 50, 100, 150, 199, 200] {
        let mut total = 0.0;
        let mut count = 0usize;
        for record in unseen.iter().take(8) {
            let state = t2w::diffusion::weights_to_state(&record.weights, &header.chunk);
            let vc = &record.embedding.vector;
            for _ in 0..4 {
                let eps = gaussian_vector(&mut rng, state.len());
                let theta_n = forward_sample(&state, n, &eps, &schedule).unwrap();
                let eps_hat = eval.predict(&theta_n, n, vc).unwrap();
                total += eps.iter().zip(&eps_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                count += 1;
            }
        }
        println!("  unseen loss at n={n}: {:.3}", total / count as f64);
    }

    // noiseless-chain probe: ancestral vs deterministic reverse updates
    {
        use t2w::diffusion::schedule::gaussian_vector;
        let mut det_acc = 0.0;
        for record in &unseen {
            let condition = task_condition(&record.task, &universe).unwrap();
            let mut rng = rng_for(seed, "sample-det", record.task.task_id);
            let start = gaussian_vector(&mut rng, header.chunk.padded_len());
            let state = t2w::diffusion::reverse_chain(
                &mut eval, &condition.vector, &schedule, 200, start, &mut rng, true, true,
            )
            .unwrap();
            let w = t2w::diffusion::state_to_weights(&state, &header.chunk, schema).unwrap();
            let (acc, _) = evaluate(&w, &record.task, &universe, &eval_config, seed, None).unwrap();
            det_acc += acc / unseen.len() as f64;
        }
        println!("  deterministic-chain sampling on unseen: {:.3}", det_acc);
    }

    // conditioning sanity: sample with mismatched condition vectors
    {
        let mut swapped_acc = 0.0;
        for (i, record) in unseen.iter().enumerate() {
            let other = &unseen[(i + 7) % unseen.len()];
            let condition = task_condition(&other.task, &universe).unwrap();
            let mut rng = rng_for(seed, "sample", record.task.task_id);
            let weights =
                sample(&mut eval, &condition.vector, &schedule, &header.chunk, schema, &mut rng).unwrap();
            let (acc, _) = evaluate(&weights, &record.task, &universe, &eval_config, seed, None).unwrap();
            swapped_acc += acc / unseen.len() as f64;
        }
        println!("  swapped-condition sampling on unseen: {:.3}", swapped_acc);
    }

    // baselines: dataset-mean weights and the x0-hat single-shot estimate
    let mut mean_values = vec![0.0; schema.flat_len()];
    for r in &dataset.records {
        for (m, v) in mean_values.iter_mut().zip(&r.weights.values) {
            *m += v / dataset.records.len() as f64;
        }
    }
    let mean_weights = t2w::weightspace::FlatWeights::new(schema, mean_values).unwrap();
    let mut mean_acc = 0.0;
    for record in &unseen {
        let (acc, _) = evaluate(&mean_weights, &record.task, &universe, &eval_config, seed, None).unwrap();
        mean_acc += acc / unseen.len() as f64;
    }
    println!("  dataset-mean weights on unseen: {:.3}", mean_acc);

    // single-shot x0 estimate from a mid-range step of the TRUE weights
    for n in [1usize, 5, 20, 50, 120] {
        let mut x0_acc = 0.0;
        for record in &unseen {
            let state = t2w::diffusion::weights_to_state(&record.weights, &header.chunk);
            let eps = gaussian_vector(&mut rng, state.len());
            let theta_n = forward_sample(&state, n, &eps, &schedule).unwrap();
            let eps_hat = eval.predict(&theta_n, n, &record.embedding.vector).unwrap();
            let bar = schedule.alpha_bar_at(n);
            let x0: Vec<f64> = theta_n
                .iter()
                .zip(&eps_hat)
                .map(|(t, e)| (t - (1.0 - bar).sqrt() * e) / bar.sqrt())
                .collect();
            let w = t2w::diffusion::state_to_weights(&x0, &header.chunk, schema).unwrap();
            let (acc, _) = evaluate(&w, &record.task, &universe, &eval_config, seed, None).unwrap();
            x0_acc += acc / unseen.len() as f64;
        }
        println!("  x0-hat(n={n}) of true weights on unseen: {:.3}", x0_acc);
    }
}
