mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Text-conditioned generation of classifier-head weights: corpus building,
/// denoiser training, sampling, and the downstream experiments.
#[derive(Parser)]
#[command(name = "t2w", version, about)]
struct Cli {
    /// Run configuration (TOML). Env vars with the T2W_ prefix override
    /// individual keys, e.g. T2W_DIFFUSION_EPOCHS=10.
    #[arg(long, global = true, default_value = "configs/desk.toml")]
    config: PathBuf,
    /// Worker thread cap (0 = library default). Overrides the config value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the class universe and write its JSON description.
    GenUniverse {
        /// Output path (default: <out_dir>/universe.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train per-task heads and write the seen/unseen weight corpora.
    BuildDataset,
    /// Train the denoiser and critic on the seen corpus.
    TrainDiffusion {
        /// Corpus to train on (default: <out_dir>/seen.t2w).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Generate weights for a task description file.
    Sample {
        #[arg(long)]
        task_file: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to sample from (default: <out_dir>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy (and weight MSE when a matching record exists) of stored
    /// weights on a task.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        task_file: PathBuf,
        /// Corpus searched for a target record with the same task id.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train one task from several initializations under identical settings.
    InitCompare {
        #[arg(long)]
        task_file: PathBuf,
        /// Comma-separated methods (default: every method).
        #[arg(long)]
        methods: Option<String>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Optional CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare text-driven fusion with interpolation baselines on two
    /// class-disjoint tasks.
    Fuse {
        #[arg(long)]
        task_a: PathBuf,
        #[arg(long)]
        task_b: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a head to a fraction of its epoch budget, then denoise it
    /// through the generator and report accuracy before and after.
    Enhance {
        #[arg(long)]
        task_file: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        /// Forward-noise step the refinement starts from (default: N).
        #[arg(long)]
        from_step: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Loss grid around stored weights, with caching and CSV/JSON emission.
    Landscape {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        task_file: PathBuf,
        /// Weights defining the trajectory direction's start point; a random
        /// unit direction is used when absent.
        #[arg(long)]
        init_weights: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Decomposition identity and gap-bound report (JSON).
    VerifyTheory {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference validation of the autodiff engine and the
    /// miniature denoiser.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = config::RunConfig::load(&cli.config)?;
    println!("config-hash: {}", config.hash());
    let threads = cli.threads.unwrap_or(config.threads);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    }
    match cli.command {
        Command::GenUniverse { out } => commands::gen_universe(&config, out),
        Command::BuildDataset => commands::build_dataset(&config),
        Command::TrainDiffusion { dataset } => commands::train_diffusion(&config, dataset),
        Command::Sample { task_file, out, checkpoint } => {
            commands::sample(&config, &task_file, &out, checkpoint)
        }
        Command::Eval { weights, task_file, dataset } => {
            commands::eval(&config, &weights, &task_file, dataset)
        }
        Command::InitCompare { task_file, methods, epochs, checkpoint, out } => {
            commands::init_compare(&config, &task_file, methods, epochs, checkpoint, out)
        }
        Command::Fuse { task_a, task_b, checkpoint, out } => {
            commands::fuse(&config, &task_a, &task_b, checkpoint, out)
        }
        Command::Enhance { task_file, fraction, from_step, checkpoint } => {
            commands::enhance(&config, &task_file, fraction, from_step, checkpoint)
        }
        Command::Landscape { weights, task_file, init_weights, out, format } => {
            commands::landscape(&config, &weights, &task_file, init_weights, out, &format)
        }
        Command::VerifyTheory { checkpoint, batch, out } => {
            commands::verify_theory(&config, checkpoint, batch, out)
        }
        Command::Gradcheck { cases } => commands::gradcheck(cases),
    }
}
