//! The run configuration: one TOML file covering every stage, env-var
//! overrides under the `T2W_` prefix, and a resolved-config hash printed by
//! every command.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use t2w::diffusion::DiffusionTrainConfig;
use t2w::downstream::EvalConfig;
use t2w::headtrainer::{FinetuneScope, HeadActivation, HeadTrainConfig};
use t2w::taskgen::UniverseConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 = leave the worker pool at its default size.
    #[serde(default)]
    pub threads: usize,
    pub universe: UniverseSection,
    pub dataset: DatasetSection,
    pub head: HeadSection,
    pub diffusion: DiffusionSection,
    pub eval: EvalSection,
    #[serde(default)]
    pub landscape: LandscapeSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniverseSection {
    pub class_count: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub sigma_f: f64,
    pub alignment: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub n_tasks: usize,
    pub split_fraction: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub block_size: usize,
    /// Optional explicit block count (pads beyond the minimal layout).
    #[serde(default)]
    pub block_count: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
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

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub n_steps: usize,
    #[serde(default = "t2w::diffusion::train::default_schedule_kind")]
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
    #[serde(default)]
    pub augment_permutations: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub test_samples_per_class: usize,
    pub tau: f64,
    pub tau_test: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSection {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub resolution: usize,
    pub train_loss: bool,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self {
            alpha_min: -4.0,
            alpha_max: 4.0,
            beta_min: -4.0,
            beta_max: 4.0,
            resolution: 50,
            train_loss: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
}

pub const ENV_PREFIX: &str = "T2W_";

const SECTIONS: &[&str] =
    &["universe", "dataset", "head", "diffusion", "eval", "landscape", "paths"];

/// Applies `T2W_<SECTION>_<KEY>` / `T2W_<KEY>` environment overrides onto the
/// parsed TOML tree. Unknown sections or keys are errors, matching the
/// strict file parsing.
fn apply_env_overrides(tree: &mut toml::Table) -> Result<()> {
    let mut vars: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, raw_value) in vars {
        let rest = key[ENV_PREFIX.len()..].to_lowercase();
        let value: toml::Value = if let Ok(i) = raw_value.parse::<i64>() {
            toml::Value::Integer(i)
        } else if let Ok(f) = raw_value.parse::<f64>() {
            toml::Value::Float(f)
        } else if let Ok(b) = raw_value.parse::<bool>() {
            toml::Value::Boolean(b)
        } else {
            toml::Value::String(raw_value.clone())
        };
        let (section, field) = match SECTIONS.iter().find(|s| {
            rest.starts_with(&format!("{}_", s))
        }) {
            Some(section) => (Some(*section), rest[section.len() + 1..].to_string()),
            None => (None, rest.clone()),
        };
        match section {
            Some(section) => {
                let entry = tree
                    .entry(section.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
                let table = entry
                    .as_table_mut()
                    .with_context(|| format!("section {section} is not a table"))?;
                table.insert(field, value);
            }
            None => {
                tree.insert(field, value);
            }
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut tree: toml::Table =
            text.parse().with_context(|| format!("parsing config {}", path.display()))?;
        apply_env_overrides(&mut tree)?;
        let config: RunConfig = tree
            .try_into()
            .with_context(|| format!("validating config {} (unknown keys are rejected)", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if !(self.dataset.split_fraction > 0.0 && self.dataset.split_fraction < 1.0) {
            bail!("dataset.split_fraction must be in (0,1)");
        }
        if self.dataset.k_max > self.universe.class_count || self.dataset.k_min == 0 {
            bail!("dataset k range must fit inside the universe");
        }
        if self.diffusion.token_dim % self.diffusion.heads != 0 {
            bail!("diffusion.token_dim must be divisible by diffusion.heads");
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialization of the resolved config.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn universe_config(&self) -> UniverseConfig {
        UniverseConfig {
            class_count: self.universe.class_count,
            feature_dim: self.universe.feature_dim,
            embed_dim: self.universe.embed_dim,
            sigma_f: self.universe.sigma_f,
            alignment: self.universe.alignment,
        }
    }

    pub fn head_config(&self) -> HeadTrainConfig {
        HeadTrainConfig {
            hidden_dim: self.head.hidden_dim,
            epochs_base: self.head.epochs_base,
            epochs_subtask: self.head.epochs_subtask,
            learning_rate: self.head.learning_rate,
            batch_size: self.head.batch_size,
            train_samples_per_class: self.head.train_samples_per_class,
            test_samples_per_class: self.head.test_samples_per_class,
            activation: self.head.activation,
            finetune_scope: self.head.finetune_scope,
        }
    }

    pub fn diffusion_config(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            n_steps: self.diffusion.n_steps,
            schedule: self.diffusion.schedule.clone(),
            beta_start: self.diffusion.beta_start,
            beta_end: self.diffusion.beta_end,
            lambda1: self.diffusion.lambda1,
            lambda2: self.diffusion.lambda2,
            lr: self.diffusion.lr,
            disc_lr: self.diffusion.disc_lr,
            batch_size: self.diffusion.batch_size,
            epochs: self.diffusion.epochs,
            warmup_epochs: self.diffusion.warmup_epochs,
            grad_clip: self.diffusion.grad_clip,
            token_dim: self.diffusion.token_dim,
            depth: self.diffusion.depth,
            heads: self.diffusion.heads,
            ff_mult: self.diffusion.ff_mult,
            disc_hidden: self.diffusion.disc_hidden.clone(),
            augment_permutations: self.diffusion.augment_permutations,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            test_samples_per_class: self.eval.test_samples_per_class,
            tau: self.eval.tau,
            tau_test: self.eval.tau_test,
            activation: self.head.activation,
        }
    }
}
