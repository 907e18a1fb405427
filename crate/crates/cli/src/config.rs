//! Run configuration read from TOML. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use raap_core::model::ModelConfig;
use raap_core::retrieval::TaskSynonymTable;
use raap_core::synthgen::{BenchmarkVariant, Task};
use raap_core::training::TrainConfig;
use serde::Deserialize;

/// Every accepted key, shown by `--help`.
pub const CONFIG_KEYS: &str = "\
CONFIG FILE (TOML, all keys optional):
  seed = 0                      master seed for generation, init and episodes
  variant = \"noiseless\"         noiseless | noisy | reference-informative |
                                noisy-reference-informative
  tasks = [\"open\", \"close\", \"pickup\"]
  n_train = 70                  train scenes per task
  n_test = 30                   test scenes per task
  synonyms = [[\"open\", \"pull\"]] task groups treated as mutually relevant

  [paths]
  data = \"data\"                 directory written by `gen`
  checkpoint = \"model.ckpt\"     may contain {k} and {seed} placeholders
  loss_history = \"loss.csv\"
  reports = \"reports\"

  [model]
  height, width, channels, patch, d, n_heads, d_ff, n_layers, k_max,
  film_hidden, gate_hidden, head_hidden, eps,
  attention = \"log-bias\" | \"per-reference\"

  [train]
  k, candidate_pool, episodes_per_query, max_epochs, patience, lr,
  batch_size, seed, flip_prob, flip_references, min_improvement,
  rule = \"full\" | \"no_gating\" | \"no_similarity\" | \"uniform\"

Command-line flags override the file.";

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoint: String,
    pub loss_history: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            checkpoint: "model.ckpt".into(),
            loss_history: PathBuf::from("loss.csv"),
            reports: PathBuf::from("reports"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: String,
    pub tasks: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub synonyms: TaskSynonymTable,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: "noiseless".into(),
            tasks: Task::ALL.iter().map(|t| t.as_str().to_string()).collect(),
            n_train: 70,
            n_test: 30,
            synonyms: TaskSynonymTable::default(),
            paths: Paths::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| raap_core::Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))?
            }
        };
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| raap_core::Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark()?;
        self.task_list()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.train.k > self.model.k_max {
            return Err(raap_core::Error::Config(format!(
                "train.k={} exceeds model.k_max={}",
                self.train.k, self.model.k_max
            ))
            .into());
        }
        Ok(())
    }

    pub fn benchmark(&self) -> Result<BenchmarkVariant> {
        Ok(self.variant.parse::<BenchmarkVariant>()?)
    }

    pub fn task_list(&self) -> Result<Vec<Task>> {
        if self.tasks.is_empty() {
            return Err(raap_core::Error::Config("tasks must not be empty".into()).into());
        }
        Ok(self.tasks.iter().map(|t| t.parse()).collect::<Result<Vec<Task>, _>>()?)
    }
}

/// Substitutes `{k}` and `{seed}` in a path template.
pub fn expand(template: &str, k: usize, seed: u64) -> PathBuf {
    PathBuf::from(template.replace("{k}", &k.to_string()).replace("{seed}", &seed.to_string()))
}
