//! Run configuration: one TOML file describing the model, losses,
//! optimizer, stream layout and task sources.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flexdata::{load_idx, mnist_task, Dataset, Objective, StageSpec, StreamConfig, SyntheticModality, SyntheticTaskParams, TaskId};
use crate::model::ModelConfig;
use crate::numerics::SeedStream;
use crate::trainer::{Method, StageData, TaskData, TrainConfig};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "FLAME_OUTPUT_DIR";

/// Ranks reserved per continual stage when a stage leaves `rank` unset.
pub const DEFAULT_STAGE_RANK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub losses: Losses,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub methods: MethodParams,
    pub stream: StreamSection,
    pub tasks: Vec<TaskEntry>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Losses {
    pub w_bal: f64,
    pub w_div: f64,
}

impl Default for Losses {
    fn default() -> Self {
        let t = TrainConfig::default();
        Losses {
            w_bal: t.w_bal,
            w_div: t.w_div,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Optimizer {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub cosine: bool,
    /// Default epochs for any stage that does not set its own.
    pub epochs: usize,
}

impl Default for Optimizer {
    fn default() -> Self {
        let t = TrainConfig::default();
        Optimizer {
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            cosine: t.cosine,
            epochs: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodParams {
    pub ewc_lambda: f64,
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams { ewc_lambda: 100.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub stages: Vec<StageEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub tasks: Vec<String>,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub id: String,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub source: TaskSource,
}

fn default_beta() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSource {
    Synthetic {
        objective: Objective,
        samples: usize,
        eval_samples: usize,
        label_seed: u64,
        #[serde(default)]
        structure_seed: u64,
        modalities: Vec<SyntheticModality>,
    },
    /// Digit images as two modalities; the trailing `eval_fraction` of the
    /// loaded samples is held out.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
    },
}

fn default_eval_fraction() -> f64 {
    0.25
}

fn config_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_err("(document)", e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        // Relative data paths resolve against the config file's directory.
        if let Some(dir) = path.parent() {
            for t in &mut cfg.tasks {
                if let TaskSource::Idx { images, labels, .. } = &mut t.source {
                    for p in [images, labels] {
                        if p.is_relative() {
                            *p = dir.join(&*p);
                        }
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| config_err("model", strip(e)))?;
        self.train_config()
            .validate()
            .map_err(|e| config_err("optimizer", strip(e)))?;
        if self.optimizer.epochs == 0 {
            return Err(config_err("optimizer.epochs", "must be positive"));
        }
        if !(self.methods.ewc_lambda >= 0.0 && self.methods.ewc_lambda.is_finite()) {
            return Err(config_err("methods.ewc_lambda", "must be finite and nonnegative"));
        }
        let mut ids = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if !ids.insert(t.id.as_str()) {
                return Err(config_err(format!("tasks[{i}].id"), format!("duplicate task id {}", t.id)));
            }
            if t.beta != 1.0 && t.beta != -1.0 {
                return Err(config_err(format!("tasks[{i}].beta"), format!("must be +1 or -1, got {}", t.beta)));
            }
            match &t.source {
                TaskSource::Synthetic { samples, eval_samples, .. } => {
                    if *samples == 0 || *eval_samples == 0 {
                        return Err(config_err(format!("tasks[{i}].source"), "sample counts must be positive"));
                    }
                }
                TaskSource::Idx { eval_fraction, limit, .. } => {
                    if !(*eval_fraction > 0.0 && *eval_fraction < 1.0) {
                        return Err(config_err(format!("tasks[{i}].source.eval_fraction"), "must lie in (0, 1)"));
                    }
                    if *limit == Some(0) {
                        return Err(config_err(format!("tasks[{i}].source.limit"), "must be positive"));
                    }
                }
            }
        }
        if self.stream.stages.is_empty() {
            return Err(config_err("stream.stages", "at least one stage is required"));
        }
        for (s, st) in self.stream.stages.iter().enumerate() {
            for (j, t) in st.tasks.iter().enumerate() {
                if !ids.contains(t.as_str()) {
                    return Err(config_err(format!("stream.stages[{s}].tasks[{j}]"), format!("unknown task {t}")));
                }
            }
            if st.epochs == Some(0) {
                return Err(config_err(format!("stream.stages[{s}].epochs"), "must be positive"));
            }
        }
        self.stream_config()
            .validate()
            .map_err(|e| config_err("stream", strip(e)))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.optimizer.lr,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
            batch_size: self.optimizer.batch_size,
            cosine: self.optimizer.cosine,
            w_bal: self.losses.w_bal,
            w_div: self.losses.w_div,
        }
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            stages: self
                .stream
                .stages
                .iter()
                .map(|s| StageSpec {
                    tasks: s.tasks.iter().map(|t| TaskId(t.clone())).collect(),
                    rank: s.rank.unwrap_or(DEFAULT_STAGE_RANK),
                    epochs: s.epochs.unwrap_or(self.optimizer.epochs),
                })
                .collect(),
        }
    }

    pub fn method(&self, name: &str) -> Result<Method> {
        Ok(match name {
            "flame" => Method::Flame,
            "simple_ft" => Method::SimpleFt,
            "ewc" => Method::Ewc {
                lambda: self.methods.ewc_lambda,
            },
            "lora" => Method::Lora,
            other => return Err(Error::Precondition(format!("unknown method {other}"))),
        })
    }

    /// The output directory, unless overridden by [`OUTPUT_DIR_ENV`].
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    fn entry(&self, id: &str) -> Result<&TaskEntry> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| config_err("tasks", format!("unknown task {id}")))
    }

    /// Builds the training and evaluation splits of one task.
    pub fn load_task(&self, id: &str) -> Result<TaskData> {
        let t = self.entry(id)?;
        match &t.source {
            TaskSource::Synthetic {
                objective,
                samples,
                eval_samples,
                label_seed,
                structure_seed,
                modalities,
            } => {
                let params = SyntheticTaskParams {
                    id: t.id.clone(),
                    objective: *objective,
                    samples: *samples,
                    label_seed: *label_seed,
                    structure_seed: *structure_seed,
                    modalities: modalities.clone(),
                };
                let seed = SeedStream::new(self.seed).child("data").child(&t.id).seed();
                crate::scenarios::task_data(&params, *eval_samples, t.beta, seed)
            }
            TaskSource::Idx {
                images,
                labels,
                limit,
                eval_fraction,
            } => {
                let full = mnist_task(&t.id, &load_idx(images)?, &load_idx(labels)?, *limit)?;
                let (train, eval) = split_tail(&full, *eval_fraction)?;
                TaskData::new(train, eval, t.beta)
            }
        }
    }

    /// Loads every stage's tasks in stream order.
    pub fn load_stages(&self) -> Result<Vec<StageData>> {
        self.stream_config()
            .stages
            .iter()
            .map(|s| {
                Ok(StageData {
                    tasks: s.tasks.iter().map(|t| self.load_task(&t.0)).collect::<Result<_>>()?,
                    rank: s.rank,
                    epochs: s.epochs,
                })
            })
            .collect()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Precondition(m) => m,
        other => other.to_string(),
    }
}

fn split_tail(full: &Dataset, eval_fraction: f64) -> Result<(Dataset, Dataset)> {
    let n = full.len();
    let n_eval = ((n as f64) * eval_fraction).round() as usize;
    if n_eval == 0 || n_eval >= n {
        return Err(Error::Format(format!("{n} samples cannot be split with eval fraction {eval_fraction}")));
    }
    let cut = n - n_eval;
    Ok((full.subset(&(0..cut).collect::<Vec<_>>()), full.subset(&(cut..n).collect::<Vec<_>>())))
}
