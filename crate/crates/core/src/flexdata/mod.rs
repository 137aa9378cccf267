//! Flexi-modal data model: variable-length, irregularly sampled modality
//! sequences grouped into task samples, plus the continual stream layout.

mod batch;
mod idx;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use batch::batch_iter;
pub use idx::{load_idx, mnist_task, parse_idx, write_idx, IdxData};
pub use synth::{make_synthetic_task, SyntheticModality, SyntheticTask, SyntheticTaskParams};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalityId(pub String);

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub String);

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ModalityId {
    fn from(s: &str) -> Self {
        ModalityId(s.to_owned())
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId(s.to_owned())
    }
}

/// One modality observation: `L×d_m` values with timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySequence {
    pub modality: ModalityId,
    pub values: Matrix,
    pub timestamps: Vec<f64>,
    pub present: bool,
}

impl ModalitySequence {
    pub fn new(modality: ModalityId, values: Matrix, timestamps: Vec<f64>) -> Result<Self> {
        if timestamps.len() != values.rows() {
            return Err(Error::Precondition(format!(
                "{} timestamps for {} steps",
                timestamps.len(),
                values.rows()
            )));
        }
        if !values.is_finite() {
            return Err(Error::NumericInput(format!("modality {modality} has non-finite values")));
        }
        if timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Precondition(format!(
                "modality {modality} timestamps are not nondecreasing"
            )));
        }
        Ok(ModalitySequence {
            modality,
            values,
            timestamps,
            present: true,
        })
    }

    /// A missing observation of a modality with feature width `dim`.
    pub fn absent(modality: ModalityId, dim: usize) -> Self {
        ModalitySequence {
            modality,
            values: Matrix::zeros(0, dim),
            timestamps: Vec::new(),
            present: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Binary,
    Multiclass(usize),
    Multilabel(usize),
}

impl Objective {
    /// Width of the task head output.
    pub fn outputs(&self) -> usize {
        match *self {
            Objective::Binary => 1,
            Objective::Multiclass(n) | Objective::Multilabel(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Binary(bool),
    Class(usize),
    Multi(Vec<bool>),
}

impl Label {
    pub fn conforms(&self, objective: &Objective) -> bool {
        match (self, objective) {
            (Label::Binary(_), Objective::Binary) => true,
            (Label::Class(c), Objective::Multiclass(n)) => c < n,
            (Label::Multi(v), Objective::Multilabel(n)) => v.len() == *n,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub modalities: BTreeSet<ModalityId>,
    pub objective: Objective,
}

impl TaskSpec {
    pub fn new(id: TaskId, modalities: BTreeSet<ModalityId>, objective: Objective) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::Precondition(format!("task {id} has no modalities")));
        }
        Ok(TaskSpec {
            id,
            modalities,
            objective,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub modalities: BTreeMap<ModalityId, ModalitySequence>,
    pub label: Label,
}

impl Sample {
    pub fn present(&self) -> impl Iterator<Item = (&ModalityId, &ModalitySequence)> {
        self.modalities.iter().filter(|(_, s)| s.present)
    }
}

/// Samples of one task; immutable once built.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: TaskSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(task: TaskSpec, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if let Some(k) = s.modalities.keys().find(|k| !task.modalities.contains(*k)) {
                return Err(Error::Precondition(format!(
                    "sample {i} of task {} carries foreign modality {k}",
                    task.id
                )));
            }
            if !s.label.conforms(&task.objective) {
                return Err(Error::Precondition(format!(
                    "sample {i} label does not match objective of task {}",
                    task.id
                )));
            }
        }
        Ok(Dataset { task, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Subset by sample indices, preserving order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            task: self.task.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Feature width per modality, read from the samples.
    pub fn modality_dims(&self) -> BTreeMap<ModalityId, usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            for (m, seq) in &s.modalities {
                out.entry(m.clone()).or_insert(seq.dim());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub tasks: Vec<TaskId>,
    pub rank: usize,
    pub epochs: usize,
}

/// Ordered stages; stage 0 is multitask pretraining.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub stages: Vec<StageSpec>,
}

impl StreamConfig {
    pub fn new(stages: Vec<StageSpec>) -> Result<Self> {
        let s = StreamConfig { stages };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, st) in self.stages.iter().enumerate() {
            if st.rank < 1 {
                return Err(Error::Precondition(format!("stage {i} reserves rank 0")));
            }
            if st.tasks.is_empty() {
                return Err(Error::Precondition(format!("stage {i} introduces no task")));
            }
            for t in &st.tasks {
                if !seen.insert(t.clone()) {
                    return Err(Error::Precondition(format!("task {t} appears in two stages")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_rejects_duplicate_tasks_and_zero_rank() {
        let st = |t: &str, r| StageSpec {
            tasks: vec![TaskId::from(t)],
            rank: r,
            epochs: 1,
        };
        assert!(StreamConfig::new(vec![st("a", 4), st("b", 4)]).is_ok());
        assert!(StreamConfig::new(vec![st("a", 4), st("a", 4)]).is_err());
        assert!(StreamConfig::new(vec![st("a", 0)]).is_err());
    }

    #[test]
    fn sequence_validation() {
        let m = ModalityId::from("m");
        assert!(ModalitySequence::new(m.clone(), Matrix::zeros(2, 3), vec![0.0, 1.0]).is_ok());
        assert!(ModalitySequence::new(m.clone(), Matrix::zeros(2, 3), vec![1.0, 0.0]).is_err());
        assert!(ModalitySequence::new(m.clone(), Matrix::zeros(2, 3), vec![0.0]).is_err());
        let mut bad = Matrix::zeros(1, 1);
        bad[(0, 0)] = f64::INFINITY;
        assert!(ModalitySequence::new(m.clone(), bad, vec![0.0]).is_err());
        let a = ModalitySequence::absent(m, 3);
        assert!(!a.present && a.is_empty());
    }

    #[test]
    fn task_needs_a_modality() {
        assert!(TaskSpec::new(TaskId::from("t"), BTreeSet::new(), Objective::Binary).is_err());
    }
}
