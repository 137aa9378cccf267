//! Ready-made synthetic task builders shared by tests, the acceptance
//! suite and example configs.

use crate::error::Result;
use crate::flexdata::{make_synthetic_task, Objective, SyntheticModality, SyntheticTaskParams};
use crate::numerics::SeedStream;
use crate::trainer::TaskData;

pub fn modality(id: &str, dim: usize, rank: usize, lengths: (usize, usize)) -> SyntheticModality {
    SyntheticModality {
        id: id.into(),
        dim,
        rank,
        min_length: lengths.0,
        max_length: lengths.1,
        noise: 0.05,
        missing_rate: 0.0,
    }
}

pub fn binary_task(id: &str, samples: usize, label_seed: u64, modalities: Vec<SyntheticModality>) -> SyntheticTaskParams {
    SyntheticTaskParams {
        id: id.into(),
        objective: Objective::Binary,
        samples,
        label_seed,
        structure_seed: 7,
        modalities,
    }
}

/// Train and held-out splits drawn from the same generator (shared
/// structure and label rule, independent samples).
pub fn task_data(params: &SyntheticTaskParams, eval_samples: usize, beta: f64, seed: u64) -> Result<TaskData> {
    let train = make_synthetic_task(params, seed)?.dataset;
    let eval_params = SyntheticTaskParams {
        samples: eval_samples,
        ..params.clone()
    };
    let eval_seed = SeedStream::new(seed).child("eval").seed();
    let eval = make_synthetic_task(&eval_params, eval_seed)?.dataset;
    TaskData::new(train, eval, beta)
}
