//! Synthetic flexi-modal tasks with a known intrinsic rank.
//!
//! Each modality draws tokens `x_t = A_m u_t + σ ε_t`, where the loading
//! `A_m` (d_m × r*_m) and per-factor phases are fixed by the structure seed
//! and the modality id, so tasks sharing a modality share its latent
//! geometry. The latent trajectory `u_t = s ⊙ (1 + 0.3 sin(2πτ_t + φ))`
//! modulates a per-sample latent `s ~ N(0, I)` over irregular timestamps
//! `τ_t`. Labels are a random linear-threshold rule on the concatenated
//! per-sample latents.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, ModalityId, ModalitySequence, Objective, Sample, TaskId, TaskSpec};
use crate::error::{Error, Result};
use crate::numerics::rng::{gaussian_matrix, normal};
use crate::numerics::{Matrix, SeedStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModality {
    pub id: String,
    pub dim: usize,
    pub rank: usize,
    pub min_length: usize,
    pub max_length: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub missing_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskParams {
    pub id: String,
    pub objective: Objective,
    pub samples: usize,
    pub label_seed: u64,
    #[serde(default)]
    pub structure_seed: u64,
    pub modalities: Vec<SyntheticModality>,
}

/// A generated task together with its ground-truth sample latents.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub dataset: Dataset,
    pub latents: Vec<Vec<f64>>,
}

struct ModalityStructure {
    loading: Matrix,
    phases: Vec<f64>,
}

fn structure(structure_seed: u64, m: &SyntheticModality) -> ModalityStructure {
    let mut rng = SeedStream::new(structure_seed).rng(&format!("loading/{}", m.id));
    let loading = gaussian_matrix(&mut rng, m.dim, m.rank, 1.0 / (m.rank as f64).sqrt());
    let phases = (0..m.rank)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    ModalityStructure { loading, phases }
}

fn validate(p: &SyntheticTaskParams) -> Result<()> {
    if p.modalities.is_empty() {
        return Err(Error::Precondition(format!("task {} has no modalities", p.id)));
    }
    for m in &p.modalities {
        if m.rank < 1 || m.rank > m.dim {
            return Err(Error::Precondition(format!(
                "modality {}: intrinsic rank {} must lie in 1..={}",
                m.id, m.rank, m.dim
            )));
        }
        if m.min_length < 1 || m.min_length > m.max_length {
            return Err(Error::Precondition(format!(
                "modality {}: need 1 <= min_length <= max_length",
                m.id
            )));
        }
        if !(0.0..1.0).contains(&m.missing_rate) || m.noise < 0.0 {
            return Err(Error::Precondition(format!(
                "modality {}: missing_rate in [0,1) and noise >= 0 required",
                m.id
            )));
        }
    }
    match p.objective {
        Objective::Multiclass(n) | Objective::Multilabel(n) if n < 2 => Err(Error::Precondition(
            format!("task {} needs at least 2 classes", p.id),
        )),
        _ => Ok(()),
    }
}

enum LabelRule {
    Threshold(Vec<f64>),
    Argmax(Matrix),
    Thresholds(Matrix),
}

impl LabelRule {
    fn draw(objective: Objective, width: usize, seed: u64) -> Self {
        let mut rng = SeedStream::new(seed).rng("label-rule");
        match objective {
            Objective::Binary => LabelRule::Threshold((0..width).map(|_| normal(&mut rng)).collect()),
            Objective::Multiclass(n) => LabelRule::Argmax(gaussian_matrix(&mut rng, n, width, 1.0)),
            Objective::Multilabel(n) => LabelRule::Thresholds(gaussian_matrix(&mut rng, n, width, 1.0)),
        }
    }

    fn apply(&self, s: &[f64]) -> Label {
        let dot = |w: &[f64]| w.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
        match self {
            LabelRule::Threshold(w) => Label::Binary(dot(w) > 0.0),
            LabelRule::Argmax(w) => {
                let scores: Vec<f64> = (0..w.rows()).map(|r| dot(w.row(r))).collect();
                let best = (0..scores.len())
                    .fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
                Label::Class(best)
            }
            LabelRule::Thresholds(w) => Label::Multi((0..w.rows()).map(|r| dot(w.row(r)) > 0.0).collect()),
        }
    }
}

/// Generates a task; `(params, seed)` fixes every value bit-exactly.
pub fn make_synthetic_task(params: &SyntheticTaskParams, seed: u64) -> Result<SyntheticTask> {
    validate(params)?;
    let structures: Vec<ModalityStructure> = params
        .modalities
        .iter()
        .map(|m| structure(params.structure_seed, m))
        .collect();
    let latent_width: usize = params.modalities.iter().map(|m| m.rank).sum();
    let rule = LabelRule::draw(params.objective, latent_width, params.label_seed);
    let task = TaskSpec::new(
        TaskId(params.id.clone()),
        params.modalities.iter().map(|m| ModalityId(m.id.clone())).collect::<BTreeSet<_>>(),
        params.objective,
    )?;

    let mut rng = SeedStream::new(seed).child(&params.id).rng("samples");
    let mut samples = Vec::with_capacity(params.samples);
    let mut latents = Vec::with_capacity(params.samples);
    for _ in 0..params.samples {
        let mut latent = Vec::with_capacity(latent_width);
        let mut seqs = BTreeMap::new();
        for (m, st) in params.modalities.iter().zip(&structures) {
            let s: Vec<f64> = (0..m.rank).map(|_| normal(&mut rng)).collect();
            let len = rng.random_range(m.min_length..=m.max_length);
            let mut stamps: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
            stamps.sort_by(f64::total_cmp);
            let missing = rng.random_range(0.0..1.0) < m.missing_rate;
            let mut values = Matrix::zeros(len, m.dim);
            for (t, &tau) in stamps.iter().enumerate() {
                let u: Vec<f64> = s
                    .iter()
                    .zip(&st.phases)
                    .map(|(sj, ph)| sj * (1.0 + 0.3 * (std::f64::consts::TAU * tau + ph).sin()))
                    .collect();
                for r in 0..m.dim {
                    let mut v: f64 = st.loading.row(r).iter().zip(&u).map(|(a, b)| a * b).sum();
                    if m.noise > 0.0 {
                        v += m.noise * normal(&mut rng);
                    }
                    values[(t, r)] = v;
                }
            }
            let id = ModalityId(m.id.clone());
            let seq = if missing {
                ModalitySequence::absent(id.clone(), m.dim)
            } else {
                ModalitySequence::new(id.clone(), values, stamps)?
            };
            seqs.insert(id, seq);
            latent.extend(s);
        }
        // every sample keeps at least one observed modality
        if seqs.values().all(|s| !s.present) {
            let first = ModalityId(params.modalities[0].id.clone());
            let m = &params.modalities[0];
            let st = &structures[0];
            let len = m.min_length;
            let stamps: Vec<f64> = (0..len).map(|t| t as f64 / len as f64).collect();
            let s = &latent[..m.rank];
            let mut values = Matrix::zeros(len, m.dim);
            for (t, &tau) in stamps.iter().enumerate() {
                for r in 0..m.dim {
                    values[(t, r)] = st
                        .loading
                        .row(r)
                        .iter()
                        .zip(s.iter().zip(&st.phases))
                        .map(|(a, (sj, ph))| a * sj * (1.0 + 0.3 * (std::f64::consts::TAU * tau + ph).sin()))
                        .sum();
                }
            }
            seqs.insert(first.clone(), ModalitySequence::new(first, values, stamps)?);
        }
        samples.push(Sample {
            modalities: seqs,
            label: rule.apply(&latent),
        });
        latents.push(latent);
    }
    Ok(SyntheticTask {
        dataset: Dataset::new(task, samples)?,
        latents,
    })
}
