//! Whole-stream driver: pretraining, then one continual stage per entry,
//! re-evaluating every task seen so far after each stage.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::flexdata::TaskId;
use crate::model::{Model, ModelConfig};
use crate::report::ReportRow;

use super::{compute_metrics, continual_stage, count_params, predict_all, pretrain_multitask, EwcMemory, Method, StageData, StageLedger, TrainConfig};

/// Evaluation-set prediction vectors recorded after each stage.
pub type PredictionHistory = Vec<(usize, Vec<Vec<f64>>)>;

pub struct StreamRun {
    pub model: Model,
    pub ledgers: Vec<StageLedger>,
    pub rows: Vec<ReportRow>,
    /// Per task, the evaluation-set prediction vectors after each stage.
    pub predictions: BTreeMap<TaskId, PredictionHistory>,
    pub ewc: Option<EwcMemory>,
}

/// Runs `stages[0]` as pretraining and the rest as continual stages. For
/// FLAME every earlier task's predictions must stay bit-identical; a change
/// aborts with an invariant error.
pub fn run_stream(
    stages: &[StageData],
    method: Method,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_stage: impl FnMut(&Model, &StageLedger) -> Result<()>,
) -> Result<StreamRun> {
    let (first, rest) = stages
        .split_first()
        .ok_or_else(|| Error::Precondition("stream has no stages".into()))?;
    let (mut model, ledger) = pretrain_multitask(&first.tasks, first.epochs, model_cfg, cfg, seed)?;
    on_stage(&model, &ledger)?;
    let mut ledgers = vec![ledger];
    let mut ewc = matches!(method, Method::Ewc { .. }).then(EwcMemory::default);
    let mut log = Log::default();
    log.record(&model, 0, method, stages, ewc.as_ref())?;
    for (i, stage) in rest.iter().enumerate() {
        if let Some(mem) = ewc.as_mut() {
            mem.accumulate(&model, &stages[i].tasks)?;
        }
        let ledger = continual_stage(&mut model, stage, method, cfg, seed, ewc.as_ref())?;
        on_stage(&model, &ledger)?;
        ledgers.push(ledger);
        log.record(&model, i + 1, method, stages, ewc.as_ref())?;
    }
    Ok(StreamRun {
        model,
        ledgers,
        rows: log.rows,
        predictions: log.predictions,
        ewc,
    })
}

#[derive(Default)]
struct Log {
    rows: Vec<ReportRow>,
    predictions: BTreeMap<TaskId, PredictionHistory>,
}

impl Log {
    fn record(&mut self, model: &Model, stage: usize, method: Method, stages: &[StageData], ewc: Option<&EwcMemory>) -> Result<()> {
        let counts = count_params(model, ewc);
        for st in &stages[..=stage] {
            for td in &st.tasks {
                let preds = predict_all(model, td.id(), &td.eval)?;
                let history = self.predictions.entry(td.id().clone()).or_default();
                if method == Method::Flame {
                    if let Some((s, prev)) = history.last() {
                        if *prev != preds {
                            return Err(Error::Invariant(format!(
                                "predictions of task {} changed between stage {s} and stage {stage}",
                                td.id()
                            )));
                        }
                    }
                }
                let labels: Vec<_> = td.eval.samples.iter().map(|s| s.label.clone()).collect();
                let metrics = compute_metrics(&td.eval.task.objective, &preds, &labels)?;
                history.push((stage, preds));
                self.rows.push(ReportRow {
                    stage,
                    method: method.name().into(),
                    task: td.id().to_string(),
                    metrics,
                    counts,
                });
            }
        }
        Ok(())
    }
}
