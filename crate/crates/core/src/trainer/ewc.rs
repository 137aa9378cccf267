//! Diagonal-Fisher memory for the EWC baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{task_loss, Model};
use crate::numerics::{Matrix, Var};
use crate::params::Ctx;

use super::TaskData;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Encoder,
    Moe,
    Router,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherEntry {
    pub component: Component,
    pub fisher: Matrix,
    pub anchor: Matrix,
}

/// Fisher diagonals and anchors keyed by tensor or ledger name. Fishers from
/// successive stages are summed; anchors track the latest consolidated value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EwcMemory {
    pub entries: BTreeMap<String, FisherEntry>,
}

/// `λ/2 · Σ F (θ − θ*)²`.
pub fn ewc_penalty(fisher: &[f64], anchor: &[f64], theta: &[f64], lambda: f64) -> f64 {
    let s: f64 = fisher
        .iter()
        .zip(anchor)
        .zip(theta)
        .map(|((f, a), t)| f * (t - a) * (t - a))
        .sum();
    0.5 * lambda * s
}

impl EwcMemory {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds the empirical diagonal Fisher of the backbone, one pass over
    /// `data` (squared per-sample gradients of the label log-likelihood at
    /// each task's cursor), and refreshes the anchors.
    pub fn accumulate(&mut self, model: &Model, data: &[TaskData]) -> Result<()> {
        let mut sums: BTreeMap<String, (Component, Matrix)> = BTreeMap::new();
        let mut count = 0usize;
        for td in data {
            let task = &td.dataset.task;
            for sample in &td.dataset.samples {
                let mut ctx = Ctx::probing(&model.store);
                let (logits, _) = model.forward::<rand_chacha::ChaCha8Rng>(&mut ctx, sample, &task.id, None)?;
                let nll = task_loss(&mut ctx, logits, &sample.label, &task.objective)?;
                let grads = ctx.tape.backward(nll)?;
                let mut add = |name: &str, comp: Component, g: Matrix| {
                    let sq = g.map(|x| x * x);
                    sums.entry(name.to_string())
                        .and_modify(|(_, acc)| acc.add_assign(&sq))
                        .or_insert((comp, sq));
                };
                let probe = |ctx: &Ctx<'_>, uid: usize| -> Option<Var> { ctx.probe_var(uid) };
                for e in &model.experts {
                    for w in e.weights() {
                        if let Some(v) = probe(&ctx, w.uid) {
                            add(&w.name, Component::Moe, grads.var(v, w.shape()));
                        }
                    }
                    for b in e.biases() {
                        if let Some(v) = probe(&ctx, b.uid) {
                            add(&b.name, Component::Moe, grads.var(v, (1, b.len)));
                        }
                    }
                }
                for enc in model.encoders.values() {
                    for w in enc.weights() {
                        if let Some(v) = probe(&ctx, w.uid) {
                            add(&w.name, Component::Encoder, grads.var(v, w.shape()));
                        }
                    }
                    for b in enc.biases() {
                        if let Some(v) = probe(&ctx, b.uid) {
                            add(&b.name, Component::Encoder, grads.var(v, (1, b.len)));
                        }
                    }
                }
                for h in &model.routers {
                    for id in h.params() {
                        if let Some(g) = grads.param(id) {
                            add(&model.store.tensor(id).name, Component::Router, g);
                        }
                    }
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Precondition("Fisher estimate needs at least one sample".into()));
        }
        let anchors = backbone_values(model)?;
        for (name, (comp, anchor)) in anchors {
            let fisher = sums
                .remove(&name)
                .map(|(_, m)| m.scale(1.0 / count as f64))
                .unwrap_or_else(|| Matrix::zeros(anchor.rows(), anchor.cols()));
            self.entries
                .entry(name)
                .and_modify(|e| {
                    e.fisher.add_assign(&fisher);
                    e.anchor = anchor.clone();
                })
                .or_insert(FisherEntry {
                    component: comp,
                    fisher,
                    anchor,
                });
        }
        Ok(())
    }

    /// Stored scalars per component (Fisher plus anchor).
    pub fn stored_scalars(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for e in self.entries.values() {
            let key = match e.component {
                Component::Encoder => "encoder",
                Component::Moe => "moe",
                Component::Router => "router",
            };
            *out.entry(key).or_insert(0) += e.fisher.len() + e.anchor.len();
        }
        out
    }
}

/// Current consolidated value of every backbone tensor. Ledgers must have
/// no slices (in-place methods only), so the base is the value at any cursor.
fn backbone_values(model: &Model) -> Result<BTreeMap<String, (Component, Matrix)>> {
    let mut out = BTreeMap::new();
    let check = |slices: bool, name: &str| {
        if slices {
            Err(Error::Contract(format!("{name}: Fisher anchors need an unstacked ledger")))
        } else {
            Ok(())
        }
    };
    for e in &model.experts {
        for w in e.weights() {
            check(!w.slices.is_empty(), &w.name)?;
            if let Some(b) = &w.base {
                out.insert(w.name.clone(), (Component::Moe, b.clone()));
            }
        }
        for b in e.biases() {
            check(!b.deltas.is_empty(), &b.name)?;
            if let Some(v) = &b.base {
                out.insert(b.name.clone(), (Component::Moe, Matrix::row_vector(v)));
            }
        }
    }
    for enc in model.encoders.values() {
        for w in enc.weights() {
            check(!w.slices.is_empty(), &w.name)?;
            if let Some(b) = &w.base {
                out.insert(w.name.clone(), (Component::Encoder, b.clone()));
            }
        }
        for b in enc.biases() {
            check(!b.deltas.is_empty(), &b.name)?;
            if let Some(v) = &b.base {
                out.insert(b.name.clone(), (Component::Encoder, Matrix::row_vector(v)));
            }
        }
    }
    for h in &model.routers {
        for id in h.params() {
            let t = model.store.tensor(id);
            out.insert(t.name.clone(), (Component::Router, t.value.clone()));
        }
    }
    Ok(out)
}
