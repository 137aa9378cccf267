//! Multitask pretraining, continual stages and the in-place / adapter
//! baselines, with an exact ledger of what each stage trained and stored.

pub mod ewc;
pub mod metrics;
pub mod stream;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flexdata::batch_iter;
use crate::flexdata::{Dataset, ModalityId, TaskId};
use crate::model::{task_loss, Consolidation, Model, ModelConfig, ParamCounts};
use crate::numerics::{Matrix, ParamId, SeedStream, Var};
use crate::params::Ctx;
use crate::routing::{balance_loss, divergence_loss};
pub use ewc::{ewc_penalty, EwcMemory};
pub use metrics::{auprc, auroc, compute_metrics, Metrics};
pub use stream::{run_stream, PredictionHistory, StreamRun};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Decoupled decay: each updated tensor shrinks by `lr·weight_decay`.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub cosine: bool,
    pub w_bal: f64,
    pub w_div: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 16,
            cosine: true,
            w_bal: 0.01,
            w_div: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size == 0 {
            return Err(Error::Precondition(
                "optimizer needs lr > 0, momentum in [0, 1) and a positive batch size".into(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.lr * self.weight_decay < 1.0) {
            return Err(Error::Precondition("weight_decay must be nonnegative with lr·weight_decay < 1".into()));
        }
        if self.w_bal < 0.0 || self.w_div < 0.0 {
            return Err(Error::Precondition("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One task's training and evaluation data plus its divergence sign.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub dataset: Dataset,
    pub eval: Dataset,
    pub beta: f64,
}

impl TaskData {
    pub fn new(dataset: Dataset, eval: Dataset, beta: f64) -> Result<Self> {
        if beta != 1.0 && beta != -1.0 {
            return Err(Error::Precondition(format!("beta must be +1 or -1, got {beta}")));
        }
        if dataset.is_empty() || eval.is_empty() {
            return Err(Error::Precondition(format!("task {} has no samples", dataset.task.id)));
        }
        Ok(TaskData { dataset, eval, beta })
    }

    pub fn id(&self) -> &TaskId {
        &self.dataset.task.id
    }
}

#[derive(Clone, Debug)]
pub struct StageData {
    pub tasks: Vec<TaskData>,
    pub rank: usize,
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Method {
    Flame,
    SimpleFt,
    Ewc { lambda: f64 },
    Lora,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Flame => "flame",
            Method::SimpleFt => "simple_ft",
            Method::Ewc { .. } => "ewc",
            Method::Lora => "lora",
        }
    }
}

/// What one stage trained, froze and stored.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageLedger {
    pub stage: usize,
    pub method: String,
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
    /// Tensors whose bits changed during training.
    pub changed: BTreeSet<String>,
    pub new_router_gate: usize,
    pub new_router: usize,
    pub new_head: usize,
    pub new_slice: usize,
    pub new_bias_delta: usize,
    pub new_adapter: usize,
    pub new_encoder: usize,
    pub before: ParamCounts,
    pub after: ParamCounts,
    pub epoch_losses: Vec<f64>,
}

impl StageLedger {
    pub fn growth(&self) -> ParamCounts {
        self.after.minus(&self.before)
    }
}

/// Stored-scalar counts, including an EWC memory when one is kept.
pub fn count_params(model: &Model, ewc: Option<&EwcMemory>) -> ParamCounts {
    let mut c = model.param_counts();
    if let Some(mem) = ewc {
        let s = mem.stored_scalars();
        c.encoder += s.get("encoder").copied().unwrap_or(0);
        c.moe += s.get("moe").copied().unwrap_or(0);
        c.router += s.get("router").copied().unwrap_or(0);
    }
    c
}

/// Quadratic pull of live components and router tensors toward their anchors.
struct Penalty {
    lambda: f64,
    /// `(param, fisher, anchor)`; `None` anchor means zero.
    terms: Vec<(ParamId, Matrix, Option<Matrix>)>,
}

impl Penalty {
    fn from_memory(model: &Model, mem: &EwcMemory, lambda: f64) -> Self {
        let mut terms = Vec::new();
        let mut live = |name: &str, id: Option<ParamId>| {
            if let (Some(id), Some(e)) = (id, mem.entries.get(name)) {
                terms.push((id, e.fisher.clone(), None));
            }
        };
        for e in &model.experts {
            e.weights().iter().for_each(|w| live(&w.name, w.live.map(|l| l.param)));
            e.biases().iter().for_each(|b| live(&b.name, b.live.map(|l| l.param)));
        }
        for enc in model.encoders.values() {
            enc.weights().iter().for_each(|w| live(&w.name, w.live.map(|l| l.param)));
            enc.biases().iter().for_each(|b| live(&b.name, b.live.map(|l| l.param)));
        }
        for h in &model.routers {
            for id in h.params() {
                let t = model.store.tensor(id);
                if let (false, Some(e)) = (t.frozen, mem.entries.get(&t.name)) {
                    terms.push((id, e.fisher.clone(), Some(e.anchor.clone())));
                }
            }
        }
        Penalty { lambda, terms }
    }

    fn build(&self, ctx: &mut Ctx<'_>) -> Option<Var> {
        let mut acc: Option<Var> = None;
        for (id, f, anchor) in &self.terms {
            let p = ctx.param(*id);
            let diff = match anchor {
                Some(a) => {
                    let a = ctx.constant(a.clone());
                    ctx.tape.sub(p, a)
                }
                None => p,
            };
            let f = ctx.constant(f.clone());
            let t = &mut ctx.tape;
            let sq = t.hadamard(diff, diff);
            let w = t.hadamard(f, sq);
            let s = t.sum(w);
            acc = Some(match acc {
                Some(x) => t.add(x, s),
                None => s,
            });
        }
        acc.map(|a| ctx.tape.scale(a, 0.5 * self.lambda))
    }
}

fn batch_objective(
    ctx: &mut Ctx<'_>,
    model: &Model,
    td: &TaskData,
    batch: &[usize],
    cfg: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Var> {
    let task = &td.dataset.task;
    let mut total: Option<Var> = None;
    let mut gates: BTreeMap<ModalityId, Vec<Var>> = BTreeMap::new();
    for &i in batch {
        let sample = &td.dataset.samples[i];
        let (logits, moe) = model.forward(ctx, sample, &task.id, Some(&mut *rng))?;
        let l = task_loss(ctx, logits, &sample.label, &task.objective)?;
        total = Some(match total {
            Some(t) => ctx.tape.add(t, l),
            None => l,
        });
        for (m, tr) in moe.modalities {
            gates.entry(m).or_default().push(tr.gate.dense);
        }
    }
    let total = total.ok_or_else(|| Error::Precondition("empty batch".into()))?;
    let mut objective = ctx.tape.scale(total, 1.0 / batch.len() as f64);
    if cfg.w_bal > 0.0 {
        for g in gates.values() {
            let b = balance_loss(ctx, g)?;
            let b = ctx.tape.scale(b, cfg.w_bal);
            objective = ctx.tape.add(objective, b);
        }
    }
    if cfg.w_div > 0.0 && gates.len() >= 2 {
        let means: Vec<Var> = gates
            .values()
            .map(|g| {
                let mut s = g[0];
                for &x in &g[1..] {
                    s = ctx.tape.add(s, x);
                }
                ctx.tape.scale(s, 1.0 / g.len() as f64)
            })
            .collect();
        let d = divergence_loss(ctx, &means, td.beta);
        let d = ctx.tape.scale(d, cfg.w_div);
        objective = ctx.tape.add(objective, d);
    }
    Ok(objective)
}

/// Round-robin SGD over per-task batches on the store's trainable tensors.
/// Returns the mean objective of each epoch.
fn train_tasks(
    model: &mut Model,
    tasks: &[TaskData],
    epochs: usize,
    cfg: &TrainConfig,
    seed: u64,
    stage: usize,
    penalty: Option<&Penalty>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let ss = SeedStream::new(seed).child(&format!("train/stage{stage}"));
    let trainable = model.store.trainable();
    let mut velocity: BTreeMap<ParamId, Matrix> = BTreeMap::new();
    let schedule = |epoch: usize| -> Result<Vec<(usize, Vec<usize>)>> {
        let per_task: Vec<Vec<Vec<usize>>> = tasks
            .iter()
            .map(|td| {
                let s = ss.child(&format!("batches/{}", td.id())).seed();
                batch_iter(td.dataset.len(), cfg.batch_size, s, epoch as u64)
            })
            .collect::<Result<_>>()?;
        let rounds = per_task.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = Vec::new();
        for r in 0..rounds {
            for (k, b) in per_task.iter().enumerate() {
                if let Some(batch) = b.get(r) {
                    out.push((k, batch.clone()));
                }
            }
        }
        Ok(out)
    };
    let steps_per_epoch: usize = tasks.iter().map(|t| t.dataset.len().div_ceil(cfg.batch_size)).sum();
    let total_steps = (epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut acc = 0.0;
        let plan = schedule(epoch)?;
        for (k, batch) in &plan {
            let mut rng = ss.rng_at("noise", step as u64);
            let (value, grads) = {
                let mut ctx = Ctx::new(&model.store);
                let mut obj = batch_objective(&mut ctx, model, &tasks[*k], batch, cfg, &mut rng)?;
                if let Some(p) = penalty.filter(|p| p.lambda != 0.0) {
                    if let Some(pv) = p.build(&mut ctx) {
                        obj = ctx.tape.add(obj, pv);
                    }
                }
                (ctx.tape.scalar(obj), ctx.tape.backward(obj)?)
            };
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    seed,
                    message: format!("non-finite objective {value} on task {}", tasks[*k].id()),
                });
            }
            let lr = if cfg.cosine {
                cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
            } else {
                cfg.lr
            };
            for &id in &trainable {
                let Some(g) = grads.param(id) else { continue };
                if !g.is_finite() {
                    return Err(Error::Training {
                        step,
                        seed,
                        message: format!("non-finite gradient for {}", model.store.tensor(id).name),
                    });
                }
                let update = if cfg.momentum > 0.0 {
                    let v = velocity.entry(id).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    *v = v.scale(cfg.momentum).add(&g);
                    v.clone()
                } else {
                    g
                };
                let w = model.store.value_mut(id);
                if cfg.weight_decay > 0.0 {
                    *w = w.scale(1.0 - lr * cfg.weight_decay);
                }
                w.axpy(-lr, &update);
            }
            acc += value;
            step += 1;
        }
        epoch_losses.push(acc / plan.len().max(1) as f64);
    }
    Ok(epoch_losses)
}

struct StageSetup {
    new_routers: Vec<(ModalityId, usize)>,
    new_heads: Vec<TaskId>,
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut Model,
    stage: usize,
    tasks: &[TaskData],
    epochs: usize,
    cfg: &TrainConfig,
    seed: u64,
    how: Consolidation,
    method: Method,
    setup: StageSetup,
    penalty: Option<&Penalty>,
    counts_before: ParamCounts,
    ewc: Option<&EwcMemory>,
) -> Result<StageLedger> {
    let trainable: BTreeSet<String> = model
        .store
        .iter()
        .filter(|(_, t)| !t.frozen)
        .map(|(_, t)| t.name.clone())
        .collect();
    let before = model.checksums();
    let frozen: BTreeSet<String> = before.keys().filter(|k| !trainable.contains(*k)).cloned().collect();
    let epoch_losses = train_tasks(model, tasks, epochs, cfg, seed, stage, penalty)?;
    let after = model.checksums();
    let changed = after
        .iter()
        .filter(|(k, v)| before.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();

    let (new_slice, new_bias_delta) = model.finish_stage(stage, how)?;
    let new_adapter = model
        .stackable_weights()
        .flat_map(|w| w.adapters.iter().filter(|a| a.stage == stage).map(|a| a.rank * (w.rows + w.cols)))
        .sum();
    let (d, n) = (model.config.d, model.config.n_experts);
    let router_size = |m: &ModalityId, s: usize| -> usize {
        let h = model.routers.iter().find(|h| &h.modality == m && h.stage == s).expect("router");
        h.params().iter().map(|&i| model.store.value(i).len()).sum()
    };
    let new_router = setup.new_routers.iter().map(|(m, s)| router_size(m, *s)).sum();
    let new_head = setup
        .new_heads
        .iter()
        .map(|t| {
            let h = &model.heads[t];
            model.store.value(h.weight).len() + model.store.value(h.bias).len()
        })
        .sum();
    let new_encoder = model
        .encoders
        .values()
        .filter(|e| e.proj.origin == stage)
        .map(|e| e.stored_scalars())
        .sum();
    Ok(StageLedger {
        stage,
        method: method.name().into(),
        trainable,
        frozen,
        changed,
        new_router_gate: setup.new_routers.len() * d * n,
        new_router,
        new_head,
        new_slice,
        new_bias_delta,
        new_adapter,
        new_encoder,
        before: counts_before,
        after: count_params(model, ewc),
        epoch_losses,
    })
}

fn modality_dims(tasks: &[TaskData], model: Option<&Model>) -> Result<BTreeMap<ModalityId, usize>> {
    let mut dims: BTreeMap<ModalityId, usize> = BTreeMap::new();
    for td in tasks {
        for m in &td.dataset.task.modalities {
            let found = td.dataset.modality_dims().get(m).copied();
            let known = model.and_then(|mm| mm.encoders.get(m)).map(|e| e.input_dim);
            let dim = found.or(known).ok_or_else(|| {
                Error::Precondition(format!("modality {m} of task {} has no samples", td.id()))
            })?;
            for other in [dims.get(m).copied(), known].into_iter().flatten() {
                if other != dim {
                    return Err(Error::Precondition(format!(
                        "modality {m} has width {dim} but {other} elsewhere"
                    )));
                }
            }
            dims.insert(m.clone(), dim);
        }
    }
    Ok(dims)
}

/// Joint multitask training of a fresh model, then the stage-0
/// compress-and-freeze into the ledger bases.
pub fn pretrain_multitask(
    tasks: &[TaskData],
    epochs: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model, StageLedger)> {
    let mut model = prepare_pretraining(tasks, model_cfg, seed)?;
    let ledger = pretrain_prepared(&mut model, tasks, epochs, cfg, seed)?;
    Ok((model, ledger))
}

/// Fresh model with stage-0 encoders, routers and heads for `tasks`, all
/// randomly initialized and trainable.
pub fn prepare_pretraining(tasks: &[TaskData], model_cfg: &ModelConfig, seed: u64) -> Result<Model> {
    if tasks.is_empty() {
        return Err(Error::Precondition("pretraining needs at least one task".into()));
    }
    let mut model = Model::new(model_cfg.clone())?;
    let ss = SeedStream::new(seed).child("init/stage0");
    model.init_experts(0, &mut ss.rng("experts"))?;
    for (m, dim) in modality_dims(tasks, None)? {
        model.add_encoder(&m, dim, 0, &mut ss.rng(&format!("encoder/{m}")))?;
        model.add_router(&m, 0, &mut ss.rng(&format!("router/{m}")))?;
    }
    for td in tasks {
        model.add_task(&td.dataset.task, 0, td.beta, &mut ss.rng(&format!("head/{}", td.id())))?;
    }
    Ok(model)
}

/// Trains a model from [`prepare_pretraining`] and consolidates stage 0.
pub fn pretrain_prepared(model: &mut Model, tasks: &[TaskData], epochs: usize, cfg: &TrainConfig, seed: u64) -> Result<StageLedger> {
    if model.completed_stages != 0 {
        return Err(Error::Contract("pretraining a model that already completed a stage".into()));
    }
    let setup = StageSetup {
        new_routers: model.routers.iter().map(|h| (h.modality.clone(), 0)).collect(),
        new_heads: tasks.iter().map(|t| t.id().clone()).collect(),
    };
    run_stage(
        model,
        0,
        tasks,
        epochs,
        cfg,
        seed,
        Consolidation::Stack(usize::MAX),
        Method::Flame,
        setup,
        None,
        ParamCounts::default(),
        None,
    )
}

/// One continual stage under `method`. EWC needs a memory already holding
/// the Fisher of the previous stage's data.
pub fn continual_stage(
    model: &mut Model,
    stage: &StageData,
    method: Method,
    cfg: &TrainConfig,
    seed: u64,
    ewc: Option<&EwcMemory>,
) -> Result<StageLedger> {
    let t = model.completed_stages;
    if t == 0 {
        return Err(Error::Precondition("continual stages follow pretraining".into()));
    }
    if stage.tasks.is_empty() || stage.rank == 0 {
        return Err(Error::Precondition(format!("stage {t} needs tasks and a positive rank")));
    }
    for td in &stage.tasks {
        if model.tasks.contains_key(td.id()) {
            return Err(Error::Contract(format!("task {} was already trained", td.id())));
        }
    }
    let memory = match method {
        Method::Ewc { .. } => Some(
            ewc.filter(|m| !m.is_empty())
                .ok_or_else(|| Error::Contract("EWC stage without a prior Fisher estimate".into()))?,
        ),
        _ => None,
    };
    let counts_before = count_params(model, memory);
    let dims = modality_dims(&stage.tasks, Some(model))?;
    let stage_modalities: BTreeSet<ModalityId> = dims.keys().cloned().collect();
    let ss = SeedStream::new(seed).child(&format!("init/stage{t}"));
    let mut new_routers = Vec::new();
    match method {
        Method::Flame => model.attach_zero_live(t, &stage_modalities)?,
        Method::Lora => model.attach_adapters(t, stage.rank, &stage_modalities, &mut ss.rng("adapters"))?,
        Method::SimpleFt | Method::Ewc { .. } => {
            let all: BTreeSet<ModalityId> = model.encoders.keys().cloned().collect();
            model.attach_zero_live(t, &all)?;
            let ids: Vec<ParamId> = model.routers.iter().flat_map(|h| h.params()).collect();
            for id in ids {
                model.store.set_frozen(id, false);
            }
        }
    }
    for (m, &dim) in &dims {
        let fresh = !model.encoders.contains_key(m);
        if fresh {
            model.add_encoder(m, dim, t, &mut ss.rng(&format!("encoder/{m}")))?;
        }
        let per_stage_heads = matches!(method, Method::Flame | Method::Lora);
        if per_stage_heads || fresh {
            model.add_router(m, t, &mut ss.rng(&format!("router/{m}")))?;
            new_routers.push((m.clone(), t));
        }
    }
    for td in &stage.tasks {
        model.add_task(&td.dataset.task, t, td.beta, &mut ss.rng(&format!("head/{}", td.id())))?;
    }
    let penalty = match (method, memory) {
        (Method::Ewc { lambda }, Some(mem)) => Some(Penalty::from_memory(model, mem, lambda)),
        _ => None,
    };
    let how = match method {
        Method::Flame => Consolidation::Stack(stage.rank),
        _ => Consolidation::Merge,
    };
    let setup = StageSetup {
        new_routers,
        new_heads: stage.tasks.iter().map(|t| t.id().clone()).collect(),
    };
    run_stage(
        model,
        t,
        &stage.tasks,
        stage.epochs,
        cfg,
        seed,
        how,
        method,
        setup,
        penalty.as_ref(),
        counts_before,
        memory,
    )
}

/// Noise-free score vectors for every evaluation sample at the task's cursor.
pub fn predict_all(model: &Model, task: &TaskId, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.samples.iter().map(|s| model.predict(s, task)).collect()
}

pub fn evaluate(model: &Model, task: &TaskId, data: &Dataset) -> Result<Metrics> {
    let rec = model.task(task)?;
    let scores = predict_all(model, task, data)?;
    let labels: Vec<_> = data.samples.iter().map(|s| s.label.clone()).collect();
    compute_metrics(&rec.spec.objective, &scores, &labels)
}
