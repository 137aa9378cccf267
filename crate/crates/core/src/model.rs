//! The full model: encoders, shared expert pool, stage-indexed router
//! heads, task heads and per-task cursors.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::experts::{moe_forward, Expert, MoeOutput, StackableBias, StackableWeight};
use crate::flexdata::{Label, ModalityId, Objective, Sample, TaskId, TaskSpec};
use crate::numerics::rng::gaussian_matrix;
use crate::numerics::{Matrix, ParamId, Var};
use crate::params::{Checksums, Ctx, ParamStore};
use crate::routing::RouterHead;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    /// Expert hidden width; defaults to `2d`.
    #[serde(default, rename = "d_h")]
    pub d_hidden: Option<usize>,
    pub n_experts: usize,
    pub top_k: usize,
    #[serde(default = "default_kernel", rename = "kappa_conv")]
    pub kernel: usize,
    /// Stage-0 truncation rank; `None` keeps the pretrained weights dense.
    #[serde(default)]
    pub r0: Option<usize>,
    /// Multiplier on the `1/√fan_in` init scale of expert weights.
    #[serde(default = "default_gain")]
    pub init_gain: f64,
}

fn default_kernel() -> usize {
    3
}

fn default_gain() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn new(d: usize, n_experts: usize, top_k: usize) -> Self {
        ModelConfig {
            d,
            d_hidden: None,
            n_experts,
            top_k,
            kernel: default_kernel(),
            r0: None,
            init_gain: default_gain(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.d_hidden.unwrap_or(2 * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if self.d == 0 || self.n_experts == 0 || self.hidden() == 0 {
            return bad("d, d_h and n_experts must be positive".into());
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!(
                "top_k={} must satisfy 1 <= K <= N with n_experts={}",
                self.top_k, self.n_experts
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kappa_conv must be odd, got {}", self.kernel));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return bad("init_gain must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub task: TaskId,
    /// `classes × d`
    pub weight: ParamId,
    /// `1 × classes`
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub spec: TaskSpec,
    pub cursor: usize,
    pub beta: f64,
}

/// How live components are folded back at the end of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consolidation {
    /// Truncate to the given rank and append as a slice.
    Stack(usize),
    /// Add into the base in place.
    Merge,
}

/// Exact stored-scalar counts per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub moe: usize,
    pub router: usize,
    pub head: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.encoder + self.moe + self.router + self.head
    }

    pub fn minus(&self, o: &ParamCounts) -> ParamCounts {
        ParamCounts {
            encoder: self.encoder - o.encoder,
            moe: self.moe - o.moe,
            router: self.router - o.router,
            head: self.head - o.head,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: BTreeMap<ModalityId, Encoder>,
    pub experts: Vec<Expert>,
    pub routers: Vec<RouterHead>,
    pub heads: BTreeMap<TaskId, TaskHead>,
    pub tasks: BTreeMap<TaskId, TaskRecord>,
    /// Number of stages fully completed (0 before pretraining finishes).
    pub completed_stages: usize,
    next_uid: usize,
}

const CHECKPOINT_FORMAT: &str = "flame-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Model,
}

fn std_for(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

impl Model {
    /// Empty expert pool with no stages trained.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Model {
            store: ParamStore::default(),
            encoders: BTreeMap::new(),
            experts: Vec::new(),
            routers: Vec::new(),
            heads: BTreeMap::new(),
            tasks: BTreeMap::new(),
            completed_stages: 0,
            next_uid: 0,
            config,
        };
        for i in 0..model.config.n_experts {
            let (d, dh, k) = (model.config.d, model.config.hidden(), model.config.kernel);
            let mut next = model.next_uid;
            let e = Expert::new(i, d, dh, k, &mut || {
                next += 1;
                next - 1
            })?;
            model.next_uid = next;
            model.experts.push(e);
        }
        Ok(model)
    }

    fn uid_source(&mut self) -> impl FnMut() -> usize + '_ {
        move || {
            self.next_uid += 1;
            self.next_uid - 1
        }
    }

    /// Random live components for every expert weight (the stage-0 start).
    pub fn init_experts(&mut self, stage: usize, rng: &mut impl Rng) -> Result<()> {
        let gain = self.config.init_gain;
        for e in &mut self.experts {
            for w in e.weights_mut() {
                let (r, c) = w.shape();
                w.attach_live(&mut self.store, stage, gaussian_matrix(rng, r, c, gain * std_for(c)))?;
            }
            for b in e.biases_mut() {
                b.attach_live(&mut self.store, stage, vec![0.0; b.len])?;
            }
        }
        Ok(())
    }

    /// Creates the encoder for a new modality with randomly initialized
    /// live components whose stage is the encoder's origin.
    pub fn add_encoder(&mut self, m: &ModalityId, input_dim: usize, stage: usize, rng: &mut impl Rng) -> Result<()> {
        if self.encoders.contains_key(m) {
            return Err(Error::Contract(format!("encoder for {m} already exists")));
        }
        let d = self.config.d;
        let mut enc = {
            let mut uid = self.uid_source();
            Encoder::new(m.clone(), input_dim, d, stage, &mut uid)
        };
        for w in enc.weights_mut() {
            let (r, c) = w.shape();
            w.attach_live(&mut self.store, stage, gaussian_matrix(rng, r, c, std_for(c)))?;
        }
        for b in enc.biases_mut() {
            b.attach_live(&mut self.store, stage, vec![0.0; b.len])?;
        }
        self.encoders.insert(m.clone(), enc);
        Ok(())
    }

    /// Zero-initialized live components on every expert and on the
    /// encoders of `modalities` that predate `stage`.
    pub fn attach_zero_live(&mut self, stage: usize, modalities: &BTreeSet<ModalityId>) -> Result<()> {
        for e in &mut self.experts {
            for w in e.weights_mut() {
                let (r, c) = w.shape();
                w.attach_live(&mut self.store, stage, Matrix::zeros(r, c))?;
            }
            for b in e.biases_mut() {
                b.attach_live(&mut self.store, stage, vec![0.0; b.len])?;
            }
        }
        for (m, enc) in &mut self.encoders {
            if !modalities.contains(m) || enc.proj.origin >= stage {
                continue;
            }
            for w in enc.weights_mut() {
                let (r, c) = w.shape();
                w.attach_live(&mut self.store, stage, Matrix::zeros(r, c))?;
            }
            for b in enc.biases_mut() {
                b.attach_live(&mut self.store, stage, vec![0.0; b.len])?;
            }
        }
        Ok(())
    }

    /// Low-rank adapters on the same matrix set [`Model::attach_zero_live`] covers.
    pub fn attach_adapters(&mut self, stage: usize, rank: usize, modalities: &BTreeSet<ModalityId>, rng: &mut impl Rng) -> Result<()> {
        // biases are not adapted: they resolve to their frozen value at `stage`
        let mut targets: Vec<&mut StackableWeight> = Vec::new();
        for e in &mut self.experts {
            e.biases_mut().into_iter().for_each(|b| b.close_stage(stage));
            targets.extend(e.weights_mut());
        }
        for (m, enc) in &mut self.encoders {
            if modalities.contains(m) && enc.proj.origin < stage {
                enc.biases_mut().into_iter().for_each(|b| b.close_stage(stage));
                targets.extend(enc.weights_mut());
            }
        }
        for w in targets {
            let r = rank.min(w.rows.min(w.cols));
            let a = gaussian_matrix(rng, w.rows, r, std_for(r));
            w.add_adapter(&mut self.store, stage, a, r)?;
        }
        Ok(())
    }

    pub fn add_router(&mut self, m: &ModalityId, stage: usize, rng: &mut impl Rng) -> Result<()> {
        if self.routers.iter().any(|h| &h.modality == m && h.stage == stage) {
            return Err(Error::Contract(format!("router head ({m}, {stage}) already exists")));
        }
        let (d, n) = (self.config.d, self.config.n_experts);
        let name = |s: &str| format!("router.{m}@{stage}.{s}");
        let head = RouterHead {
            modality: m.clone(),
            stage,
            w_gate: self.store.add(name("w_gate"), gaussian_matrix(rng, d, n, std_for(d))),
            w_noise: self.store.add(name("w_noise"), Matrix::zeros(d, n)),
            query: self.store.add(name("query"), Matrix::zeros(1, d)),
        };
        self.routers.push(head);
        Ok(())
    }

    pub fn add_task(&mut self, spec: &TaskSpec, stage: usize, beta: f64, rng: &mut impl Rng) -> Result<()> {
        if self.tasks.contains_key(&spec.id) {
            return Err(Error::Contract(format!("task {} was already trained", spec.id)));
        }
        let (d, c) = (self.config.d, spec.objective.outputs());
        let head = TaskHead {
            task: spec.id.clone(),
            weight: self.store.add(format!("head.{}.weight", spec.id), gaussian_matrix(rng, c, d, std_for(d))),
            bias: self.store.add(format!("head.{}.bias", spec.id), Matrix::zeros(1, c)),
        };
        self.heads.insert(spec.id.clone(), head);
        self.tasks.insert(
            spec.id.clone(),
            TaskRecord {
                spec: spec.clone(),
                cursor: stage,
                beta,
            },
        );
        Ok(())
    }

    /// Latest router head for `m` created at or before `tau`.
    pub fn router_for(&self, m: &ModalityId, tau: usize) -> Result<&RouterHead> {
        self.routers
            .iter()
            .filter(|h| &h.modality == m && h.stage <= tau)
            .max_by_key(|h| h.stage)
            .ok_or_else(|| Error::Precondition(format!("no router head for {m} at cursor {tau}")))
    }

    pub fn stackable_weights(&self) -> impl Iterator<Item = &StackableWeight> {
        self.experts
            .iter()
            .flat_map(|e| e.weights())
            .chain(self.encoders.values().flat_map(|e| e.weights()))
    }

    fn ledgers_mut(&mut self) -> (Vec<&mut StackableWeight>, Vec<&mut StackableBias>, &mut ParamStore) {
        let mut ws = Vec::new();
        let mut bs = Vec::new();
        for e in &mut self.experts {
            let Expert {
                conv,
                conv_bias,
                fc1,
                fc1_bias,
                fc2,
                fc2_bias,
                ..
            } = e;
            ws.extend([conv, fc1, fc2]);
            bs.extend([conv_bias, fc1_bias, fc2_bias]);
        }
        for enc in self.encoders.values_mut() {
            let Encoder {
                proj,
                proj_bias,
                wq,
                wk,
                wv,
                bq,
                bk,
                bv,
                pos,
                ..
            } = enc;
            ws.extend([proj, wq, wk, wv]);
            bs.extend([proj_bias, bq, bk, bv, pos]);
        }
        (ws, bs, &mut self.store)
    }

    /// Folds every live component back into its ledger, closes the stage on
    /// all ledgers and freezes every arena tensor. Returns the stored
    /// scalars added to slices and bias deltas.
    pub fn finish_stage(&mut self, stage: usize, how: Consolidation) -> Result<(usize, usize)> {
        let r0 = self.config.r0;
        let (ws, bs, store) = self.ledgers_mut();
        let (mut slice_scalars, mut delta_scalars) = (0, 0);
        for w in ws {
            if let Some(live) = w.live {
                let is_base = w.base.is_none() && live.stage == w.origin;
                match how {
                    Consolidation::Stack(r) => {
                        let rank = if is_base { r0.unwrap_or(usize::MAX) } else { r };
                        let n = w.compress_and_stack(store, rank)?;
                        if !is_base {
                            slice_scalars += n;
                        }
                    }
                    Consolidation::Merge => w.merge_live(store)?,
                }
            }
            w.close_stage(stage);
        }
        for b in bs {
            if let Some(live) = b.live {
                let is_base = b.base.is_none() && live.stage == b.origin;
                match how {
                    Consolidation::Stack(_) => {
                        let n = b.stack(store)?;
                        if !is_base {
                            delta_scalars += n;
                        }
                    }
                    Consolidation::Merge => b.merge_live(store)?,
                }
            }
            b.close_stage(stage);
        }
        self.store.freeze_all();
        self.completed_stages = self.completed_stages.max(stage + 1);
        Ok((slice_scalars, delta_scalars))
    }

    pub fn rebuild_caches(&mut self) {
        let (ws, bs, _) = self.ledgers_mut();
        ws.into_iter().for_each(StackableWeight::rebuild_prefix);
        bs.into_iter().for_each(StackableBias::rebuild_prefix);
    }

    /// Bit fingerprints of every stored tensor (arena and ledgers).
    pub fn checksums(&self) -> Checksums {
        let mut out = Checksums::new();
        for (_, t) in self.store.iter() {
            out.insert(t.name.clone(), t.value.checksum());
        }
        for e in &self.experts {
            e.weights().iter().for_each(|w| w.checksums(&mut out));
            e.biases().iter().for_each(|b| b.checksums(&mut out));
        }
        for enc in self.encoders.values() {
            enc.weights().iter().for_each(|w| w.checksums(&mut out));
            enc.biases().iter().for_each(|b| b.checksums(&mut out));
        }
        out
    }

    pub fn param_counts(&self) -> ParamCounts {
        let arena = |ids: &[ParamId]| ids.iter().map(|&i| self.store.value(i).len()).sum::<usize>();
        ParamCounts {
            encoder: self.encoders.values().map(Encoder::stored_scalars).sum(),
            moe: self.experts.iter().map(Expert::stored_scalars).sum(),
            router: self.routers.iter().map(|h| arena(&h.params())).sum(),
            head: self.heads.values().map(|h| arena(&[h.weight, h.bias])).sum(),
        }
    }

    pub fn task(&self, id: &TaskId) -> Result<&TaskRecord> {
        self.tasks
            .get(id)
            .ok_or_else(|| Error::Precondition(format!("unknown task {id}")))
    }

    /// Task logits (`1 × outputs`) at the task's cursor.
    pub fn forward<R: Rng>(&self, ctx: &mut Ctx<'_>, sample: &Sample, task: &TaskId, rng: Option<&mut R>) -> Result<(Var, MoeOutput)> {
        let rec = self.task(task)?;
        let moe = moe_forward(ctx, self, sample, &rec.spec, rec.cursor, rng)?;
        let head = &self.heads[task];
        let w = ctx.param(head.weight);
        let b = ctx.param(head.bias);
        let logits = ctx.tape.matmul_t(moe.fused, w);
        let logits = ctx.tape.add_row(logits, b);
        Ok((logits, moe))
    }

    /// Noise-free prediction scores: probabilities per output.
    pub fn predict(&self, sample: &Sample, task: &TaskId) -> Result<Vec<f64>> {
        let mut ctx = Ctx::new(&self.store);
        let (logits, _) = self.forward::<rand_chacha::ChaCha8Rng>(&mut ctx, sample, task, None)?;
        let l = ctx.value(logits).clone();
        Ok(scores(&self.task(task)?.spec.objective, &l))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let text = serde_json::to_string(&ck).map_err(|e| Error::Format(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut model = ck.model;
        model.config.validate()?;
        model.rebuild_caches();
        Ok(model)
    }
}

/// Probabilities from raw logits: sigmoid per output for binary and
/// multilabel, softmax for multiclass.
pub fn scores(objective: &Objective, logits: &Matrix) -> Vec<f64> {
    match objective {
        Objective::Multiclass(_) => crate::numerics::tape::softmax_rows(logits).as_slice().to_vec(),
        _ => logits.as_slice().iter().map(|&x| crate::numerics::tape::sigmoid(x)).collect(),
    }
}

/// Per-sample task loss: BCE with logits for binary / multilabel (mean over
/// labels), cross-entropy for multiclass.
pub fn task_loss(ctx: &mut Ctx<'_>, logits: Var, label: &Label, objective: &Objective) -> Result<Var> {
    if !label.conforms(objective) {
        return Err(Error::Precondition(format!("label {label:?} does not fit {objective:?}")));
    }
    let t = &mut ctx.tape;
    let bce = |t: &mut crate::numerics::Tape, targets: Vec<f64>| {
        let n = targets.len();
        let sp = t.softplus(logits);
        let y = t.constant(Matrix::row_vector(&targets));
        let yx = t.hadamard(y, logits);
        let l = t.sub(sp, yx);
        let s = t.sum(l);
        t.scale(s, 1.0 / n as f64)
    };
    Ok(match label {
        Label::Binary(b) => bce(t, vec![f64::from(u8::from(*b))]),
        Label::Multi(bits) => bce(t, bits.iter().map(|&b| f64::from(u8::from(b))).collect()),
        Label::Class(c) => {
            let ls = t.log_softmax_rows(logits);
            let p = t.pick(ls, 0, *c);
            t.scale(p, -1.0)
        }
    })
}
