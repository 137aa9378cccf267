//! Additive weight ledgers with cursor-based resolution.
//!
//! A [`StackableWeight`] holds a dense base, an ordered list of immutable
//! rank-truncated stage slices, at most one live (trainable) component and,
//! for the LoRA baseline, per-stage low-rank adapters. Resolving at cursor
//! `τ` sums the base and every slice reserved at or before `τ`; the live
//! component and adapters only join when their stage equals `τ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{truncated_svd, Matrix, ParamId, SvdFactors, Var};
use crate::params::{Checksums, Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub stage: usize,
    pub factors: SvdFactors,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Live {
    pub stage: usize,
    pub param: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub stage: usize,
    pub rank: usize,
    /// `rows × rank`
    pub a: ParamId,
    /// `rank × cols`, zero at creation
    pub b: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StackableWeight {
    pub uid: usize,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub origin: usize,
    pub base: Option<Matrix>,
    pub slices: Vec<Slice>,
    pub live: Option<Live>,
    pub adapters: Vec<Adapter>,
    pub frozen_through: Option<usize>,
    /// `prefix[k]` = base + first `k` slices, rebuilt whenever the ledger grows.
    #[serde(skip)]
    prefix: Vec<Matrix>,
}

impl PartialEq for StackableWeight {
    fn eq(&self, o: &Self) -> bool {
        self.uid == o.uid
            && self.name == o.name
            && (self.rows, self.cols, self.origin) == (o.rows, o.cols, o.origin)
            && self.base == o.base
            && self.slices == o.slices
            && self.live == o.live
            && self.adapters == o.adapters
            && self.frozen_through == o.frozen_through
    }
}

impl StackableWeight {
    pub fn new(uid: usize, name: impl Into<String>, rows: usize, cols: usize, origin: usize) -> Self {
        StackableWeight {
            uid,
            name: name.into(),
            rows,
            cols,
            origin,
            base: None,
            slices: Vec::new(),
            live: None,
            adapters: Vec::new(),
            frozen_through: None,
            prefix: Vec::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rebuild_prefix(&mut self) {
        self.prefix.clear();
        let Some(base) = &self.base else { return };
        let mut acc = base.clone();
        self.prefix.push(acc.clone());
        for s in &self.slices {
            acc = acc.add(&s.factors.expand());
            self.prefix.push(acc.clone());
        }
    }

    /// Adds a trainable component for `stage` initialized to `init`.
    pub fn attach_live(&mut self, store: &mut ParamStore, stage: usize, init: Matrix) -> Result<ParamId> {
        if self.live.is_some() {
            return Err(Error::Contract(format!("{} already has a live component", self.name)));
        }
        if init.shape() != self.shape() {
            return Err(Error::Precondition(format!(
                "{}: live init shape {:?} != {:?}",
                self.name,
                init.shape(),
                self.shape()
            )));
        }
        let param = store.add(format!("{}.live@{stage}", self.name), init);
        self.live = Some(Live { stage, param });
        Ok(param)
    }

    fn resolvable(&self, tau: usize) -> Result<()> {
        if tau < self.origin {
            return Err(Error::Precondition(format!(
                "{}: cursor {tau} precedes creation at stage {}",
                self.name, self.origin
            )));
        }
        let active = self.live.is_some_and(|l| l.stage == tau) || self.adapters.iter().any(|a| a.stage == tau);
        if active || self.frozen_through.is_some_and(|f| tau <= f) {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "{}: cursor {tau} beyond the ledger (frozen through {:?})",
                self.name, self.frozen_through
            )))
        }
    }

    /// Frozen part of the effective weight at `tau`, if any.
    pub fn frozen_at(&self, tau: usize) -> Option<&Matrix> {
        self.base.as_ref()?;
        let k = self.slices.iter().take_while(|s| s.stage <= tau).count();
        self.prefix.get(k)
    }

    /// Dense effective weight `W^(0) + Σ_{j ≤ τ} W^(j)` (+ live / adapter
    /// when active at `τ`), evaluated outside any tape.
    pub fn effective(&self, store: &ParamStore, tau: usize) -> Result<Matrix> {
        self.resolvable(tau)?;
        let mut w = self
            .frozen_at(tau)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(self.rows, self.cols));
        if let Some(l) = self.live.filter(|l| l.stage == tau) {
            w = w.add(store.value(l.param));
        }
        if let Some(a) = self.adapters.iter().find(|a| a.stage == tau) {
            w = w.add(&store.value(a.a).matmul(store.value(a.b)));
        }
        Ok(w)
    }

    /// Effective weight as a tape node, memoized per `(weight, τ)`.
    pub fn bind(&self, ctx: &mut Ctx<'_>, tau: usize) -> Result<Var> {
        if let Some(&v) = ctx.resolved.get(&(self.uid, tau)) {
            return Ok(v);
        }
        if ctx.probe {
            let v = ctx.tape.variable(self.effective(ctx.store(), tau)?);
            ctx.probes.insert(self.uid, v);
            ctx.resolved.insert((self.uid, tau), v);
            return Ok(v);
        }
        self.resolvable(tau)?;
        let mut acc: Option<Var> = self.frozen_at(tau).map(|m| ctx.constant(m.clone()));
        let mut join = |ctx: &mut Ctx<'_>, v: Var| {
            acc = Some(match acc {
                Some(a) => ctx.tape.add(a, v),
                None => v,
            });
        };
        if let Some(l) = self.live.filter(|l| l.stage == tau) {
            let v = ctx.param(l.param);
            join(ctx, v);
        }
        if let Some(ad) = self.adapters.iter().find(|a| a.stage == tau) {
            let a = ctx.param(ad.a);
            let b = ctx.param(ad.b);
            let ab = ctx.tape.matmul(a, b);
            join(ctx, ab);
        }
        let v = match acc {
            Some(v) => v,
            None => ctx.constant(Matrix::zeros(self.rows, self.cols)),
        };
        ctx.resolved.insert((self.uid, tau), v);
        Ok(v)
    }

    /// Truncates the live component to rank `r` and appends it as an
    /// immutable slice. At the weight's origin stage the truncation becomes
    /// the dense base instead. Returns the number of stored scalars added.
    pub fn compress_and_stack(&mut self, store: &mut ParamStore, r: usize) -> Result<usize> {
        let live = self
            .live
            .ok_or_else(|| Error::Contract(format!("{}: no live component to compress", self.name)))?;
        let w = store.value(live.param).clone();
        let r = r.min(self.rows.min(self.cols));
        let factors = truncated_svd(&w, r)?;
        let added = if self.base.is_none() && live.stage == self.origin {
            self.base = Some(factors.expand());
            self.rows * self.cols
        } else {
            let n = factors.stored_scalars();
            self.slices.push(Slice {
                stage: live.stage,
                factors,
            });
            n
        };
        store.retire(live.param);
        self.live = None;
        self.rebuild_prefix();
        Ok(added)
    }

    /// Folds the live component into the base in place (no truncation).
    pub fn merge_live(&mut self, store: &mut ParamStore) -> Result<()> {
        let live = self
            .live
            .ok_or_else(|| Error::Contract(format!("{}: no live component to merge", self.name)))?;
        let w = store.value(live.param).clone();
        self.base = Some(match self.base.take() {
            Some(b) => b.add(&w),
            None => w,
        });
        store.retire(live.param);
        self.live = None;
        self.rebuild_prefix();
        Ok(())
    }

    pub fn add_adapter(&mut self, store: &mut ParamStore, stage: usize, a_init: Matrix, rank: usize) -> Result<()> {
        if a_init.shape() != (self.rows, rank) {
            return Err(Error::Precondition(format!("{}: adapter A must be {}x{rank}", self.name, self.rows)));
        }
        let a = store.add(format!("{}.lora_a@{stage}", self.name), a_init);
        let b = store.add(format!("{}.lora_b@{stage}", self.name), Matrix::zeros(rank, self.cols));
        self.adapters.push(Adapter { stage, rank, a, b });
        Ok(())
    }

    pub fn close_stage(&mut self, stage: usize) {
        self.frozen_through = Some(self.frozen_through.map_or(stage, |f| f.max(stage)));
    }

    pub fn base_scalars(&self) -> usize {
        self.base.as_ref().map_or(0, Matrix::len)
    }

    pub fn slice_scalars(&self) -> usize {
        self.slices.iter().map(|s| s.factors.stored_scalars()).sum()
    }

    pub fn adapter_scalars(&self) -> usize {
        self.adapters.iter().map(|a| a.rank * (self.rows + self.cols)).sum()
    }

    /// Stored scalars, counting slices in factored form.
    pub fn stored_scalars(&self) -> usize {
        self.base_scalars() + self.slice_scalars() + self.adapter_scalars()
    }

    pub fn checksums(&self, out: &mut Checksums) {
        if let Some(b) = &self.base {
            out.insert(format!("{}.base", self.name), b.checksum());
        }
        for s in &self.slices {
            let f = &s.factors;
            let h = f.u.checksum() ^ f.vt.checksum().rotate_left(17) ^ Matrix::row_vector(&f.sigma).checksum().rotate_left(34);
            out.insert(format!("{}.slice@{}", self.name, s.stage), h);
        }
    }
}

/// Exact (untruncated) per-stage ledger for bias vectors and scalars.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StackableBias {
    pub uid: usize,
    pub name: String,
    pub len: usize,
    pub origin: usize,
    pub base: Option<Vec<f64>>,
    pub deltas: Vec<(usize, Vec<f64>)>,
    pub live: Option<Live>,
    pub frozen_through: Option<usize>,
    #[serde(skip)]
    prefix: Vec<Matrix>,
}

impl PartialEq for StackableBias {
    fn eq(&self, o: &Self) -> bool {
        self.uid == o.uid
            && self.name == o.name
            && self.len == o.len
            && self.origin == o.origin
            && self.base == o.base
            && self.deltas == o.deltas
            && self.live == o.live
            && self.frozen_through == o.frozen_through
    }
}

impl StackableBias {
    pub fn new(uid: usize, name: impl Into<String>, len: usize, origin: usize) -> Self {
        StackableBias {
            uid,
            name: name.into(),
            len,
            origin,
            base: None,
            deltas: Vec::new(),
            live: None,
            frozen_through: None,
            prefix: Vec::new(),
        }
    }

    pub fn rebuild_prefix(&mut self) {
        self.prefix.clear();
        let Some(base) = &self.base else { return };
        let mut acc = Matrix::row_vector(base);
        self.prefix.push(acc.clone());
        for (_, d) in &self.deltas {
            acc = acc.add(&Matrix::row_vector(d));
            self.prefix.push(acc.clone());
        }
    }

    pub fn attach_live(&mut self, store: &mut ParamStore, stage: usize, init: Vec<f64>) -> Result<ParamId> {
        if self.live.is_some() {
            return Err(Error::Contract(format!("{} already has a live component", self.name)));
        }
        if init.len() != self.len {
            return Err(Error::Precondition(format!("{}: live init length mismatch", self.name)));
        }
        let param = store.add(format!("{}.live@{stage}", self.name), Matrix::row_vector(&init));
        self.live = Some(Live { stage, param });
        Ok(param)
    }

    fn resolvable(&self, tau: usize) -> Result<()> {
        if tau < self.origin {
            return Err(Error::Precondition(format!(
                "{}: cursor {tau} precedes creation at stage {}",
                self.name, self.origin
            )));
        }
        if self.live.is_some_and(|l| l.stage == tau) || self.frozen_through.is_some_and(|f| tau <= f) {
            Ok(())
        } else {
            Err(Error::Precondition(format!("{}: cursor {tau} beyond the ledger", self.name)))
        }
    }

    pub fn frozen_at(&self, tau: usize) -> Option<&Matrix> {
        self.base.as_ref()?;
        let k = self.deltas.iter().take_while(|(s, _)| *s <= tau).count();
        self.prefix.get(k)
    }

    pub fn effective(&self, store: &ParamStore, tau: usize) -> Result<Matrix> {
        self.resolvable(tau)?;
        let mut b = self.frozen_at(tau).cloned().unwrap_or_else(|| Matrix::zeros(1, self.len));
        if let Some(l) = self.live.filter(|l| l.stage == tau) {
            b = b.add(store.value(l.param));
        }
        Ok(b)
    }

    pub fn bind(&self, ctx: &mut Ctx<'_>, tau: usize) -> Result<Var> {
        if let Some(&v) = ctx.resolved.get(&(self.uid, tau)) {
            return Ok(v);
        }
        if ctx.probe {
            let v = ctx.tape.variable(self.effective(ctx.store(), tau)?);
            ctx.probes.insert(self.uid, v);
            ctx.resolved.insert((self.uid, tau), v);
            return Ok(v);
        }
        self.resolvable(tau)?;
        let frozen = self.frozen_at(tau).map(|m| ctx.constant(m.clone()));
        let live = self.live.filter(|l| l.stage == tau).map(|l| ctx.param(l.param));
        let v = match (frozen, live) {
            (Some(f), Some(l)) => ctx.tape.add(f, l),
            (Some(f), None) => f,
            (None, Some(l)) => l,
            (None, None) => ctx.constant(Matrix::zeros(1, self.len)),
        };
        ctx.resolved.insert((self.uid, tau), v);
        Ok(v)
    }

    /// Stores the live delta exactly; becomes the base at the origin stage.
    pub fn stack(&mut self, store: &mut ParamStore) -> Result<usize> {
        let live = self
            .live
            .ok_or_else(|| Error::Contract(format!("{}: no live component to stack", self.name)))?;
        let v = store.value(live.param).as_slice().to_vec();
        if self.base.is_none() && live.stage == self.origin {
            self.base = Some(v);
        } else {
            self.deltas.push((live.stage, v));
        }
        store.retire(live.param);
        self.live = None;
        self.rebuild_prefix();
        Ok(self.len)
    }

    pub fn merge_live(&mut self, store: &mut ParamStore) -> Result<()> {
        let live = self
            .live
            .ok_or_else(|| Error::Contract(format!("{}: no live component to merge", self.name)))?;
        let v = store.value(live.param).as_slice().to_vec();
        self.base = Some(match self.base.take() {
            Some(b) => b.iter().zip(&v).map(|(a, c)| a + c).collect(),
            None => v,
        });
        store.retire(live.param);
        self.live = None;
        self.rebuild_prefix();
        Ok(())
    }

    pub fn close_stage(&mut self, stage: usize) {
        self.frozen_through = Some(self.frozen_through.map_or(stage, |f| f.max(stage)));
    }

    pub fn stored_scalars(&self) -> usize {
        self.base.as_ref().map_or(0, Vec::len) + self.deltas.iter().map(|(_, d)| d.len()).sum::<usize>()
    }

    pub fn checksums(&self, out: &mut Checksums) {
        if let Some(b) = &self.base {
            out.insert(format!("{}.base", self.name), Matrix::row_vector(b).checksum());
        }
        for (s, d) in &self.deltas {
            out.insert(format!("{}.delta@{s}", self.name), Matrix::row_vector(d).checksum());
        }
    }
}
