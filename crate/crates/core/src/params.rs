//! Arena of named tensors plus the per-pass forward context.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, ParamId, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub value: Matrix,
    pub frozen: bool,
}

/// Every router, head and live tensor lives here. Retired slots (live
/// components already compressed into a stack) stay as `None` so ids are
/// never reused.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    slots: Vec<Option<Tensor>>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.slots.push(Some(Tensor {
            name: name.into(),
            value,
            frozen: false,
        }));
        ParamId(self.slots.len() - 1)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        self.slots[id.0]
            .as_ref()
            .unwrap_or_else(|| panic!("parameter {} was retired", id.0))
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.slots[id.0]
            .as_mut()
            .unwrap_or_else(|| panic!("parameter {} was retired", id.0))
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.tensor(id).value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensor_mut(id).value
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.tensor(id).frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.tensor_mut(id).frozen = frozen;
    }

    pub fn freeze_all(&mut self) {
        for t in self.slots.iter_mut().flatten() {
            t.frozen = true;
        }
    }

    pub fn retire(&mut self, id: ParamId) -> Option<Tensor> {
        self.slots[id.0].take()
    }

    pub fn is_live(&self, id: ParamId) -> bool {
        self.slots.get(id.0).is_some_and(Option::is_some)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.as_ref().map(|t| (ParamId(i), t)))
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, t)| !t.frozen).map(|(id, _)| id).collect()
    }
}

/// Tape plus binding caches for one forward pass. Frozen tensors enter as
/// constants, trainable ones as differentiable leaves.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    consts: HashMap<ParamId, Var>,
    pub(crate) resolved: HashMap<(usize, usize), Var>,
    /// When set, every tensor (frozen or not) enters as a differentiable
    /// leaf so gradients with respect to effective weights can be read.
    pub(crate) probe: bool,
    pub(crate) probes: HashMap<usize, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            consts: HashMap::new(),
            resolved: HashMap::new(),
            probe: false,
            probes: HashMap::new(),
        }
    }

    pub fn probing(store: &'a ParamStore) -> Self {
        Ctx {
            probe: true,
            ..Ctx::new(store)
        }
    }

    /// Leaf node standing for the effective weight of ledger `uid`, if probed.
    pub fn probe_var(&self, uid: usize) -> Option<Var> {
        self.probes.get(&uid).copied()
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.store.tensor(id);
        if t.frozen && !self.probe {
            if let Some(&v) = self.consts.get(&id) {
                return v;
            }
            let v = self.tape.constant(t.value.clone());
            self.consts.insert(id, v);
            v
        } else {
            self.tape.param(id, &t.value)
        }
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.tape.constant(m)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.tape.value(v)
    }
}

/// Bit-level fingerprint of every tensor, keyed by name.
pub type Checksums = BTreeMap<String, u64>;
