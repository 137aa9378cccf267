//! Shared temporal expert pool and the modality-wise MoE forward pass.

pub mod stack;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::encode;
use crate::error::{Error, Result};
use crate::flexdata::{ModalityId, Sample, TaskSpec};
use crate::model::Model;
use crate::numerics::Var;
use crate::params::Ctx;
use crate::routing::{noisy_topk_gate, tap_pool, Gate};
pub use stack::{StackableBias, StackableWeight};

/// Same-padded temporal conv (kernel `κ`), GELU, then a position-wise
/// two-layer MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub kernel: usize,
    /// `d × dκ`
    pub conv: StackableWeight,
    pub conv_bias: StackableBias,
    /// `d_h × d`
    pub fc1: StackableWeight,
    pub fc1_bias: StackableBias,
    /// `d × d_h`
    pub fc2: StackableWeight,
    pub fc2_bias: StackableBias,
}

/// Sublayer inputs and output of one expert application.
#[derive(Clone, Copy, Debug)]
pub struct ExpertTrace {
    pub conv_in: Var,
    pub fc1_in: Var,
    pub fc2_in: Var,
    pub out: Var,
}

impl Expert {
    pub fn new(index: usize, d: usize, d_h: usize, kernel: usize, uid: &mut impl FnMut() -> usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Precondition(format!("conv kernel must be odd, got {kernel}")));
        }
        let n = |s: &str| format!("expert{index}.{s}");
        Ok(Expert {
            kernel,
            conv: StackableWeight::new(uid(), n("conv"), d, d * kernel, 0),
            conv_bias: StackableBias::new(uid(), n("conv_bias"), d, 0),
            fc1: StackableWeight::new(uid(), n("fc1"), d_h, d, 0),
            fc1_bias: StackableBias::new(uid(), n("fc1_bias"), d_h, 0),
            fc2: StackableWeight::new(uid(), n("fc2"), d, d_h, 0),
            fc2_bias: StackableBias::new(uid(), n("fc2_bias"), d, 0),
        })
    }

    pub fn weights(&self) -> [&StackableWeight; 3] {
        [&self.conv, &self.fc1, &self.fc2]
    }

    pub fn weights_mut(&mut self) -> [&mut StackableWeight; 3] {
        [&mut self.conv, &mut self.fc1, &mut self.fc2]
    }

    pub fn biases(&self) -> [&StackableBias; 3] {
        [&self.conv_bias, &self.fc1_bias, &self.fc2_bias]
    }

    pub fn biases_mut(&mut self) -> [&mut StackableBias; 3] {
        [&mut self.conv_bias, &mut self.fc1_bias, &mut self.fc2_bias]
    }

    pub fn stored_scalars(&self) -> usize {
        self.weights().iter().map(|w| w.stored_scalars()).sum::<usize>()
            + self.biases().iter().map(|b| b.stored_scalars()).sum::<usize>()
    }
}

pub fn expert_forward(ctx: &mut Ctx<'_>, e: &Expert, z: Var, tau: usize) -> Result<ExpertTrace> {
    if ctx.value(z).rows() == 0 {
        return Err(Error::Contract("expert applied to an empty sequence".into()));
    }
    let wc = e.conv.bind(ctx, tau)?;
    let bc = e.conv_bias.bind(ctx, tau)?;
    let w1 = e.fc1.bind(ctx, tau)?;
    let b1 = e.fc1_bias.bind(ctx, tau)?;
    let w2 = e.fc2.bind(ctx, tau)?;
    let b2 = e.fc2_bias.bind(ctx, tau)?;
    let t = &mut ctx.tape;
    let conv_in = t.im2col(z, e.kernel);
    let c = t.matmul_t(conv_in, wc);
    let c = t.add_row(c, bc);
    let fc1_in = t.gelu(c);
    let h = t.matmul_t(fc1_in, w1);
    let h = t.add_row(h, b1);
    let fc2_in = t.gelu(h);
    let o = t.matmul_t(fc2_in, w2);
    let out = t.add_row(o, b2);
    Ok(ExpertTrace {
        conv_in,
        fc1_in,
        fc2_in,
        out,
    })
}

/// Routing and expert traces for one modality of one sample.
#[derive(Clone, Debug)]
pub struct ModalityTrace {
    pub length: usize,
    pub embedding: Var,
    pub gate: Gate,
    pub experts: Vec<(usize, ExpertTrace)>,
    pub mixed: Var,
}

#[derive(Clone, Debug)]
pub struct MoeOutput {
    /// `1 × d`
    pub fused: Var,
    pub modalities: BTreeMap<ModalityId, ModalityTrace>,
}

/// Encode, pool, gate and mix every present modality of `sample`, then sum
/// the time-mean of each modality's mixture. `rng` enables gate noise.
pub fn moe_forward<R: Rng>(
    ctx: &mut Ctx<'_>,
    model: &Model,
    sample: &Sample,
    task: &TaskSpec,
    tau: usize,
    mut rng: Option<&mut R>,
) -> Result<MoeOutput> {
    let mut fused: Option<Var> = None;
    let mut modalities = BTreeMap::new();
    for (m, seq) in &sample.modalities {
        if !seq.present {
            continue;
        }
        if !task.modalities.contains(m) {
            return Err(Error::Precondition(format!("modality {m} is not part of task {}", task.id)));
        }
        let enc = model
            .encoders
            .get(m)
            .ok_or_else(|| Error::Precondition(format!("no encoder for modality {m}")))?;
        let head = model.router_for(m, tau)?;
        let z = encode(ctx, enc, seq, tau)?;
        let q = ctx.param(head.query);
        let pooled = tap_pool(ctx, z, q)?;
        let gate = noisy_topk_gate(ctx, pooled, head, model.config.top_k, rng.as_deref_mut())?;
        let mut mixed: Option<Var> = None;
        let mut experts = Vec::with_capacity(gate.decision.selected.len());
        for (slot, &i) in gate.decision.selected.iter().enumerate() {
            let tr = expert_forward(ctx, &model.experts[i], z, tau)?;
            let g = ctx.tape.pick(gate.weights, 0, slot);
            let y = ctx.tape.scale_by(tr.out, g);
            mixed = Some(match mixed {
                Some(acc) => ctx.tape.add(acc, y),
                None => y,
            });
            experts.push((i, tr));
        }
        let mixed = mixed.expect("K >= 1");
        let pooled_y = ctx.tape.mean_rows(mixed);
        fused = Some(match fused {
            Some(acc) => ctx.tape.add(acc, pooled_y),
            None => pooled_y,
        });
        modalities.insert(
            m.clone(),
            ModalityTrace {
                length: seq.values.rows(),
                embedding: z,
                gate,
                experts,
                mixed,
            },
        );
    }
    let fused = fused.ok_or_else(|| Error::Contract("every modality of the sample is absent".into()))?;
    Ok(MoeOutput { fused, modalities })
}
