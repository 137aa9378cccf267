//! Sample-level routing: attention pooling, noisy top-K gating and the two
//! auxiliary routing losses.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::encoders::encode;
use crate::flexdata::{Dataset, ModalityId, TaskId};
use crate::model::Model;
use crate::numerics::rng::normal;
use crate::numerics::{Matrix, ParamId, Var};
use crate::params::Ctx;
use crate::report::{num, opt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterHead {
    pub modality: ModalityId,
    pub stage: usize,
    /// `d × N`
    pub w_gate: ParamId,
    /// `d × N`
    pub w_noise: ParamId,
    /// `1 × d`
    pub query: ParamId,
}

impl RouterHead {
    pub fn params(&self) -> [ParamId; 3] {
        [self.w_gate, self.w_noise, self.query]
    }
}

/// Gate weights recorded by value (plain numbers, no tape).
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub dense: Vec<f64>,
}

/// A decision plus the differentiable dense gate (`1 × N`).
#[derive(Clone, Debug)]
pub struct Gate {
    pub decision: GateDecision,
    pub dense: Var,
    pub weights: Var,
}

/// `Σ_t α_t z_t` with `α = softmax(z q / √d)`; returns a `1 × d` node.
pub fn tap_pool(ctx: &mut Ctx<'_>, z: Var, q: Var) -> Result<Var> {
    let (len, d) = ctx.value(z).shape();
    if len == 0 {
        return Err(Error::Contract("attention pooling over an empty sequence".into()));
    }
    let t = &mut ctx.tape;
    let scores = t.matmul_t(q, z);
    let scores = t.scale(scores, 1.0 / (d as f64).sqrt());
    let alpha = t.softmax_rows(scores);
    // z_1 + Σ α_t (z_t − z_1): identical in exact arithmetic, and exact in
    // floating point when every step equals z_1.
    let mut first = Matrix::zeros(1, len);
    first[(0, 0)] = 1.0;
    let first = t.constant(first);
    let z1 = t.matmul(first, z);
    let neg = t.scale(z1, -1.0);
    let diff = t.add_row(z, neg);
    let mix = t.matmul(alpha, diff);
    Ok(t.add(z1, mix))
}

/// Indices of the `k` largest entries, ties to the lowest index, returned ascending.
pub fn top_k(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::Precondition(format!("K={k} outside 1..={}", logits.len())));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut sel = order[..k].to_vec();
    sel.sort_unstable();
    Ok(sel)
}

/// Noisy top-K gate on pooled features. Noise is drawn only when `rng` is
/// given (training); evaluation is deterministic.
pub fn noisy_topk_gate(
    ctx: &mut Ctx<'_>,
    pooled: Var,
    head: &RouterHead,
    k: usize,
    rng: Option<&mut impl Rng>,
) -> Result<Gate> {
    let wg = ctx.param(head.w_gate);
    let n = ctx.value(wg).cols();
    if k == 0 || k > n {
        return Err(Error::Precondition(format!("K={k} outside 1..={n}")));
    }
    let clean = ctx.tape.matmul(pooled, wg);
    let logits = match rng {
        Some(rng) => {
            let wn = ctx.param(head.w_noise);
            let eps: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
            let eps = ctx.constant(Matrix::row_vector(&eps));
            let t = &mut ctx.tape;
            let raw = t.matmul(pooled, wn);
            let scale = t.softplus(raw);
            let noise = t.hadamard(eps, scale);
            t.add(clean, noise)
        }
        None => clean,
    };
    gate_from_logits(ctx, logits, k)
}

/// Top-K selection and softmax over the kept logits of a `1 × N` node.
pub fn gate_from_logits(ctx: &mut Ctx<'_>, logits: Var, k: usize) -> Result<Gate> {
    let values = ctx.value(logits).as_slice().to_vec();
    let n = values.len();
    let selected = top_k(&values, k)?;
    let t = &mut ctx.tape;
    let kept = t.gather_cols(logits, &selected);
    let weights = t.softmax_rows(kept);
    let dense = t.scatter_cols(weights, &selected, n);
    let decision = GateDecision {
        weights: ctx.value(weights).as_slice().to_vec(),
        dense: ctx.value(dense).as_slice().to_vec(),
        selected,
    };
    Ok(Gate { decision, dense, weights })
}

/// Squared coefficient of variation of per-expert importance summed over
/// the given dense gates (`1 × N` nodes). Zero mean importance gives 0.
pub fn balance_loss(ctx: &mut Ctx<'_>, dense: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = dense.split_first() else {
        return Err(Error::Precondition("balance loss over an empty batch".into()));
    };
    let n = ctx.value(first).cols();
    let t = &mut ctx.tape;
    let mut imp = first;
    for &g in rest {
        imp = t.add(imp, g);
    }
    let total = t.sum(imp);
    let mean = t.scale(total, 1.0 / n as f64);
    if t.scalar(mean) == 0.0 {
        return Ok(t.constant(Matrix::scalar(0.0)));
    }
    let ones = t.constant(Matrix::filled(1, n, 1.0));
    let mean_row = t.scale_by(ones, mean);
    let centered = t.sub(imp, mean_row);
    let sq = t.hadamard(centered, centered);
    let var = t.sum(sq);
    let var = t.scale(var, 1.0 / n as f64);
    let m2 = t.hadamard(mean, mean);
    let inv = t.recip(m2);
    Ok(t.hadamard(var, inv))
}

/// Plain-number CV² of an importance vector.
pub fn cv_squared(importance: &[f64]) -> f64 {
    let n = importance.len() as f64;
    let mean = importance.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = importance.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean)
}

/// `β · C(|M|,2)⁻¹ · Σ_{pairs} cos(ḡ_m, ḡ_m')` over the given mean gates.
/// Fewer than two modalities give 0.
pub fn divergence_loss(ctx: &mut Ctx<'_>, mean_gates: &[Var], beta: f64) -> Var {
    let m = mean_gates.len();
    let t = &mut ctx.tape;
    if m < 2 {
        return t.constant(Matrix::scalar(0.0));
    }
    let norms: Vec<Var> = mean_gates
        .iter()
        .map(|&g| {
            let sq = t.hadamard(g, g);
            let s = t.sum(sq);
            t.sqrt(s)
        })
        .collect();
    let mut acc: Option<Var> = None;
    for a in 0..m {
        for b in a + 1..m {
            let na = t.scalar(norms[a]);
            let nb = t.scalar(norms[b]);
            if na == 0.0 || nb == 0.0 {
                continue;
            }
            let prod = t.hadamard(mean_gates[a], mean_gates[b]);
            let dot = t.sum(prod);
            let den = t.hadamard(norms[a], norms[b]);
            let inv = t.recip(den);
            let cos = t.hadamard(dot, inv);
            acc = Some(match acc {
                Some(x) => t.add(x, cos),
                None => cos,
            });
        }
    }
    let pairs = (m * (m - 1) / 2) as f64;
    match acc {
        Some(s) => t.scale(s, beta / pairs),
        None => t.constant(Matrix::scalar(0.0)),
    }
}

/// Plain-number version of [`divergence_loss`].
pub fn divergence_value(mean_gates: &[Vec<f64>], beta: f64) -> f64 {
    let m = mean_gates.len();
    if m < 2 {
        return 0.0;
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut s = 0.0;
    for a in 0..m {
        for b in a + 1..m {
            let (na, nb) = (norm(&mean_gates[a]), norm(&mean_gates[b]));
            if na > 0.0 && nb > 0.0 {
                s += mean_gates[a].iter().zip(&mean_gates[b]).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            }
        }
    }
    beta * s / (m * (m - 1) / 2) as f64
}

/// Per-expert activation ratio and mean gate weight given activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertUsage {
    pub activation_ratio: f64,
    pub mean_gate_weight: Option<f64>,
}

/// Token-weighted usage statistics over `(decision, sequence length)` pairs.
pub fn usage_from_decisions(decisions: &[(GateDecision, usize)], n_experts: usize) -> Vec<ExpertUsage> {
    let total: usize = decisions.iter().map(|(_, l)| l).sum();
    let mut active = vec![0usize; n_experts];
    let mut weight = vec![0.0; n_experts];
    for (d, len) in decisions {
        for (&e, &w) in d.selected.iter().zip(&d.weights) {
            active[e] += len;
            weight[e] += w * *len as f64;
        }
    }
    (0..n_experts)
        .map(|e| ExpertUsage {
            activation_ratio: if total == 0 { 0.0 } else { active[e] as f64 / total as f64 },
            mean_gate_weight: (active[e] > 0).then(|| weight[e] / active[e] as f64),
        })
        .collect()
}

pub type Fingerprint = BTreeMap<ModalityId, Vec<ExpertUsage>>;

/// Noise-free routing statistics of `task` on `data` at `cursor`, per
/// modality. Absent modalities contribute no tokens.
pub fn routing_fingerprint(model: &Model, task: &TaskId, data: &Dataset, cursor: usize) -> Result<Fingerprint> {
    if data.is_empty() {
        return Err(Error::Precondition("fingerprint needs at least one sample".into()));
    }
    let spec = &model.task(task)?.spec;
    let mut decisions: BTreeMap<ModalityId, Vec<(GateDecision, usize)>> =
        spec.modalities.iter().map(|m| (m.clone(), Vec::new())).collect();
    for sample in &data.samples {
        for (m, seq) in sample.present() {
            let Some(list) = decisions.get_mut(m) else {
                return Err(Error::Precondition(format!("modality {m} is not part of task {task}")));
            };
            let enc = model
                .encoders
                .get(m)
                .ok_or_else(|| Error::Precondition(format!("no encoder for modality {m}")))?;
            let head = model.router_for(m, cursor)?;
            let mut ctx = Ctx::new(&model.store);
            let z = encode(&mut ctx, enc, seq, cursor)?;
            let q = ctx.param(head.query);
            let pooled = tap_pool(&mut ctx, z, q)?;
            let gate = noisy_topk_gate(&mut ctx, pooled, head, model.config.top_k, None::<&mut rand_chacha::ChaCha8Rng>)?;
            list.push((gate.decision, seq.len()));
        }
    }
    let n = model.experts.len();
    Ok(decisions
        .into_iter()
        .map(|(m, d)| (m, usage_from_decisions(&d, n)))
        .collect())
}

pub const FINGERPRINT_HEADER: &str = "task,modality,expert,activation_ratio,mean_gate_weight";

pub fn fingerprint_csv(rows: &[(TaskId, Fingerprint)]) -> String {
    let mut out = String::from(FINGERPRINT_HEADER);
    out.push('\n');
    for (task, fp) in rows {
        for (m, usage) in fp {
            for (e, u) in usage.iter().enumerate() {
                let _ = writeln!(out, "{task},{m},{e},{},{}", num(u.activation_ratio), opt(u.mean_gate_weight));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeedStream;
    use crate::params::ParamStore;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn pool(z: Matrix, q: Matrix) -> Matrix {
        let store = ParamStore::default();
        let mut ctx = Ctx::new(&store);
        let z = ctx.constant(z);
        let q = ctx.constant(q);
        let p = tap_pool(&mut ctx, z, q).unwrap();
        ctx.value(p).clone()
    }

    fn gate(logits: &[f64], k: usize) -> Result<GateDecision> {
        let store = ParamStore::default();
        let mut ctx = Ctx::new(&store);
        let l = ctx.constant(Matrix::row_vector(logits));
        gate_from_logits(&mut ctx, l, k).map(|g| g.decision)
    }

    #[test]
    fn pooling_examples() {
        let z = Matrix::from_rows(&[vec![1.0], vec![3.0]]);
        assert_eq!(pool(z.clone(), Matrix::scalar(0.0)).item(), 2.0);
        let a = 1.0 / (1.0 + 4f64.exp());
        let oracle = a * 1.0 + (1.0 - a) * 3.0;
        let got = pool(z, Matrix::scalar(2.0)).item();
        assert!((got - oracle).abs() < 1e-14);
        assert!((got - 2.964028).abs() < 1e-6);
        let single = Matrix::from_rows(&[vec![0.2, -4.0]]);
        assert_eq!(pool(single.clone(), Matrix::row_vector(&[9.0, 1.0])), single);
    }

    #[test]
    fn gate_examples() {
        let g = gate(&[2.0, 1.0, 0.0, -1.0, 3.0], 2).unwrap();
        assert_eq!(g.selected, vec![0, 4]);
        let e = 1.0 / (1.0 + 1f64.exp());
        assert!((g.weights[0] - e).abs() < 1e-15 && (g.weights[0] - 0.26894).abs() < 1e-5);
        assert!((g.weights[1] - 0.73106).abs() < 1e-5);
        assert_eq!(g.dense[1..4], [0.0, 0.0, 0.0]);

        let g = gate(&[0.0; 4], 2).unwrap();
        assert_eq!((g.selected, g.weights), (vec![0, 1], vec![0.5, 0.5]));

        let g = gate(&[0.3, -0.2, 1.0], 3).unwrap();
        assert!((g.dense.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(gate(&[1.0, 2.0], 3), Err(Error::Precondition(_))));
        assert!(matches!(gate(&[1.0, 2.0], 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn cv_examples() {
        assert_eq!(cv_squared(&[1.0; 5]), 0.0);
        assert_eq!(cv_squared(&[1.0, 0.0]), 1.0);
        assert_eq!(cv_squared(&[3.0, 1.0]), 0.25);
        assert_eq!(cv_squared(&[0.0, 0.0]), 0.0);
        let store = ParamStore::default();
        let mut ctx = Ctx::new(&store);
        let g = [ctx.constant(Matrix::row_vector(&[1.0, 0.0])), ctx.constant(Matrix::row_vector(&[2.0, 1.0]))];
        let l = balance_loss(&mut ctx, &g).unwrap();
        assert!((ctx.tape.scalar(l) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn divergence_examples() {
        let u = vec![0.5, 0.5];
        assert!((divergence_value(&[u.clone(), u], 1.0) - 1.0).abs() < 1e-15);
        assert_eq!(divergence_value(&[vec![1.0, 0.0], vec![0.0, 1.0]], -1.0), 0.0);
        let three = [vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((divergence_value(&three, 1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(divergence_value(&[vec![1.0, 0.0]], 1.0), 0.0);

        let store = ParamStore::default();
        let mut ctx = Ctx::new(&store);
        let vars: Vec<Var> = three.iter().map(|v| ctx.constant(Matrix::row_vector(v))).collect();
        let l = divergence_loss(&mut ctx, &vars, 1.0);
        assert!((ctx.tape.scalar(l) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn usage_examples() {
        let d = GateDecision {
            selected: vec![0, 1],
            weights: vec![0.7, 0.3],
            dense: vec![0.7, 0.3, 0.0],
        };
        let u = usage_from_decisions(&[(d, 4)], 3);
        assert_eq!(u.iter().map(|x| x.activation_ratio).collect::<Vec<_>>(), vec![1.0, 1.0, 0.0]);
        assert_eq!(u[0].mean_gate_weight, Some(0.7));
        assert_eq!(u[1].mean_gate_weight, Some(0.3));
        assert_eq!(u[2].mean_gate_weight, None);
    }

    #[test]
    fn usage_matches_recount() {
        let mut rng = SeedStream::new(4).rng("usage");
        let n = 5;
        let decisions: Vec<(GateDecision, usize)> = (0..40)
            .map(|_| {
                let logits: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
                (gate(&logits, 2).unwrap(), rng.random_range(1..9))
            })
            .collect();
        let u = usage_from_decisions(&decisions, n);
        for (e, ue) in u.iter().enumerate() {
            let mut tokens = 0;
            let mut active = 0;
            let mut w = 0.0;
            for (d, len) in &decisions {
                tokens += len;
                if d.dense[e] > 0.0 {
                    active += len;
                    w += d.dense[e] * *len as f64;
                }
            }
            assert_eq!(ue.activation_ratio, active as f64 / tokens as f64);
            if active > 0 {
                assert!((ue.mean_gate_weight.unwrap() - w / active as f64).abs() < 1e-12);
            }
        }
        let dense: Vec<(GateDecision, usize)> = decisions
            .iter()
            .map(|(d, l)| (gate(&d.dense, n).unwrap(), *l))
            .collect();
        assert!(usage_from_decisions(&dense, n).iter().all(|u| u.activation_ratio == 1.0));
    }

    #[test]
    fn eval_gate_is_deterministic_and_training_noise_varies() {
        let mut store = ParamStore::default();
        let mut rng = SeedStream::new(1).rng("w");
        let head = RouterHead {
            modality: "m".into(),
            stage: 0,
            w_gate: store.add("g", crate::numerics::rng::gaussian_matrix(&mut rng, 3, 4, 1.0)),
            w_noise: store.add("n", crate::numerics::rng::gaussian_matrix(&mut rng, 3, 4, 1.0)),
            query: store.add("q", Matrix::zeros(1, 3)),
        };
        let run = |noise: Option<u64>| {
            let mut ctx = Ctx::new(&store);
            let p = ctx.constant(Matrix::row_vector(&[0.5, -1.0, 2.0]));
            let mut r = noise.map(|s| SeedStream::new(s).rng("noise"));
            noisy_topk_gate(&mut ctx, p, &head, 2, r.as_mut()).unwrap().decision
        };
        assert_eq!(run(None), run(None));
        let noisy: Vec<_> = (0..8).map(|s| run(Some(s)).weights).collect();
        assert!(noisy.windows(2).any(|w| w[0] != w[1]));
    }

    /// Selection is discrete: moving an unselected expert's logit without
    /// crossing the threshold leaves the selected-path gradient unchanged.
    #[test]
    fn selection_carries_no_gradient() {
        let grad_for = |third: f64| {
            let mut store = ParamStore::default();
            let id = store.add("l", Matrix::row_vector(&[1.0, 0.5, third]));
            let mut ctx = Ctx::new(&store);
            let l = ctx.param(id);
            let g = gate_from_logits(&mut ctx, l, 2).unwrap();
            let w0 = ctx.tape.pick(g.dense, 0, 0);
            let sq = ctx.tape.hadamard(w0, w0);
            let grads = ctx.tape.backward(sq).unwrap();
            grads.param(id).unwrap()
        };
        let a = grad_for(-3.0);
        let b = grad_for(-7.0);
        assert_eq!(a, b);
        assert_eq!(a[(0, 2)], 0.0);
    }

    /// Two identical experts with a collapsed initial router: without the
    /// penalty importance stays lopsided, with it the router rebalances.
    fn toy_router_ratio(seed: u64, w_bal: f64) -> f64 {
        let d = 4;
        let ss = SeedStream::new(seed);
        let mut rng = ss.rng("inputs");
        let xs = crate::numerics::rng::gaussian_matrix(&mut rng, 32, d, 1.0);
        let mut w = crate::numerics::rng::gaussian_matrix(&mut ss.rng("w"), d, 2, 0.1);
        // adversarial init: constant feature routes everything to expert 0
        for j in 0..d {
            w[(j, 0)] += 2.0;
        }
        let xs = xs.map(|x| x + 1.0);
        let importance = |w: &Matrix| {
            let g = softmax(&xs.matmul(w));
            (0..2).map(|e| g.column(e).iter().sum::<f64>()).collect::<Vec<f64>>()
        };
        for _ in 0..400 {
            let mut store = ParamStore::default();
            let id = store.add("w", w.clone());
            let mut ctx = Ctx::new(&store);
            let wv = ctx.param(id);
            let mut dense = Vec::new();
            for r in 0..xs.rows() {
                let x = ctx.constant(xs.row_range(r, r + 1));
                let l = ctx.tape.matmul(x, wv);
                dense.push(gate_from_logits(&mut ctx, l, 2).unwrap().dense);
            }
            let bal = balance_loss(&mut ctx, &dense).unwrap();
            let loss = ctx.tape.scale(bal, w_bal);
            let grads = ctx.tape.backward(loss).unwrap();
            w.axpy(-50.0, &grads.param(id).unwrap());
        }
        let imp = importance(&w);
        imp[0].max(imp[1]) / imp[0].min(imp[1])
    }

    fn softmax(m: &Matrix) -> Matrix {
        crate::numerics::tape::softmax_rows(m)
    }

    fn fingerprint_setup(k: usize) -> (Model, Vec<crate::trainer::TaskData>) {
        use crate::scenarios::{binary_task, modality, task_data};
        let tasks: Vec<_> = ["a", "b"]
            .iter()
            .enumerate()
            .map(|(i, id)| task_data(&binary_task(id, 10, i as u64, vec![modality("s", 4, 2, (2, 5))]), 6, 1.0, 9).unwrap())
            .collect();
        let cfg = crate::model::ModelConfig::new(8, 4, k);
        (crate::trainer::prepare_pretraining(&tasks, &cfg, 1).unwrap(), tasks)
    }

    #[test]
    fn dense_routing_fingerprint_is_all_ones() {
        let (model, tasks) = fingerprint_setup(4);
        let fp = routing_fingerprint(&model, tasks[0].id(), &tasks[0].eval, 0).unwrap();
        let usage = &fp[&ModalityId("s".into())];
        assert_eq!(usage.len(), 4);
        assert!(usage.iter().all(|u| u.activation_ratio == 1.0));
        let total: f64 = usage.iter().map(|u| u.mean_gate_weight.unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tasks_sharing_a_router_share_fingerprints() {
        let (model, tasks) = fingerprint_setup(2);
        let data = &tasks[0].eval;
        let a = routing_fingerprint(&model, tasks[0].id(), data, 0).unwrap();
        let b = routing_fingerprint(&model, tasks[1].id(), data, 0).unwrap();
        assert_eq!(a, b);
        let csv = fingerprint_csv(&[(tasks[0].id().clone(), a)]);
        assert!(csv.starts_with(FINGERPRINT_HEADER));
        assert_eq!(csv.lines().count(), 1 + 4);
        let ratios: f64 = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap()).sum();
        assert!((ratios - 2.0).abs() < 1e-12);
        let empty = data.subset(&[]);
        assert!(matches!(routing_fingerprint(&model, tasks[0].id(), &empty, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn balance_penalty_prevents_collapse() {
        for seed in 0..3 {
            let collapsed = toy_router_ratio(seed, 0.0);
            let balanced = toy_router_ratio(seed, 0.01);
            assert!(collapsed > 10.0, "seed {seed}: unpenalized ratio {collapsed}");
            assert!(balanced <= 3.0, "seed {seed}: penalized ratio {balanced}");
        }
    }

    proptest! {
        #[test]
        fn tap_stays_in_convex_hull(vals in prop::collection::vec(-5.0f64..5.0, 1..12), q in -3.0f64..3.0) {
            let z = Matrix::from_vec(vals.len(), 1, vals.clone()).unwrap();
            let p = pool(z, Matrix::scalar(q)).item();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
            let same = Matrix::filled(vals.len(), 1, vals[0]);
            prop_assert_eq!(pool(same, Matrix::scalar(q)).item(), vals[0]);
        }

        #[test]
        fn gates_normalize(logits in prop::collection::vec(-4i32..4, 1..8), k in 1usize..8) {
            let logits: Vec<f64> = logits.into_iter().map(f64::from).collect();
            let k = k.min(logits.len());
            let g = gate(&logits, k).unwrap();
            prop_assert_eq!(g.selected.len(), k);
            prop_assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((g.dense.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let support: Vec<usize> = (0..logits.len()).filter(|&i| g.dense[i] > 0.0).collect();
            prop_assert_eq!(&support, &g.selected);
            // unique under the tie rule: every unselected logit is strictly
            // smaller, or equal with a larger index than some selected one
            for i in 0..logits.len() {
                if !g.selected.contains(&i) {
                    for &s in &g.selected {
                        prop_assert!(logits[s] > logits[i] || (logits[s] == logits[i] && s < i));
                    }
                }
            }
        }
    }
}
