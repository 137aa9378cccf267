//! Acceptance suite. Each criterion runs at its stated tolerance and prints
//! one `PASS`/`FAIL` line (written straight to stdout so it shows even when
//! the harness captures output).

use std::io::Write as _;

use flame_core::encoders::{encode, Encoder};
use flame_core::experts::{expert_forward, Expert};
use flame_core::flexdata::{Label, ModalityId, ModalitySequence, Objective};
use flame_core::model::{task_loss, ModelConfig};
use flame_core::numerics::rng::{gaussian_matrix, random_orthogonal};
use flame_core::numerics::tape::{finite_difference, relative_error};
use flame_core::numerics::{Gradients, Matrix, ParamId, SeedStream, Var};
use flame_core::params::{Ctx, ParamStore};
use flame_core::routing::{
    balance_loss, divergence_loss, fingerprint_csv, noisy_topk_gate, routing_fingerprint, tap_pool, RouterHead,
};
use flame_core::scenarios::{binary_task, modality, task_data};
use flame_core::spectra::{
    alignment_flow, energy_spectrum, flow_closed_form, model_spectra, sample_complexity_curve, tail_bound_check,
    truncation_error, Sublayer,
};
use flame_core::trainer::{pretrain_multitask, run_stream, Method, StageData, StageLedger, TaskData, TrainConfig};
use rand::Rng;

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2} {verdict} {name}: {detail}");
    let _ = out.flush();
}

/// `Q diag(λ) Qᵀ` with a random orthogonal `Q`.
fn psd(rng: &mut impl Rng, lambdas: &[f64]) -> (Matrix, Matrix) {
    let q = random_orthogonal(rng, lambdas.len());
    let mut ql = q.clone();
    for r in 0..lambdas.len() {
        for (j, l) in lambdas.iter().enumerate() {
            ql[(r, j)] *= l;
        }
    }
    (ql.matmul_t(&q), q)
}

/// Spectrum with `r` head values and a tail totalling at most `ε·tr`.
fn tailed_spectrum(rng: &mut impl Rng, n: usize, r: usize, eps: f64) -> Vec<f64> {
    let head: Vec<f64> = (0..r).map(|_| rng.random_range(0.5..2.0)).collect();
    let raw: Vec<f64> = (r..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let h: f64 = head.iter().sum();
    let raw_sum: f64 = raw.iter().sum::<f64>().max(1e-300);
    let t = rng.random_range(0.0..1.0) * eps * h / (1.0 - eps);
    let mut out = head;
    out.extend(raw.iter().map(|x| x * t / raw_sum));
    out.sort_by(|a, b| b.total_cmp(a));
    out
}

fn toy_model() -> ModelConfig {
    let mut m = ModelConfig::new(16, 5, 2);
    m.d_hidden = Some(32);
    m
}

/// Stage 0: two tasks on a shared modality; stage 1 adds a modality;
/// stage 2 uses only the newer modality.
fn three_stage_stream(rank: usize, epochs: usize, seed: u64) -> Vec<StageData> {
    let s = || modality("s", 6, 3, (4, 8));
    let n = || modality("n", 4, 2, (3, 6));
    let t = |id: &str, label_seed: u64, mods, data_seed| task_data(&binary_task(id, 48, label_seed, mods), 32, 1.0, seed * 100 + data_seed).unwrap();
    vec![
        StageData {
            tasks: vec![t("t1", 1, vec![s()], 1), t("t2", 2, vec![s()], 2)],
            rank,
            epochs,
        },
        StageData {
            tasks: vec![t("t3", 3, vec![s(), n()], 3)],
            rank,
            epochs,
        },
        StageData {
            tasks: vec![t("t4", 4, vec![n()], 4)],
            rank,
            epochs,
        },
    ]
}

#[test]
fn criterion_01_structural_no_forgetting() {
    let stages = three_stage_stream(4, 4, 1);
    let run = run_stream(&stages, Method::Flame, &ModelConfig::new(16, 5, 2), &TrainConfig::default(), 1, |_, _| Ok(()));
    let (pass, detail) = match run {
        Ok(run) => {
            let mut checked = 0;
            let mut ok = true;
            for history in run.predictions.values() {
                let (_, first) = &history[0];
                for (_, later) in &history[1..] {
                    let same = first.len() == later.len()
                        && first
                            .iter()
                            .zip(later)
                            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
                    ok &= same;
                    checked += 1;
                }
            }
            (ok && checked == 5, format!("{checked} later-stage prediction vectors compared bitwise"))
        }
        Err(e) => (false, e.to_string()),
    };
    report(1, "structural no-forgetting", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_02_dual_energy_identity() {
    let ss = SeedStream::new(2);
    let mut worst: f64 = 0.0;
    for i in 0..200u64 {
        let mut rng = ss.rng_at("pair", i);
        let n = rng.random_range(1..13);
        let rows = rng.random_range(1..13);
        let w = gaussian_matrix(&mut rng, rows, n, 1.0);
        let samples = rng.random_range(1..2 * n + 1);
        let g = gaussian_matrix(&mut rng, samples, n, 1.0);
        let c = g.t_matmul(&g);
        let s = energy_spectrum(&w, &c).expect("spectrum");
        let a: f64 = s.data_aware.iter().sum();
        let b: f64 = s.eigen_terms.iter().sum();
        worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE));
    }
    let pass = worst <= 1e-6;
    report(2, "dual energy decomposition identity", pass, &format!("worst relative gap {worst:.3e} over 200 pairs"));
    assert!(pass);
}

#[test]
fn criterion_03_tail_bound() {
    let eq = tail_bound_check(&Matrix::identity(2), &Matrix::from_diag(&[0.99, 0.01]), 1, 0.01).expect("equality case");
    let ss = SeedStream::new(3);
    let mut worst = eq;
    for i in 0..200u64 {
        let mut rng = ss.rng_at("pair", i);
        let n = rng.random_range(2..11);
        let r = rng.random_range(1..n);
        let eps = rng.random_range(0.001..0.3);
        let lambdas = tailed_spectrum(&mut rng, n, r, eps);
        let (c, _) = psd(&mut rng, &lambdas);
        let rows = rng.random_range(1..11);
        let w = gaussian_matrix(&mut rng, rows, n, 1.0);
        worst = worst.min(tail_bound_check(&w, &c, r, eps).expect("hypothesis holds by construction"));
    }
    let pass = worst >= -1e-10 && eq >= -1e-10;
    report(3, "effective-rank tail bound", pass, &format!("equality-case margin {eq:.3e}, minimum margin {worst:.3e}"));
    assert!(pass);
}

#[test]
fn criterion_04_alignment_closed_form() {
    let times: Vec<f64> = (1..=10).map(|i| 0.3 * i as f64).collect();
    let ss = SeedStream::new(4);
    let mut worst: f64 = 0.0;
    for i in 0..5u64 {
        let mut rng = ss.rng_at("system", i);
        let lambdas: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..2.0)).collect();
        let (c, _) = psd(&mut rng, &lambdas);
        // unit Frobenius norm keeps the absolute tolerance scale-free
        let g = gaussian_matrix(&mut rng, 4, 4, 1.0);
        let w_star = g.scale(1.0 / g.frobenius());
        let f = alignment_flow(&w_star, &c, &times, 1e-3).expect("flow");
        worst = f.errors.iter().copied().fold(worst, f64::max);
    }
    let t = std::f64::consts::LN_2;
    let scalar = alignment_flow(&Matrix::scalar(1.0), &Matrix::scalar(1.0), &[t], 1e-3).expect("scalar flow");
    let sim = scalar.snapshots[0].item();
    let closed = flow_closed_form(&Matrix::scalar(1.0), &Matrix::scalar(1.0), t).expect("closed form").item();
    let pass = worst <= 1e-3 && (sim - 0.5).abs() <= 1e-3 && (closed - 0.5).abs() <= 1e-12;
    report(
        4,
        "zero-init flow closed form",
        pass,
        &format!("worst Frobenius gap {worst:.3e} over 5 systems x 10 times; scalar t=ln2 simulated {sim:.6}"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_truncation_bound() {
    let ss = SeedStream::new(5);
    let mut worst_slack = f64::INFINITY;
    let mut full_rank_zero = true;
    for i in 0..100u64 {
        let mut rng = ss.rng_at("case", i);
        let n = rng.random_range(2..11);
        let k = rng.random_range(1..n);
        let eps = rng.random_range(0.001..0.3);
        let lambdas = tailed_spectrum(&mut rng, n, k, eps);
        let (c, q) = psd(&mut rng, &lambdas);
        let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let u = random_orthogonal(&mut rng, n);
        let w = u.matmul(&Matrix::from_diag(&s)).matmul_t(&q);
        let t = truncation_error(&w, k, &c, eps).expect("truncation");
        worst_slack = worst_slack.min(t.bound - t.error);
        full_rank_zero &= truncation_error(&w, n, &c, eps).expect("full rank").error == 0.0;
    }
    let pass = worst_slack >= -1e-12 && full_rank_zero;
    report(
        5,
        "truncation error bound under alignment",
        pass,
        &format!("minimum slack {worst_slack:.3e} over 100 cases; full-rank error exactly 0: {full_rank_zero}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_sample_complexity_rate() {
    let mut rng = SeedStream::new(6).rng("system");
    let w = gaussian_matrix(&mut rng, 8, 8, 1.0);
    let (c, _) = psd(&mut rng, &[1.0, 0.8, 0.6, 0.4, 0.3, 0.2, 0.1, 0.05]);
    let grid: Vec<usize> = (0..7).map(|i| 64 << i).collect();
    let r = sample_complexity_curve(&w, 3, &c, &grid, 64, 6).expect("curve");
    let slope = r.slope.unwrap_or(f64::NAN);
    let pass = (-0.65..=-0.35).contains(&slope);
    report(6, "empirical truncation error rate", pass, &format!("log-log slope {slope:.4} over n=64..4096, 64 trials"));
    assert!(pass);
}

/// Rank at which each lens of each fc sublayer reaches 90%.
fn spectral_ranks(seed: u64) -> Vec<(usize, Sublayer, Option<usize>, Option<usize>)> {
    let tasks: Vec<TaskData> = (0..2)
        .map(|i| {
            let p = binary_task(&format!("t{i}"), 200, 10 + i, vec![modality("x", 64, 8, (4, 12))]);
            task_data(&p, 100, 1.0, seed * 10 + i).expect("task")
        })
        .collect();
    let cfg = TrainConfig {
        weight_decay: SPECTRAL_WEIGHT_DECAY,
        w_bal: SPECTRAL_BALANCE_WEIGHT,
        ..TrainConfig::default()
    };
    let (model, _) = pretrain_multitask(&tasks, SPECTRAL_EPOCHS, &ModelConfig::new(64, 5, 2), &cfg, seed).expect("pretraining");
    let sets: Vec<_> = tasks.iter().map(|t| (&t.eval, 0)).collect();
    model_spectra(&model, &sets, 0)
        .expect("spectra")
        .into_iter()
        .map(|r| (r.expert, r.sublayer, r.rank("data_aware", 0.9), r.rank("weight", 0.9)))
        .collect()
}

const SPECTRAL_EPOCHS: usize = 40;
const SPECTRAL_WEIGHT_DECAY: f64 = 0.04;
const SPECTRAL_BALANCE_WEIGHT: f64 = 0.3;

#[test]
fn criterion_07_spectral_saturation() {
    let r_star = 8;
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3u64).map(|seed| s.spawn(move || spectral_ranks(seed))).collect();
        handles.into_iter().map(|h| h.join().expect("seed thread")).collect()
    });
    let mut pass = true;
    let mut worst_da = 0;
    let mut min_w = usize::MAX;
    let mut conv = Vec::new();
    for ranks in &results {
        for &(e, sub, da, w) in ranks {
            if sub == Sublayer::Conv {
                conv.push(format!("e{e}:{}/{}", da.map_or("-".into(), |v| v.to_string()), w.map_or("-".into(), |v| v.to_string())));
                continue;
            }
            match (da, w) {
                (Some(da), Some(w)) => {
                    worst_da = worst_da.max(da);
                    min_w = min_w.min(w);
                    pass &= da <= 2 * r_star && w > 4 * r_star;
                }
                _ => pass = false,
            }
        }
    }
    report(
        7,
        "spectral saturation after pretraining",
        pass,
        &format!(
            "fc1/fc2 over 3 seeds: max data-aware rank@90 {worst_da} (<= {}), min weight-only rank@90 {min_w} (> {}); conv data/weight {}",
            2 * r_star,
            4 * r_star,
            conv.join(" ")
        ),
    );
    assert!(pass);
}

/// Max relative error between tape gradients and central differences for
/// every tensor in `store`.
fn gradient_gap(store: &ParamStore, f: &dyn Fn(&mut Ctx<'_>) -> Var) -> f64 {
    let eval = |s: &ParamStore| -> (f64, Gradients) {
        let mut ctx = Ctx::new(s);
        let out = f(&mut ctx);
        (ctx.tape.scalar(out), ctx.tape.backward(out).expect("backward"))
    };
    let (_, grads) = eval(store);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = grads
            .param(id)
            .unwrap_or_else(|| Matrix::zeros(store.value(id).rows(), store.value(id).cols()));
        let numeric = finite_difference(store.value(id), 1e-5, |m| {
            let mut s = store.clone();
            *s.value_mut(id) = m.clone();
            eval(&s).0
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Random linear read-out so every output entry carries gradient.
fn readout(ctx: &mut Ctx<'_>, v: Var, rng: &mut impl Rng) -> Var {
    let shape = ctx.value(v).shape();
    let r = ctx.constant(gaussian_matrix(rng, shape.0, shape.1, 1.0));
    let p = ctx.tape.hadamard(v, r);
    ctx.tape.sum(p)
}

fn family_gap(seed: u64, family: &str) -> f64 {
    let ss = SeedStream::new(8).child(family);
    let mut rng = ss.rng_at("point", seed);
    let mut store = ParamStore::default();
    let read_seed = ss.child("read").seed().wrapping_add(seed);
    let readout_rng = move || SeedStream::new(read_seed).rng("r");
    match family {
        "tap" => {
            let z = store.add("z", gaussian_matrix(&mut rng, 5, 4, 1.0));
            let q = store.add("q", gaussian_matrix(&mut rng, 1, 4, 1.0));
            gradient_gap(&store, &|ctx| {
                let (zv, qv) = (ctx.param(z), ctx.param(q));
                let out = tap_pool(ctx, zv, qv).expect("tap");
                readout(ctx, out, &mut readout_rng())
            })
        }
        "gating" => {
            let pooled = store.add("pooled", gaussian_matrix(&mut rng, 1, 4, 1.0));
            let head = RouterHead {
                modality: ModalityId::from("m"),
                stage: 0,
                w_gate: store.add("w_gate", gaussian_matrix(&mut rng, 4, 5, 1.0)),
                w_noise: store.add("w_noise", gaussian_matrix(&mut rng, 4, 5, 0.5)),
                query: store.add("query", Matrix::zeros(1, 4)),
            };
            let noise_seed = ss.child("noise").seed().wrapping_add(seed);
            gradient_gap(&store, &|ctx| {
                let p = ctx.param(pooled);
                let mut noise = SeedStream::new(noise_seed).rng("n");
                let g = noisy_topk_gate(ctx, p, &head, 2, Some(&mut noise)).expect("gate");
                let mut r = readout_rng();
                let a = readout(ctx, g.weights, &mut r);
                let b = readout(ctx, g.dense, &mut r);
                ctx.tape.add(a, b)
            })
        }
        "experts" => {
            let mut uid = 0;
            let mut next = || {
                uid += 1;
                uid
            };
            let mut e = Expert::new(0, 4, 6, 3, &mut next).expect("expert");
            for w in e.weights_mut() {
                let (r, c) = w.shape();
                w.attach_live(&mut store, 0, gaussian_matrix(&mut rng, r, c, 0.5)).expect("live");
            }
            for b in e.biases_mut() {
                let init = (0..b.len).map(|_| rng.random_range(-0.5..0.5)).collect();
                b.attach_live(&mut store, 0, init).expect("live");
            }
            let z = store.add("z", gaussian_matrix(&mut rng, 5, 4, 1.0));
            gradient_gap(&store, &|ctx| {
                let zv = ctx.param(z);
                let tr = expert_forward(ctx, &e, zv, 0).expect("expert");
                readout(ctx, tr.out, &mut readout_rng())
            })
        }
        "encoders" => {
            let mut uid = 0;
            let mut next = || {
                uid += 1;
                uid
            };
            let mut enc = Encoder::new(ModalityId::from("m"), 3, 4, 0, &mut next);
            for w in enc.weights_mut() {
                let (r, c) = w.shape();
                w.attach_live(&mut store, 0, gaussian_matrix(&mut rng, r, c, 0.5)).expect("live");
            }
            for b in enc.biases_mut() {
                let init = (0..b.len).map(|_| rng.random_range(-0.5..0.5)).collect();
                b.attach_live(&mut store, 0, init).expect("live");
            }
            let stamps: Vec<f64> = (0..5).map(f64::from).collect();
            let x = ModalitySequence::new(ModalityId::from("m"), gaussian_matrix(&mut rng, 5, 3, 1.0), stamps).expect("sequence");
            gradient_gap(&store, &|ctx| {
                let z = encode(ctx, &enc, &x, 0).expect("encode");
                readout(ctx, z, &mut readout_rng())
            })
        }
        "losses" => {
            let dense: Vec<ParamId> = (0..4)
                .map(|i| {
                    let raw = gaussian_matrix(&mut rng, 1, 5, 1.0).map(f64::exp);
                    let total = raw.sum();
                    store.add(format!("dense{i}"), raw.scale(1.0 / total))
                })
                .collect();
            let means: Vec<ParamId> = (0..3)
                .map(|i| store.add(format!("mean{i}"), gaussian_matrix(&mut rng, 1, 5, 0.3).map(|x| 0.2 + x.abs())))
                .collect();
            let bin = store.add("logit_bin", gaussian_matrix(&mut rng, 1, 1, 1.0));
            let multi = store.add("logit_multi", gaussian_matrix(&mut rng, 1, 4, 1.0));
            let ml = store.add("logit_ml", gaussian_matrix(&mut rng, 1, 3, 1.0));
            let beta = if seed.is_multiple_of(2) { 1.0 } else { -1.0 };
            gradient_gap(&store, &|ctx| {
                let d: Vec<Var> = dense.iter().map(|&id| ctx.param(id)).collect();
                let bal = balance_loss(ctx, &d).expect("balance");
                let m: Vec<Var> = means.iter().map(|&id| ctx.param(id)).collect();
                let div = divergence_loss(ctx, &m, beta);
                let b = ctx.param(bin);
                let l1 = task_loss(ctx, b, &Label::Binary(true), &Objective::Binary).expect("bce");
                let c = ctx.param(multi);
                let l2 = task_loss(ctx, c, &Label::Class(2), &Objective::Multiclass(4)).expect("ce");
                let a = ctx.param(ml);
                let l3 = task_loss(ctx, a, &Label::Multi(vec![true, false, true]), &Objective::Multilabel(3)).expect("multilabel");
                let s = ctx.tape.add(bal, div);
                let s = ctx.tape.add(s, l1);
                let s = ctx.tape.add(s, l2);
                ctx.tape.add(s, l3)
            })
        }
        other => unreachable!("{other}"),
    }
}

#[test]
fn criterion_08_gradient_soundness() {
    let families = ["tap", "gating", "experts", "encoders", "losses"];
    let mut parts = Vec::new();
    let mut pass = true;
    for fam in families {
        let worst = (0..10u64).map(|s| family_gap(s, fam)).fold(0.0, f64::max);
        pass &= worst <= 1e-4;
        parts.push(format!("{fam} {worst:.2e}"));
    }
    report(8, "gradient soundness", pass, &format!("worst relative error over 10 points: {}", parts.join(", ")));
    assert!(pass);
}

/// Independent per-stage count for FLAME from shapes alone.
struct Expected {
    slices: usize,
    gate: usize,
    router: usize,
    head: usize,
    bias_deltas: usize,
    new_encoders: usize,
}

fn flame_expected(cfg: &ModelConfig, rank: usize, old: &[(usize, bool)], new: &[usize], heads: usize) -> Expected {
    let (d, dh, n, k) = (cfg.d, cfg.hidden(), cfg.n_experts, cfg.kernel);
    let slice = |p: usize, q: usize| rank.min(p).min(q) * (p + q + 1);
    let experts = n * (slice(d, d * k) + slice(dh, d) + slice(d, dh));
    let enc_slices: usize = old.iter().map(|&(dm, _)| slice(d, dm) + 3 * slice(d, d)).sum();
    let m_t = old.len() + new.len();
    Expected {
        slices: experts + enc_slices,
        gate: m_t * d * n,
        router: m_t * (2 * d * n + d),
        head: heads * (d + 1),
        bias_deltas: n * (d + dh + d) + old.len() * (4 * d + 1),
        new_encoders: new.iter().map(|&dm| dm * d + 3 * d * d + 4 * d + 1).sum(),
    }
}

fn stored_growth(l: &StageLedger) -> usize {
    l.growth().total()
}

#[test]
fn criterion_09_parameter_accounting() {
    let cfg = toy_model();
    let stages = three_stage_stream(4, 2, 9);
    let run = |m: Method| run_stream(&stages, m, &cfg, &TrainConfig::default(), 9, |_, _| Ok(())).unwrap_or_else(|e| panic!("{}: {e}", m.name()));
    let flame = run(Method::Flame);
    let lora = run(Method::Lora);
    let ft = run(Method::SimpleFt);
    let ewc = run(Method::Ewc { lambda: 10.0 });

    // stage 1: M_1 = {s (existing), n (new)}; stage 2: M_2 = {n (existing)}
    let expected = [
        flame_expected(&cfg, 4, &[(6, true)], &[4], 1),
        flame_expected(&cfg, 4, &[(4, true)], &[], 1),
    ];
    let mut exact = true;
    let mut lines = Vec::new();
    for (t, e) in (1..=2).zip(&expected) {
        let l = &flame.ledgers[t];
        let formula = e.slices + e.gate + e.head + e.bias_deltas;
        let total = e.slices + e.router + e.head + e.bias_deltas + e.new_encoders;
        exact &= l.new_slice == e.slices
            && l.new_router_gate == e.gate
            && l.new_router == e.router
            && l.new_head == e.head
            && l.new_bias_delta == e.bias_deltas
            && l.new_encoder == e.new_encoders
            && stored_growth(l) == total;
        let lora_growth = stored_growth(&lora.ledgers[t]);
        lines.push(format!(
            "stage {t}: FLAME {} (slices+gate+head+bias {formula}, new encoder {}, router noise+query {}), LoRA {lora_growth}",
            stored_growth(l),
            e.new_encoders,
            e.router - e.gate
        ));
    }
    let below_lora = (1..=2).all(|t| stored_growth(&flame.ledgers[t]) < stored_growth(&lora.ledgers[t]));

    // Simple FT keeps one dense backbone and never adds slices or adapters;
    // EWC additionally stores a Fisher and an anchor copy of it.
    let backbone = |m: &flame_core::model::Model| {
        let c = m.param_counts();
        c.encoder + c.moe + c.router
    };
    let ft_dense = (1..=2).all(|t| ft.ledgers[t].new_slice == 0 && ft.ledgers[t].new_adapter == 0);
    let ewc_backbone = backbone(&ewc.model);
    let ewc_store: usize = ewc.ewc.as_ref().expect("memory").stored_scalars().values().sum();
    let full_backbone = ft_dense && ewc_store == 2 * ewc_backbone && backbone(&ft.model) == ewc_backbone;

    let pass = exact && below_lora && full_backbone;
    report(
        9,
        "parameter accounting",
        pass,
        &format!(
            "exact decomposition {exact}; FLAME < LoRA every stage {below_lora}; Simple FT/EWC full backbone {full_backbone} (EWC stores {ewc_store}, backbone {ewc_backbone}); {}",
            lines.join("; ")
        ),
    );
    assert!(pass);
}

/// Accuracy of the stage-0 task after stage 0 and after stage 1.
fn forgetting_pair(method: Method, seed: u64) -> (f64, f64) {
    let s = || vec![modality("s", 6, 3, (4, 8))];
    let t = |id: &str, label_seed: u64, data_seed: u64| task_data(&binary_task(id, 96, label_seed, s()), 256, 1.0, seed * 100 + data_seed).unwrap();
    let stages = vec![
        StageData {
            tasks: vec![t("old", 100 + seed, 1)],
            rank: 4,
            epochs: 60,
        },
        StageData {
            tasks: vec![t("new", 200 + seed, 2)],
            rank: 4,
            epochs: 60,
        },
    ];
    let run = run_stream(&stages, method, &ModelConfig::new(16, 5, 2), &TrainConfig::default(), seed, |_, _| Ok(())).expect("stream");
    let acc = |stage: usize| {
        run.rows
            .iter()
            .find(|r| r.stage == stage && r.task == "old")
            .expect("row")
            .metrics
            .accuracy
    };
    (acc(0), acc(1))
}

#[test]
fn criterion_10_forgetting_contrast() {
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3u64)
            .map(|seed| s.spawn(move || (forgetting_pair(Method::SimpleFt, seed), forgetting_pair(Method::Flame, seed))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("seed thread")).collect()
    });
    let ft_drops = results.iter().filter(|((a, b), _)| b < a).count();
    let flame_equal = results.iter().all(|(_, (a, b))| a == b);
    let pass = ft_drops == 3 && flame_equal;
    let detail: Vec<String> = results
        .iter()
        .map(|((fa, fb), (la, lb))| format!("FT {fa:.3}->{fb:.3}, FLAME {la:.3}->{lb:.3}"))
        .collect();
    report(
        10,
        "forgetting contrast",
        pass,
        &format!("Simple FT dropped in {ft_drops}/3 seeds, FLAME unchanged {flame_equal}; {}", detail.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_11_fingerprint_stability() {
    let stages = three_stage_stream(4, 3, 11);
    let old: Vec<&TaskData> = stages[0].tasks.iter().collect();
    let mut csvs = Vec::new();
    run_stream(&stages, Method::Flame, &ModelConfig::new(16, 5, 2), &TrainConfig::default(), 11, |model, _| {
        let rows = old
            .iter()
            .map(|td| {
                let cursor = model.task(td.id())?.cursor;
                Ok((td.id().clone(), routing_fingerprint(model, td.id(), &td.eval, cursor)?))
            })
            .collect::<flame_core::Result<Vec<_>>>()?;
        csvs.push(fingerprint_csv(&rows));
        Ok(())
    })
    .expect("stream");
    let pass = csvs.len() == 3 && csvs.iter().all(|c| c == &csvs[0]);
    report(
        11,
        "routing fingerprint stability",
        pass,
        &format!("{} stage snapshots of {} stage-0 tasks, textually identical: {pass}", csvs.len(), old.len()),
    );
    assert!(pass);
}
