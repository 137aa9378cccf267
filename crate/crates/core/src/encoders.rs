//! Per-modality encoders: linear projection, scaled sinusoidal position
//! code, and one residual self-attention layer whose projections are
//! stackable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::stack::{StackableBias, StackableWeight};
use crate::flexdata::{ModalityId, ModalitySequence};
use crate::numerics::{Matrix, Var};
use crate::params::Ctx;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub modality: ModalityId,
    pub input_dim: usize,
    pub d: usize,
    /// `d × d_m`
    pub proj: StackableWeight,
    pub proj_bias: StackableBias,
    pub wq: StackableWeight,
    pub wk: StackableWeight,
    pub wv: StackableWeight,
    pub bq: StackableBias,
    pub bk: StackableBias,
    pub bv: StackableBias,
    /// Scalar multiplying the sinusoidal code (length-1 ledger).
    pub pos: StackableBias,
}

/// Standard sinusoidal code: even columns `sin(t/10000^(2i/d))`, odd columns cosine.
pub fn sinusoidal(len: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(len, d);
    for t in 0..len {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
            pe[(t, j)] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl Encoder {
    /// Builds an encoder with empty ledgers; `uid` supplies unique ids.
    pub fn new(modality: ModalityId, input_dim: usize, d: usize, origin: usize, uid: &mut impl FnMut() -> usize) -> Self {
        let n = |s: &str| format!("enc.{modality}.{s}");
        Encoder {
            proj: StackableWeight::new(uid(), n("proj"), d, input_dim, origin),
            proj_bias: StackableBias::new(uid(), n("proj_bias"), d, origin),
            wq: StackableWeight::new(uid(), n("wq"), d, d, origin),
            wk: StackableWeight::new(uid(), n("wk"), d, d, origin),
            wv: StackableWeight::new(uid(), n("wv"), d, d, origin),
            bq: StackableBias::new(uid(), n("bq"), d, origin),
            bk: StackableBias::new(uid(), n("bk"), d, origin),
            bv: StackableBias::new(uid(), n("bv"), d, origin),
            pos: StackableBias::new(uid(), n("pos"), 1, origin),
            modality,
            input_dim,
            d,
        }
    }

    pub fn weights(&self) -> [&StackableWeight; 4] {
        [&self.proj, &self.wq, &self.wk, &self.wv]
    }

    pub fn weights_mut(&mut self) -> [&mut StackableWeight; 4] {
        [&mut self.proj, &mut self.wq, &mut self.wk, &mut self.wv]
    }

    pub fn biases(&self) -> [&StackableBias; 5] {
        [&self.proj_bias, &self.bq, &self.bk, &self.bv, &self.pos]
    }

    pub fn biases_mut(&mut self) -> [&mut StackableBias; 5] {
        [&mut self.proj_bias, &mut self.bq, &mut self.bk, &mut self.bv, &mut self.pos]
    }

    pub fn stored_scalars(&self) -> usize {
        self.weights().iter().map(|w| w.stored_scalars()).sum::<usize>()
            + self.biases().iter().map(|b| b.stored_scalars()).sum::<usize>()
    }
}

/// `z = h + softmax(Q Kᵀ/√d) V` with `h = x Pᵀ + b + s·PE`.
pub fn encode(ctx: &mut Ctx<'_>, enc: &Encoder, x: &ModalitySequence, tau: usize) -> Result<Var> {
    if !x.present {
        return Err(Error::Contract(format!("modality {} is absent", x.modality)));
    }
    if x.values.cols() != enc.input_dim {
        return Err(Error::Precondition(format!(
            "modality {}: input dim {} != encoder dim {}",
            x.modality,
            x.values.cols(),
            enc.input_dim
        )));
    }
    let len = x.values.rows();
    let xv = ctx.constant(x.values.clone());
    let p = enc.proj.bind(ctx, tau)?;
    let pb = enc.proj_bias.bind(ctx, tau)?;
    let s = enc.pos.bind(ctx, tau)?;
    let pe = ctx.constant(sinusoidal(len, enc.d));
    let t = &mut ctx.tape;
    let h = t.matmul_t(xv, p);
    let h = t.add_row(h, pb);
    let pe = t.scale_by(pe, s);
    let h = t.add(h, pe);

    let project = |ctx: &mut Ctx<'_>, w: &StackableWeight, b: &StackableBias| -> Result<Var> {
        let w = w.bind(ctx, tau)?;
        let b = b.bind(ctx, tau)?;
        let y = ctx.tape.matmul_t(h, w);
        Ok(ctx.tape.add_row(y, b))
    };
    let q = project(ctx, &enc.wq, &enc.bq)?;
    let k = project(ctx, &enc.wk, &enc.bk)?;
    let v = project(ctx, &enc.wv, &enc.bv)?;
    let t = &mut ctx.tape;
    let scores = t.matmul_t(q, k);
    let scores = t.scale(scores, 1.0 / (enc.d as f64).sqrt());
    let attn = t.softmax_rows(scores);
    let mixed = t.matmul(attn, v);
    Ok(t.add(h, mixed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::gaussian_matrix;
    use crate::numerics::tape::{finite_difference, relative_error};
    use crate::numerics::SeedStream;
    use crate::params::ParamStore;

    fn build(d: usize, dm: usize, seed: u64, store: &mut ParamStore, zero: bool) -> Encoder {
        let mut next = 0;
        let mut uid = || {
            next += 1;
            next
        };
        let mut enc = Encoder::new("m".into(), dm, d, 0, &mut uid);
        let mut rng = SeedStream::new(seed).rng("enc");
        let std = if zero { 0.0 } else { 0.7 };
        for w in enc.weights_mut() {
            let (r, c) = w.shape();
            w.attach_live(store, 0, gaussian_matrix(&mut rng, r, c, std)).unwrap();
        }
        for b in enc.biases_mut() {
            let v = gaussian_matrix(&mut rng, 1, b.len, std).as_slice().to_vec();
            b.attach_live(store, 0, v).unwrap();
        }
        enc
    }

    fn seq(values: Matrix) -> ModalitySequence {
        let ts = (0..values.rows()).map(|t| t as f64).collect();
        ModalitySequence::new("m".into(), values, ts).unwrap()
    }

    fn eval(enc: &Encoder, store: &ParamStore, x: &ModalitySequence) -> Matrix {
        let mut ctx = Ctx::new(store);
        let z = encode(&mut ctx, enc, x, 0).unwrap();
        ctx.value(z).clone()
    }

    #[test]
    fn single_step_is_projection_plus_value() {
        let mut store = ParamStore::default();
        let enc = build(3, 2, 5, &mut store, false);
        let x = seq(Matrix::from_rows(&[vec![0.3, -1.2]]));
        let z = eval(&enc, &store, &x);
        let w = |sw: &StackableWeight| sw.effective(&store, 0).unwrap();
        let b = |sb: &StackableBias| sb.effective(&store, 0).unwrap();
        let pe = sinusoidal(1, 3);
        let h = x.values.matmul_t(&w(&enc.proj)).add(&b(&enc.proj_bias)).add(&pe.scale(b(&enc.pos).item()));
        let v = h.matmul_t(&w(&enc.wv)).add(&b(&enc.bv));
        assert!(z.max_abs_diff(&h.add(&v)) < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut store = ParamStore::default();
        let enc = build(4, 3, 1, &mut store, true);
        let z = eval(&enc, &store, &seq(Matrix::filled(5, 3, 2.0)));
        assert_eq!(z.shape(), (5, 4));
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn matches_entrywise_attention() {
        let (d, dm, len) = (4, 2, 3);
        let mut store = ParamStore::default();
        let enc = build(d, dm, 11, &mut store, false);
        let mut rng = SeedStream::new(2).rng("x");
        let x = seq(gaussian_matrix(&mut rng, len, dm, 1.0));
        let z = eval(&enc, &store, &x);

        let w = |sw: &StackableWeight| sw.effective(&store, 0).unwrap();
        let b = |sb: &StackableBias| sb.effective(&store, 0).unwrap().as_slice().to_vec();
        let (p, wq, wk, wv) = (w(&enc.proj), w(&enc.wq), w(&enc.wk), w(&enc.wv));
        let (pb, bq, bk, bv, s) = (b(&enc.proj_bias), b(&enc.bq), b(&enc.bk), b(&enc.bv), b(&enc.pos)[0]);
        let mut h = vec![vec![0.0; d]; len];
        for (t, ht) in h.iter_mut().enumerate() {
            for i in 0..d {
                let mut acc = pb[i];
                for j in 0..dm {
                    acc += p[(i, j)] * x.values[(t, j)];
                }
                let k = (i / 2) as f64;
                let ang = t as f64 / 10000f64.powf(2.0 * k / d as f64);
                acc += s * if i % 2 == 0 { ang.sin() } else { ang.cos() };
                ht[i] = acc;
            }
        }
        let lin = |m: &Matrix, bias: &[f64], t: usize| -> Vec<f64> {
            (0..d).map(|i| bias[i] + (0..d).map(|j| m[(i, j)] * h[t][j]).sum::<f64>()).collect()
        };
        for t in 0..len {
            let q = lin(&wq, &bq, t);
            let scores: Vec<f64> = (0..len)
                .map(|u| {
                    let k = lin(&wk, &bk, u);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let tot: f64 = e.iter().sum();
            for i in 0..d {
                let mixed: f64 = (0..len).map(|u| e[u] / tot * lin(&wv, &bv, u)[i]).sum();
                assert!((z[(t, i)] - (h[t][i] + mixed)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn absent_modality_is_contract_violation() {
        let mut store = ParamStore::default();
        let enc = build(2, 2, 1, &mut store, false);
        let mut ctx = Ctx::new(&store);
        let x = ModalitySequence::absent("m".into(), 2);
        assert!(matches!(encode(&mut ctx, &enc, &x, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn length_preserved() {
        let mut store = ParamStore::default();
        let enc = build(3, 2, 4, &mut store, false);
        for len in [1, 2, 7, 31] {
            let z = eval(&enc, &store, &seq(Matrix::filled(len, 2, 0.1)));
            assert_eq!(z.rows(), len);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::default();
        let enc = build(3, 2, 9, &mut store, false);
        let mut rng = SeedStream::new(3).rng("x");
        let x = seq(gaussian_matrix(&mut rng, 4, 2, 1.0));
        let loss_of = |store: &ParamStore| -> (f64, crate::numerics::Gradients) {
            let mut ctx = Ctx::new(store);
            let z = encode(&mut ctx, &enc, &x, 0).unwrap();
            let sq = ctx.tape.hadamard(z, z);
            let l = ctx.tape.sum(sq);
            (ctx.tape.scalar(l), ctx.tape.backward(l).unwrap())
        };
        let (_, grads) = loss_of(&store);
        for (id, _) in store.clone().iter() {
            let analytic = grads.param(id).unwrap();
            let x0 = store.value(id).clone();
            let numeric = finite_difference(&x0, 1e-6, |m| {
                let mut s = store.clone();
                *s.value_mut(id) = m.clone();
                loss_of(&s).0
            });
            assert!(relative_error(&analytic, &numeric) < 1e-6, "param {id:?}");
        }
    }
}
