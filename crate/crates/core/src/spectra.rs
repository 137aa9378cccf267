//! Spectral diagnostics for expert sublayers: routed-input covariances,
//! weight-only and data-aware energy spectra, the effective-rank tail bound,
//! zero-initialised gradient-flow alignment, truncation error and its
//! finite-sample estimate.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::experts::{moe_forward, Expert};
use crate::flexdata::Dataset;
use crate::model::Model;
use crate::numerics::rng::normal;
use crate::numerics::{op_norm, svd, sym_eig, truncated_svd, EigenFactors, Matrix, SeedStream};
use crate::params::Ctx;
use crate::report::{num, opt};

/// Fraction thresholds reported in summaries.
pub const RANK_THRESHOLDS: [f64; 2] = [0.90, 0.99];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Sublayer {
    Conv,
    Fc1,
    Fc2,
}

impl Sublayer {
    pub const ALL: [Sublayer; 3] = [Sublayer::Conv, Sublayer::Fc1, Sublayer::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            Sublayer::Conv => "conv",
            Sublayer::Fc1 => "fc1",
            Sublayer::Fc2 => "fc2",
        }
    }

    pub fn weight(self, e: &Expert) -> &crate::experts::StackableWeight {
        match self {
            Sublayer::Conv => &e.conv,
            Sublayer::Fc1 => &e.fc1,
            Sublayer::Fc2 => &e.fc2,
        }
    }
}

/// Running `Σ zzᵀ` and token count.
#[derive(Clone, Debug)]
struct Moment {
    sum: Matrix,
    count: usize,
}

impl Moment {
    fn add(slot: &mut Option<Moment>, x: &Matrix) {
        let g = x.t_matmul(x);
        match slot {
            Some(m) => {
                m.sum.add_assign(&g);
                m.count += x.rows();
            }
            None => {
                *slot = Some(Moment {
                    sum: g,
                    count: x.rows(),
                })
            }
        }
    }

    fn covariance(&self) -> Matrix {
        let c = self.sum.scale(1.0 / self.count as f64);
        c.add(&c.transpose()).scale(0.5)
    }
}

/// Second-moment matrices of the tokens each expert actually receives: at
/// the expert input and at the immediate input of each sublayer.
#[derive(Clone, Debug, Default)]
pub struct RoutedCovariances {
    /// `d × d`, over encoder tokens dispatched to the expert.
    pub input: Option<Matrix>,
    /// Indexed like [`Sublayer::ALL`].
    pub sublayers: [Option<Matrix>; 3],
    pub tokens: usize,
}

/// Routed covariances for every expert, pooled over `(dataset, cursor)`
/// sets. Gates run without noise. `None` entries mean the expert was never
/// selected.
pub fn routed_covariances(model: &Model, sets: &[(&Dataset, usize)]) -> Result<Vec<RoutedCovariances>> {
    let n = model.experts.len();
    let mut acc: Vec<[Option<Moment>; 4]> = (0..n).map(|_| Default::default()).collect();
    let mut seen = false;
    for (data, tau) in sets {
        for sample in &data.samples {
            seen = true;
            let mut ctx = Ctx::new(&model.store);
            let out = moe_forward::<ChaCha8Rng>(&mut ctx, model, sample, &data.task, *tau, None)?;
            for tr in out.modalities.values() {
                for (i, et) in &tr.experts {
                    let slots = &mut acc[*i];
                    Moment::add(&mut slots[0], ctx.value(tr.embedding));
                    Moment::add(&mut slots[1], ctx.value(et.conv_in));
                    Moment::add(&mut slots[2], ctx.value(et.fc1_in));
                    Moment::add(&mut slots[3], ctx.value(et.fc2_in));
                }
            }
        }
    }
    if !seen {
        return Err(Error::Precondition("routed covariance needs at least one sample".into()));
    }
    Ok(acc
        .into_iter()
        .map(|[a, b, c, d]| RoutedCovariances {
            tokens: a.as_ref().map_or(0, |m| m.count),
            input: a.map(|m| m.covariance()),
            sublayers: [b.map(|m| m.covariance()), c.map(|m| m.covariance()), d.map(|m| m.covariance())],
        })
        .collect())
}

/// `C_i` at the expert input for one expert; `None` when never dispatched.
pub fn routed_covariance(model: &Model, data: &Dataset, expert: usize, cursor: usize) -> Result<Option<Matrix>> {
    if expert >= model.experts.len() {
        return Err(Error::Precondition(format!("expert {expert} out of range")));
    }
    Ok(routed_covariances(model, &[(data, cursor)])?.swap_remove(expert).input)
}

/// Both decompositions of `E = tr(WCWᵀ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergySpectrum {
    /// Eigenvalues of `C`, nonincreasing.
    pub input: Vec<f64>,
    /// `σ_k²`, nonincreasing.
    pub weight: Vec<f64>,
    /// `σ_k² v_kᵀ C v_k` in SVD order.
    pub data_aware: Vec<f64>,
    /// `‖W q_j‖² λ_j` in eigen order.
    pub eigen_terms: Vec<f64>,
    pub total: f64,
}

fn check_pair(w: &Matrix, c: &Matrix) -> Result<()> {
    if c.rows() != c.cols() || w.cols() != c.rows() {
        return Err(Error::Precondition(format!(
            "shape mismatch: W is {}x{}, C is {}x{}",
            w.rows(),
            w.cols(),
            c.rows(),
            c.cols()
        )));
    }
    Ok(())
}

fn quad(c: &Matrix, v: &[f64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        let mut r = 0.0;
        for j in 0..n {
            r += c[(i, j)] * v[j];
        }
        s += v[i] * r;
    }
    s
}

fn close_rel(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-300
}

/// `tr(WCWᵀ)` computed directly.
pub fn data_energy(w: &Matrix, c: &Matrix) -> Result<f64> {
    check_pair(w, c)?;
    Ok(w.matmul(c).hadamard(w).sum())
}

pub fn energy_spectrum(w: &Matrix, c: &Matrix) -> Result<EnergySpectrum> {
    check_pair(w, c)?;
    let f = svd(w)?;
    let eig = sym_eig(c)?;
    let weight: Vec<f64> = f.sigma.iter().map(|s| s * s).collect();
    let data_aware: Vec<f64> = (0..f.rank()).map(|k| weight[k] * quad(c, f.vt.row(k))).collect();
    let wq = w.matmul(&eig.vectors);
    let eigen_terms: Vec<f64> = (0..eig.values.len())
        .map(|j| {
            let col = wq.column(j);
            eig.values[j] * col.iter().map(|x| x * x).sum::<f64>()
        })
        .collect();
    let e_svd: f64 = data_aware.iter().sum();
    let e_eig: f64 = eigen_terms.iter().sum();
    let direct = data_energy(w, c)?;
    let scale = 1e-12 * w.frobenius_sq() * c.max_abs();
    for (name, v) in [("SVD-basis", e_svd), ("eigenbasis", e_eig)] {
        if !close_rel(v, direct, 1e-6) && (v - direct).abs() > scale {
            return Err(Error::Invariant(format!("{name} energy {v} disagrees with tr(WCWᵀ) = {direct}")));
        }
    }
    Ok(EnergySpectrum {
        input: eig.values,
        weight,
        data_aware,
        eigen_terms,
        total: direct,
    })
}

/// Energies sorted nonincreasing (the top-K ordering used for curves).
pub fn sorted_desc(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Cumulative fractions of `energies` in the given order; `None` when the
/// total is not positive.
pub fn cumulative_fractions(energies: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = energies.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let mut acc = 0.0;
    let mut out: Vec<f64> = energies
        .iter()
        .map(|e| {
            acc += e;
            (acc / total).clamp(0.0, 1.0)
        })
        .collect();
    for i in 1..out.len() {
        if out[i] < out[i - 1] {
            out[i] = out[i - 1];
        }
    }
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    Some(out)
}

/// Smallest rank (1-based) whose top-K cumulative fraction reaches `q`.
pub fn rank_at(energies: &[f64], q: f64) -> Option<usize> {
    let cum = cumulative_fractions(&sorted_desc(energies))?;
    cum.iter().position(|&f| f >= q - 1e-12).map(|i| i + 1)
}

/// Checks `Σ_{j>r*} λ_j ≤ ε tr(C)` and returns `ε‖W‖²_op tr(C) − Σ_{j>r*} λ_j‖Wq_j‖²`.
pub fn tail_bound_check(w: &Matrix, c: &Matrix, r_star: usize, epsilon: f64) -> Result<f64> {
    check_pair(w, c)?;
    let eig = sym_eig(c)?;
    tail_bound_with(w, c, &eig, r_star, epsilon)
}

fn tail_bound_with(w: &Matrix, c: &Matrix, eig: &EigenFactors, r_star: usize, epsilon: f64) -> Result<f64> {
    let tr = c.trace();
    let tail: f64 = eig.values.iter().skip(r_star).sum();
    if tail > epsilon * tr * (1.0 + 1e-12) + 1e-300 {
        return Err(Error::HypothesisFailed(format!(
            "covariance tail {tail} beyond rank {r_star} exceeds {epsilon}·tr(C) = {}",
            epsilon * tr
        )));
    }
    let wq = w.matmul(&eig.vectors);
    let lhs: f64 = (r_star..eig.values.len())
        .map(|j| eig.values[j] * wq.column(j).iter().map(|x| x * x).sum::<f64>())
        .sum();
    let op = op_norm(w)?;
    Ok(epsilon * op * op * tr - lhs)
}

/// Ratio `‖W‖²_op tr(C) / tr(WCWᵀ)`.
pub fn kappa_misalignment(w: &Matrix, c: &Matrix) -> Result<f64> {
    let e = data_energy(w, c)?;
    if e <= 0.0 {
        return Err(Error::Undefined("data energy is zero, misalignment ratio undefined".into()));
    }
    let op = op_norm(w)?;
    Ok(op * op * c.trace() / e)
}

/// `W*(I − e^{−Ct})` with the exponential taken in C's eigenbasis.
pub fn flow_closed_form(w_star: &Matrix, c: &Matrix, t: f64) -> Result<Matrix> {
    check_pair(w_star, c)?;
    let eig = sym_eig(c)?;
    Ok(closed_form_with(w_star, &eig, t))
}

fn closed_form_with(w_star: &Matrix, eig: &EigenFactors, t: f64) -> Matrix {
    let n = eig.values.len();
    let mut q = eig.vectors.clone();
    for r in 0..n {
        for j in 0..n {
            q[(r, j)] *= 1.0 - (-eig.values[j] * t).exp();
        }
    }
    w_star.matmul(&q.matmul_t(&eig.vectors))
}

/// Simulated zero-initialised flow compared with the closed form.
#[derive(Clone, Debug)]
pub struct FlowCurve {
    pub times: Vec<f64>,
    /// `‖W_sim(t) − W*(I − e^{−Ct})‖_F`.
    pub errors: Vec<f64>,
    pub snapshots: Vec<Matrix>,
    /// Worst per-direction projector distance between the right singular
    /// vectors of the last snapshot and C's eigenvectors; set only when
    /// `W*ᵀW*` commutes with `C`.
    pub alignment: Option<f64>,
}

/// Explicit-Euler gradient descent on `½ tr((W*−W)C(W*−W)ᵀ)` from `W = 0`,
/// sampled at nondecreasing `times`.
pub fn alignment_flow(w_star: &Matrix, c: &Matrix, times: &[f64], eta: f64) -> Result<FlowCurve> {
    check_pair(w_star, c)?;
    let eig = sym_eig(c)?;
    let l1 = eig.values.first().copied().unwrap_or(0.0);
    if eta.is_nan() || eta <= 0.0 || eta * l1 >= 1.0 {
        return Err(Error::Precondition(format!("step size {eta} must satisfy 0 < η < 1/λ₁ = {}", 1.0 / l1)));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) || times.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::Precondition("times must be finite, nonnegative and nondecreasing".into()));
    }
    let step = |w: &mut Matrix, h: f64| {
        let g = w_star.sub(w).matmul(c);
        w.axpy(h, &g);
    };
    let mut w = Matrix::zeros(w_star.rows(), w_star.cols());
    let mut now_steps = 0usize;
    let mut errors = Vec::with_capacity(times.len());
    let mut snapshots = Vec::with_capacity(times.len());
    for &t in times {
        let target = (t / eta + 1e-9).floor() as usize;
        while now_steps < target {
            step(&mut w, eta);
            now_steps += 1;
        }
        let mut snap = w.clone();
        let rem = t - now_steps as f64 * eta;
        if rem > 1e-15 {
            step(&mut snap, rem);
        }
        errors.push(snap.sub(&closed_form_with(w_star, &eig, t)).frobenius());
        snapshots.push(snap);
    }
    let g = w_star.t_matmul(w_star);
    let comm = g.matmul(c).sub(&c.matmul(&g)).max_abs();
    let commuting = comm <= 1e-10 * (1.0 + g.max_abs() * c.max_abs());
    let alignment = match snapshots.last() {
        Some(last) if commuting => Some(eigen_alignment(last, &eig)?),
        _ => None,
    };
    Ok(FlowCurve {
        times: times.to_vec(),
        errors,
        snapshots,
        alignment,
    })
}

/// Largest `‖v_k v_kᵀ − q q ᵀ‖_F` over the right singular vectors of `w`
/// with nonnegligible singular value, matching each to its closest
/// eigenvector of C. Assumes C has distinct eigenvalues.
pub fn eigen_alignment(w: &Matrix, eig: &EigenFactors) -> Result<f64> {
    let f = svd(w)?;
    let top = f.sigma.first().copied().unwrap_or(0.0);
    let mut worst: f64 = 0.0;
    for k in 0..f.rank() {
        if f.sigma[k] <= 1e-8 * top {
            continue;
        }
        let v = f.vt.row(k);
        let best = (0..eig.values.len())
            .map(|j| {
                let q = eig.vector(j);
                let d: f64 = v.iter().zip(&q).map(|(a, b)| a * b).sum();
                d * d
            })
            .fold(0.0, f64::max);
        worst = worst.max((2.0 * (1.0 - best.min(1.0))).sqrt());
    }
    Ok(worst)
}

/// `‖(W − W*) Q_J‖²_F` on the span of C's top-`j` eigenvectors, with the
/// decay envelope `e^{−2λ_J t}‖W*‖²_F`.
pub fn top_subspace_error(w: &Matrix, w_star: &Matrix, c: &Matrix, j: usize, t: f64) -> Result<(f64, f64)> {
    check_pair(w_star, c)?;
    let eig = sym_eig(c)?;
    if j == 0 || j > eig.values.len() {
        return Err(Error::Precondition(format!("subspace size {j} out of range")));
    }
    let q = eig.vectors.columns(0, j);
    let err = w.sub(w_star).matmul(&q).frobenius_sq();
    let envelope = (-2.0 * eig.values[j - 1] * t).exp() * w_star.frobenius_sq();
    Ok((err, envelope))
}

/// Functional truncation error against its effective-rank bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truncation {
    /// `tr((W − W^(K)) C (W − W^(K))ᵀ)`
    pub error: f64,
    /// `ε‖W‖²_op tr(C)`
    pub bound: f64,
}

pub fn truncation_error(w: &Matrix, k_rank: usize, c: &Matrix, epsilon: f64) -> Result<Truncation> {
    check_pair(w, c)?;
    let op = op_norm(w)?;
    // Keeping every singular triplet discards nothing.
    let error = if k_rank >= w.rows().min(w.cols()) {
        0.0
    } else {
        data_energy(&w.sub(&truncated_svd(w, k_rank)?.expand()), c)?
    };
    Ok(Truncation {
        error,
        bound: epsilon * op * op * c.trace(),
    })
}

/// Monte-Carlo convergence of the empirical truncation error.
#[derive(Clone, Debug)]
pub struct SampleComplexity {
    pub n_grid: Vec<usize>,
    /// Population value `T = tr(W_tail C W_tailᵀ)`.
    pub population: f64,
    /// `|T̂_n − T|` per grid point and trial.
    pub errors: Vec<Vec<f64>>,
    pub mean_errors: Vec<f64>,
    /// Least-squares slope of log mean error against log n; `None` in the
    /// trivial case.
    pub slope: Option<f64>,
    /// Set when `T = 0` and every estimate is exactly zero.
    pub trivial: bool,
}

/// Draws Gaussian tokens with covariance `c` and measures how fast the
/// empirical tail energy of `W − W^(K)` converges.
pub fn sample_complexity_curve(
    w: &Matrix,
    k_rank: usize,
    c: &Matrix,
    n_grid: &[usize],
    trials: usize,
    seed: u64,
) -> Result<SampleComplexity> {
    check_pair(w, c)?;
    if n_grid.is_empty() || n_grid.contains(&0) || trials == 0 {
        return Err(Error::Precondition("sample grid and trial count must be positive".into()));
    }
    let tail = w.sub(&truncated_svd(w, k_rank)?.expand());
    let eig = sym_eig(c)?;
    let d = c.rows();
    let mut root = eig.vectors.clone();
    for r in 0..d {
        for j in 0..d {
            root[(r, j)] *= eig.values[j].max(0.0).sqrt();
        }
    }
    // z = Q Λ^{1/2} g, so W_tail z = M g with M = W_tail Q Λ^{1/2}.
    let m = tail.matmul(&root);
    let population = data_energy(&tail, c)?;
    let trivial = m.max_abs() == 0.0;
    let ss = SeedStream::new(seed).child("sample-complexity");
    let mut errors = Vec::with_capacity(n_grid.len());
    for (gi, &n) in n_grid.iter().enumerate() {
        let mut per = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut rng = ss.rng_at(&format!("n{gi}"), trial as u64);
            let mut acc = 0.0;
            let mut g = vec![0.0; d];
            for _ in 0..n {
                for x in g.iter_mut() {
                    *x = normal(&mut rng);
                }
                for r in 0..m.rows() {
                    let y: f64 = m.row(r).iter().zip(&g).map(|(a, b)| a * b).sum();
                    acc += y * y;
                }
            }
            per.push((acc / n as f64 - population).abs());
        }
        errors.push(per);
    }
    let mean_errors: Vec<f64> = errors.iter().map(|e| e.iter().sum::<f64>() / e.len() as f64).collect();
    let slope = if trivial || n_grid.len() < 2 {
        None
    } else {
        let xs: Vec<f64> = n_grid.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = mean_errors.iter().map(|e| e.ln()).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        Some(sxy / sxx)
    };
    Ok(SampleComplexity {
        n_grid: n_grid.to_vec(),
        population,
        errors,
        mean_errors,
        slope,
        trivial,
    })
}

/// Spectral summary of one expert sublayer at one cursor.
#[derive(Clone, Debug)]
pub struct SpectralReport {
    pub expert: usize,
    pub sublayer: Sublayer,
    /// `None` when the expert was never dispatched.
    pub spectrum: Option<EnergySpectrum>,
    /// Effective rank taken as the input spectrum's 90% rank.
    pub r_star: Option<usize>,
    pub tail_margin: Option<f64>,
    pub kappa: Option<f64>,
}

impl SpectralReport {
    pub fn lenses(&self) -> Option<[(&'static str, Vec<f64>); 3]> {
        self.spectrum.as_ref().map(|s| {
            [
                ("input", s.input.clone()),
                ("weight", s.weight.clone()),
                ("data_aware", sorted_desc(&s.data_aware)),
            ]
        })
    }

    pub fn rank(&self, lens: &str, q: f64) -> Option<usize> {
        let lenses = self.lenses()?;
        let (_, e) = lenses.iter().find(|(n, _)| *n == lens)?;
        rank_at(e, q)
    }
}

/// Tail-bound tolerance used in reports: the effective rank is the input
/// spectrum's 90% rank, so ε = 0.1 always satisfies the hypothesis.
const REPORT_EPSILON: f64 = 0.1;

pub fn model_spectra(model: &Model, sets: &[(&Dataset, usize)], cursor: usize) -> Result<Vec<SpectralReport>> {
    let covs = routed_covariances(model, sets)?;
    let mut out = Vec::new();
    for (i, (e, cov)) in model.experts.iter().zip(&covs).enumerate() {
        for (s, sub) in Sublayer::ALL.iter().enumerate() {
            let report = match &cov.sublayers[s] {
                None => SpectralReport {
                    expert: i,
                    sublayer: *sub,
                    spectrum: None,
                    r_star: None,
                    tail_margin: None,
                    kappa: None,
                },
                Some(c) => {
                    let w = sub.weight(e).effective(&model.store, cursor)?;
                    let spec = energy_spectrum(&w, c)?;
                    let r_star = rank_at(&spec.input, 1.0 - REPORT_EPSILON);
                    let tail_margin = match r_star {
                        Some(r) => Some(tail_bound_check(&w, c, r, REPORT_EPSILON)?),
                        None => Some(tail_bound_check(&w, c, 0, REPORT_EPSILON).unwrap_or(0.0)),
                    };
                    let kappa = match kappa_misalignment(&w, c) {
                        Ok(k) => Some(k),
                        Err(Error::Undefined(_)) => None,
                        Err(e) => return Err(e),
                    };
                    SpectralReport {
                        expert: i,
                        sublayer: *sub,
                        spectrum: Some(spec),
                        r_star,
                        tail_margin,
                        kappa,
                    }
                }
            };
            out.push(report);
        }
    }
    Ok(out)
}

pub const SPECTRA_HEADER: &str = "expert,sublayer,lens,rank,energy,cumulative_fraction,rank90,rank99,tail_margin,kappa,status";

/// Per-rank rows for each lens (top-K order), then one summary row per
/// lens. Undefined fractions and ranks are left empty and marked in the
/// status column.
pub fn spectra_csv(reports: &[SpectralReport]) -> String {
    let mut out = String::from(SPECTRA_HEADER);
    out.push('\n');
    let usize_opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in reports {
        let sub = r.sublayer.name();
        let Some(lenses) = r.lenses() else {
            let _ = writeln!(out, "{},{sub},summary,,,,,,,,empty_dispatch", r.expert);
            continue;
        };
        for (lens, energies) in &lenses {
            let cum = cumulative_fractions(energies);
            let status = if cum.is_some() { "ok" } else { "zero_energy" };
            for (k, e) in energies.iter().enumerate() {
                let f = cum.as_ref().map(|c| c[k]);
                let _ = writeln!(out, "{},{sub},{lens},{},{},{},,,,,{status}", r.expert, k + 1, num(*e), opt(f));
            }
        }
        for (lens, energies) in &lenses {
            let status = if cumulative_fractions(energies).is_some() { "ok" } else { "zero_energy" };
            let (margin, kappa) = if *lens == "data_aware" { (r.tail_margin, r.kappa) } else { (None, None) };
            let _ = writeln!(
                out,
                "{},{sub},{lens},,,,{},{},{},{},{status}",
                r.expert,
                usize_opt(rank_at(energies, RANK_THRESHOLDS[0])),
                usize_opt(rank_at(energies, RANK_THRESHOLDS[1])),
                opt(margin),
                opt(kappa)
            );
        }
    }
    out
}
