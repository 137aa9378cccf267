//! Dense decompositions: one-sided Jacobi SVD and cyclic Jacobi symmetric
//! eigendecomposition. Both are accurate to near machine precision for the
//! small matrices (d ≤ 256) this engine works with.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin SVD factors `u · diag(sigma) · vt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Multiplies the factors back out.
    pub fn expand(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.sigma.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul(&self.vt)
    }

    /// Keeps the leading `r` triplets.
    pub fn truncate(&self, r: usize) -> SvdFactors {
        let r = r.min(self.rank());
        SvdFactors {
            u: self.u.columns(0, r),
            sigma: self.sigma[..r].to_vec(),
            vt: self.vt.row_range(0, r),
        }
    }

    /// Scalars needed to store the factored form.
    pub fn stored_scalars(&self) -> usize {
        self.rank() * (self.u.rows() + self.vt.cols() + 1)
    }
}

/// Eigenpairs of a symmetric matrix, values nonincreasing, vectors as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenFactors {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigenFactors {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.vectors.column(j)
    }

    pub fn reconstruct(&self) -> Matrix {
        let n = self.values.len();
        let mut ql = self.vectors.clone();
        for r in 0..n {
            for c in 0..n {
                ql[(r, c)] *= self.values[c];
            }
        }
        ql.matmul_t(&self.vectors)
    }
}

fn check_finite(w: &Matrix, what: &str) -> Result<()> {
    if w.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericInput(format!("{what} has non-finite entries")))
    }
}

/// Full thin SVD with `min(rows, cols)` triplets.
pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    check_finite(w, "svd input")?;
    if w.rows() >= w.cols() {
        Ok(jacobi_tall(w))
    } else {
        let f = jacobi_tall(&w.transpose());
        Ok(SvdFactors {
            u: f.vt.transpose(),
            sigma: f.sigma,
            vt: f.u.transpose(),
        })
    }
}

/// Top-`r` singular triplets of `w`.
pub fn truncated_svd(w: &Matrix, r: usize) -> Result<SvdFactors> {
    let max_rank = w.rows().min(w.cols());
    if r < 1 || r > max_rank {
        return Err(Error::Precondition(format!(
            "truncation rank {r} outside 1..={max_rank}"
        )));
    }
    Ok(svd(w)?.truncate(r))
}

/// Hestenes one-sided Jacobi on a matrix with rows >= cols.
fn jacobi_tall(a: &Matrix) -> SvdFactors {
    let (m, n) = a.shape();
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal singular values keep sweep order
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let smax = order.first().map_or(0.0, |&i| norms[i]);
    let tiny = smax * 1e-13 + f64::MIN_POSITIVE;
    let mut u = Matrix::zeros(m, n);
    let mut vt = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > tiny {
            let col: Vec<f64> = cols[j].iter().map(|x| x / s).collect();
            u.set_column(k, &col);
            sigma.push(s);
        } else {
            deficient.push(k);
            sigma.push(0.0);
        }
        for c in 0..n {
            vt[(k, c)] = v[j][c];
        }
    }
    for k in deficient {
        let col = orthonormal_complement(&u, k);
        u.set_column(k, &col);
    }
    SvdFactors { u, sigma, vt }
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for i in 0..cp.len() {
        let a = cp[i];
        let b = cq[i];
        cp[i] = c * a - s * b;
        cq[i] = s * a + c * b;
    }
}

/// A unit vector orthogonal to every filled column of `u` (columns other
/// than `skip` that are nonzero), built by Gram-Schmidt on basis vectors.
fn orthonormal_complement(u: &Matrix, skip: usize) -> Vec<f64> {
    let m = u.rows();
    let basis: Vec<Vec<f64>> = (0..u.cols())
        .filter(|&c| c != skip)
        .map(|c| u.column(c))
        .filter(|c| c.iter().any(|&x| x != 0.0))
        .collect();
    let mut best = vec![0.0; m];
    let mut best_norm = -1.0;
    for e in 0..m {
        let mut x = vec![0.0; m];
        x[e] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = b.iter().zip(&x).map(|(a, c)| a * c).sum();
                for i in 0..m {
                    x[i] -= d * b[i];
                }
            }
        }
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > best_norm {
            best_norm = n;
            best = x.iter().map(|v| v / n).collect();
        }
        if n > 0.5 {
            break;
        }
    }
    best
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eig(c: &Matrix) -> Result<EigenFactors> {
    check_finite(c, "sym_eig input")?;
    let (n, n2) = c.shape();
    if n != n2 {
        return Err(Error::NumericInput(format!("sym_eig needs a square matrix, got {n}x{n2}")));
    }
    let scale = c.max_abs().max(1.0);
    if !c.is_symmetric(1e-9 * scale) {
        return Err(Error::NumericInput("matrix is not symmetric within 1e-9".into()));
    }
    let mut a = c.clone();
    for r in 0..n {
        for s in r + 1..n {
            let avg = 0.5 * (a[(r, s)] + a[(s, r)]);
            a[(r, s)] = avg;
            a[(s, r)] = avg;
        }
    }
    let mut v = Matrix::identity(n);
    let total = a.frobenius_sq();
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off <= 1e-32 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = cs * akp - sn * akq;
                    a[(k, q)] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = cs * apk - sn * aqk;
                    a[(q, k)] = sn * apk + cs * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = cs * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    let diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));
    let mut values = Vec::with_capacity(n);
    let mut vectors = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let mut lam = diag[j];
        if (-1e-9..0.0).contains(&lam) {
            lam = 0.0;
        }
        values.push(lam);
        for r in 0..n {
            vectors[(r, k)] = v[(r, j)];
        }
    }
    Ok(EigenFactors { values, vectors })
}

/// Spectral norm (largest singular value).
pub fn op_norm(w: &Matrix) -> Result<f64> {
    if w.is_empty() {
        return Ok(0.0);
    }
    Ok(svd(w)?.sigma.first().copied().unwrap_or(0.0))
}

/// Frobenius distance between the orthogonal projectors onto the column
/// spans of `a` and `b` (both with orthonormal columns).
pub fn projector_distance(a: &Matrix, b: &Matrix) -> f64 {
    a.matmul_t(a).sub(&b.matmul_t(b)).frobenius()
}

/// `max |QᵀQ − I|` over the columns of `q`.
pub fn orthonormality_defect(q: &Matrix) -> f64 {
    q.t_matmul(q).sub(&Matrix::identity(q.cols())).max_abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeedStream;

    #[test]
    fn rank_one_input_truncates_exactly() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        let f = truncated_svd(&w, 1).unwrap();
        assert!((f.sigma[0] - 5.0).abs() < 1e-12);
        assert!(f.expand().max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn diagonal_truncation_drops_small_direction() {
        let w = Matrix::from_diag(&[3.0, 1.0]);
        let f = truncated_svd(&w, 1).unwrap();
        let err = w.sub(&f.expand()).frobenius();
        assert!((err - 1.0).abs() < 1e-12);
        assert!(f.expand().max_abs_diff(&Matrix::from_diag(&[3.0, 0.0])) < 1e-12);
    }

    #[test]
    fn rank_out_of_range_is_rejected() {
        let w = Matrix::identity(3);
        assert!(matches!(truncated_svd(&w, 0), Err(Error::Precondition(_))));
        assert!(matches!(truncated_svd(&w, 4), Err(Error::Precondition(_))));
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut w = Matrix::identity(2);
        w[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&w), Err(Error::NumericInput(_))));
    }

    #[test]
    fn wide_and_tall_round_trip() {
        let mut rng = SeedStream::new(3).rng("svd");
        for (m, n) in [(5, 3), (3, 5), (6, 6), (1, 4), (4, 1)] {
            let w = crate::numerics::rng::gaussian_matrix(&mut rng, m, n, 1.0);
            let f = svd(&w).unwrap();
            assert!(f.expand().max_abs_diff(&w) < 1e-12, "{m}x{n}");
            assert!(orthonormality_defect(&f.u) < 1e-12);
            assert!(orthonormality_defect(&f.vt.transpose()) < 1e-12);
            assert!(f.sigma.windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn rank_deficient_u_is_completed() {
        let w = Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 0.0]]);
        let f = svd(&w).unwrap();
        assert!(orthonormality_defect(&f.u) < 1e-12);
        assert!(f.expand().max_abs_diff(&w) < 1e-12);
        assert_eq!(f.sigma[2], 0.0);
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        let e = sym_eig(&Matrix::from_diag(&[1.0, 2.0])).unwrap();
        assert_eq!(e.values, vec![2.0, 1.0]);
        assert!((e.vectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let c = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]);
        assert!(matches!(sym_eig(&c), Err(Error::NumericInput(_))));
    }

    #[test]
    fn eig_average_of_outer_products() {
        // 0.5 (z zᵀ + z' z'ᵀ) with z = e1, z' = e2 expands to 0.5 I
        let c = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]);
        let e = sym_eig(&c).unwrap();
        assert_eq!(e.values, vec![0.5, 0.5]);
    }

    #[test]
    fn eig_residuals_on_random_psd() {
        let mut rng = SeedStream::new(9).rng("eig");
        let g = crate::numerics::rng::gaussian_matrix(&mut rng, 7, 7, 1.0);
        let c = g.t_matmul(&g);
        let e = sym_eig(&c).unwrap();
        for j in 0..7 {
            let q = Matrix::from_vec(7, 1, e.vector(j)).unwrap();
            let res = c.matmul(&q).sub(&q.scale(e.values[j])).frobenius();
            assert!(res <= 1e-7 * e.values[j].abs().max(1.0));
        }
        assert!(e.reconstruct().max_abs_diff(&c) < 1e-7);
        assert!((c.trace() - e.values.iter().sum::<f64>()).abs() < 1e-7 * c.trace());
    }
}
