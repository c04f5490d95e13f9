//! Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! The rotations orthogonalize the columns of the input, which implicitly
//! diagonalizes `AᵀA` without ever forming it. Matrices in this crate are
//! small (at most a few thousand entries, or a few dozen columns of
//! calibration tokens), so accuracy and determinism win over speed.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAX_SWEEPS: usize = 100;
const ROTATION_TOL: f64 = 1e-15;

/// Thin SVD `A = U · diag(sigma) · Vt`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `rows × k`, orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative.
    pub sigma: Vec<f64>,
    /// `k × cols`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Keeps the leading `r` triplets.
    pub fn truncate(&self, r: usize) -> SvdResult {
        let r = r.min(self.sigma.len());
        SvdResult {
            u: self.u.column_block(0, r),
            sigma: self.sigma[..r].to_vec(),
            vt: self.vt.row_block(0, r),
        }
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for row in 0..us.rows() {
            for (v, s) in us.row_mut(row).iter_mut().zip(&self.sigma) {
                *v *= s;
            }
        }
        us.matmul(&self.vt).expect("factor shapes are consistent")
    }

    /// Number of singular values above `rel_tol · σ_max`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let max = self.sigma.first().copied().unwrap_or(0.0);
        self.sigma.iter().filter(|&&s| s > rel_tol * max && s > 0.0).count()
    }
}

/// Full thin SVD. Each left singular vector's first nonzero component is
/// positive; the matching right vector carries the sign.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    if a.rows() >= a.cols() {
        Ok(svd_tall(a))
    } else {
        let t = svd_tall(&a.transpose());
        let mut out = SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// Leading `r` singular triplets, `1 ≤ r ≤ min(rows, cols)`.
pub fn truncated_svd(m: &Matrix, r: usize) -> Result<SvdResult> {
    let max = m.rows().min(m.cols());
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    Ok(svd(m)?.truncate(r))
}

fn svd_tall(a: &Matrix) -> SvdResult {
    let (m, n) = a.shape();
    // Row i of `cols` is column i of A; row i of `v` is column i of V.
    let mut cols = a.transpose();
    let mut v = Matrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (alpha, beta, gamma) = {
                    let ci = cols.row(i);
                    let cj = cols.row(j);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for k in 0..m {
                        alpha += ci[k] * ci[k];
                        beta += cj[k] * cj[k];
                        gamma += ci[k] * cj[k];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, i, j, c, s);
                rotate_rows(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|i| cols.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let sigma_max = order.first().map_or(0.0, |&i| norms[i]);
    let negligible = sigma_max * (m.max(n) as f64) * f64::EPSILON;

    // Rows of `u_rows` are the left singular vectors.
    let mut u_rows = Matrix::zeros(n, m);
    let mut vt = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        let s = norms[i];
        sigma.push(s);
        vt.row_mut(k).copy_from_slice(v.row(i));
        if s > negligible && s > 0.0 {
            for (dst, src) in u_rows.row_mut(k).iter_mut().zip(cols.row(i)) {
                *dst = src / s;
            }
        } else {
            pending.push(k);
        }
    }
    complete_orthonormal(&mut u_rows, &pending);

    let mut out = SvdResult {
        u: u_rows.transpose(),
        sigma,
        vt,
    };
    fix_signs(&mut out);
    out
}

fn rotate_rows(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    let width = m.cols();
    let data = m.as_mut_slice();
    let (head, tail) = data.split_at_mut(j * width);
    let ri = &mut head[i * width..(i + 1) * width];
    let rj = &mut tail[..width];
    for (a, b) in ri.iter_mut().zip(rj.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the listed rows with unit vectors orthogonal to every other row,
/// drawing candidates from the standard basis.
fn complete_orthonormal(rows: &mut Matrix, pending: &[usize]) {
    if pending.is_empty() {
        return;
    }
    let dim = rows.cols();
    let mut filled: Vec<usize> = (0..rows.rows()).filter(|r| !pending.contains(r)).collect();
    let mut candidate = 0;
    for &target in pending {
        while candidate < dim {
            let mut vec = vec![0.0; dim];
            vec[candidate] = 1.0;
            candidate += 1;
            // Two passes of modified Gram-Schmidt.
            for _ in 0..2 {
                for &f in &filled {
                    let basis = rows.row(f);
                    let proj: f64 = vec.iter().zip(basis).map(|(a, b)| a * b).sum();
                    for (x, b) in vec.iter_mut().zip(basis) {
                        *x -= proj * b;
                    }
                }
            }
            let norm = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for (dst, x) in rows.row_mut(target).iter_mut().zip(&vec) {
                    *dst = x / norm;
                }
                filled.push(target);
                break;
            }
        }
    }
}

fn fix_signs(svd: &mut SvdResult) {
    for k in 0..svd.sigma.len() {
        let lead = (0..svd.u.rows())
            .map(|r| svd.u[(r, k)])
            .find(|x| x.abs() > 1e-12);
        if matches!(lead, Some(x) if x < 0.0) {
            for r in 0..svd.u.rows() {
                svd.u[(r, k)] = -svd.u[(r, k)];
            }
            for x in svd.vt.row_mut(k) {
                *x = -*x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius_rel_error, seeded_rng};

    fn orthonormality_defect(q: &Matrix) -> f64 {
        let gram = q.transpose().matmul(q).unwrap();
        gram.max_abs_diff(&Matrix::identity(q.cols())).unwrap()
    }

    #[test]
    fn diagonal_singular_values() {
        let m = Matrix::diag(&[3.0, 2.0, 1.0]);
        let s = truncated_svd(&m, 2).unwrap();
        assert_eq!(s.sigma.len(), 2);
        assert!((s.sigma[0] - 3.0).abs() < 1e-14);
        assert!((s.sigma[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn rank_one_is_exact() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 1.0, -1.0];
        let m = Matrix::from_fn(4, 3, |r, c| u[r] * v[c]);
        let s = truncated_svd(&m, 1).unwrap();
        let err = frobenius_rel_error(&m, &s.reconstruct()).unwrap();
        assert!(err < 1e-14, "{err}");
    }

    #[test]
    fn full_rank_reconstruction_both_orientations() {
        let mut rng = seeded_rng(7);
        for (r, c) in [(6, 4), (4, 6), (5, 5), (1, 3), (3, 1)] {
            let m = Matrix::random_normal(r, c, 1.0, &mut rng);
            let s = svd(&m).unwrap();
            assert!(frobenius_rel_error(&m, &s.reconstruct()).unwrap() < 1e-12);
            assert!(orthonormality_defect(&s.u) < 1e-12);
            assert!(orthonormality_defect(&s.vt.transpose()) < 1e-12);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
            assert!(s.sigma.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn rank_deficient_input_keeps_orthonormal_u() {
        let u = [1.0, 2.0, 3.0, 4.0, 5.0];
        let m = Matrix::from_fn(5, 3, |r, c| u[r] * (c as f64 + 1.0));
        let s = svd(&m).unwrap();
        assert_eq!(s.numerical_rank(1e-10), 1);
        assert!(orthonormality_defect(&s.u) < 1e-10);
        assert!(frobenius_rel_error(&m, &s.reconstruct()).unwrap() < 1e-12);
    }

    #[test]
    fn sign_convention_first_component_positive() {
        let mut rng = seeded_rng(21);
        let m = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let s = svd(&m).unwrap();
        for k in 0..3 {
            let lead = s.u.column(k).into_iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn rejects_bad_rank_and_non_finite() {
        let m = Matrix::identity(3);
        assert!(matches!(truncated_svd(&m, 0), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(truncated_svd(&m, 4), Err(Error::RankOutOfRange { .. })));
        let mut bad = Matrix::identity(2);
        bad[(0, 1)] = f64::NAN;
        assert!(matches!(truncated_svd(&bad, 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_matrix() {
        let s = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(s.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_defect(&s.u) < 1e-12);
    }
}
