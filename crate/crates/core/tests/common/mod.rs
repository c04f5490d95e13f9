//! Test-side oracles and fixtures, written independently of the library's
//! own decompositions.
#![allow(dead_code)]

use rand::Rng;
use sieve_core::linalg::{seeded_rng, svd, Matrix};

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// eigenvalues in descending order and the matching eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[r][order[c]]);
    (values, vectors)
}

/// Singular values of `a` from the eigenvalues of `AᵀA` or `AAᵀ`.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let g = if a.rows() >= a.cols() {
        a.transpose().matmul(a).unwrap()
    } else {
        a.matmul(&a.transpose()).unwrap()
    };
    symmetric_eigen(&g).0.into_iter().map(|l| l.max(0.0).sqrt()).collect()
}

/// Best achievable relative error `min_{rank M ≤ r} ‖WX − MX‖ / ‖WX‖`,
/// from the eigenvalues of `Y P Yᵀ` where `P` projects onto the row space
/// of `X`.
pub fn optimal_output_error(w: &Matrix, x: &Matrix, r: usize) -> f64 {
    let y = w.matmul(x).unwrap();
    let (lam, q) = symmetric_eigen(&x.matmul(&x.transpose()).unwrap());
    let cutoff = lam[0] * 1e-12;
    let inv_diag: Vec<f64> = lam.iter().map(|&l| if l > cutoff { 1.0 / l } else { 0.0 }).collect();
    let pinv = q.matmul(&Matrix::diag(&inv_diag)).unwrap().matmul(&q.transpose()).unwrap();
    let yx = y.matmul(&x.transpose()).unwrap();
    let m = yx.matmul(&pinv).unwrap().matmul(&yx.transpose()).unwrap();
    let (mu, _) = symmetric_eigen(&m);
    let yy = y.inner(&y).unwrap();
    let captured: f64 = mu.iter().take(r).sum();
    ((yy - captured).max(0.0) / yy).sqrt()
}

/// Random orthogonal matrix.
pub fn orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    svd(&Matrix::random_normal(n, n, 1.0, rng)).unwrap().u
}

/// One factorization problem: weight, calibration inputs, target rank.
pub struct Instance {
    pub w: Matrix,
    pub x: Matrix,
    pub r: usize,
    /// Calibration energy concentrated on the weight's weakest input
    /// directions.
    pub misaligned: bool,
}

impl Instance {
    pub fn y(&self) -> Matrix {
        self.w.matmul(&self.x).unwrap()
    }
}

/// Seeded instance `i`: shapes up to 32×32, anisotropic inputs (100:1
/// spread of standard deviations), rank from {2, 4, 8}. Odd `i` belong to
/// the misaligned family.
pub fn instance(i: usize) -> Instance {
    let mut rng = seeded_rng(10_000 + i as u64);
    const DIMS: [usize; 5] = [8, 12, 16, 24, 32];
    let d_out = DIMS[rng.random_range(0..DIMS.len())];
    let d_in = DIMS[rng.random_range(0..DIMS.len())];
    let ranks: Vec<usize> = [2, 4, 8].into_iter().filter(|&r| r < d_in.min(d_out)).collect();
    let r = ranks[rng.random_range(0..ranks.len())];
    let t = 3 * d_in + 16;
    let w = Matrix::random_normal(d_out, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng);
    let misaligned = i % 2 == 1;
    let basis = if misaligned {
        // W's null directions, then its right singular vectors weakest first.
        orthogonal_complement(&svd(&w).unwrap().vt.transpose())
    } else {
        orthogonal(d_in, &mut rng)
    };
    build_x(w, basis, r, t, misaligned, &mut rng)
}

fn build_x(w: Matrix, basis: Matrix, r: usize, t: usize, misaligned: bool, rng: &mut impl Rng) -> Instance {
    let d_in = basis.rows();
    let s: Vec<f64> = (0..d_in).map(|j| 10f64.powf(-2.0 * j as f64 / (d_in - 1) as f64)).collect();
    let g = Matrix::random_normal(d_in, t, 1.0, rng);
    let x = basis.matmul(&Matrix::diag(&s)).unwrap().matmul(&g).unwrap();
    Instance { w, x, r, misaligned }
}

/// Square orthogonal matrix whose first columns span the complement of
/// `v`'s columns and whose remaining columns are `v`'s, weakest first.
fn orthogonal_complement(v: &Matrix) -> Matrix {
    let n = v.rows();
    let k = v.cols();
    let proj = Matrix::identity(n).sub(&v.matmul(&v.transpose()).unwrap()).unwrap();
    let (vals, vecs) = symmetric_eigen(&proj);
    let comp: Vec<usize> = (0..n).filter(|&i| vals[i] > 0.5).collect();
    assert_eq!(comp.len(), n - k);
    let c = vecs.select_columns(&comp);
    let rev: Vec<usize> = (0..k).rev().collect();
    let vr = v.select_columns(&rev);
    Matrix::from_fn(n, n, |i, j| if j < n - k { c[(i, j)] } else { vr[(i, j - (n - k))] })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}
