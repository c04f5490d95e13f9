//! Rank-`R` factorizations `W ≈ B·C` of a projection.
//!
//! Every method returns the same shape: `B` is `d_out × R`, `C` is
//! `R × d_in`, and a pruned projection computes `y = B·(C·x)`. They differ in
//! what the factors are fit to:
//!
//! * [`factorize_svd_w`]: the weights alone (truncated SVD of `W`).
//! * [`factorize_pca_x`]: the inputs alone (top principal directions of the
//!   calibration activations).
//! * [`factorize_output_aligned`]: the outputs `Y = W·X` on calibration data,
//!   by Adam on both factors, keeping the best iterate seen.
//! * [`factorize_rrr_oracle`]: the closed-form minimizer of the same output
//!   objective (reduced-rank regression), used as a reference.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{adam_step, frobenius_rel_error, seeded_rng, svd, truncated_svd, AdamState, Matrix};

/// Relative cutoff below which singular values of `X` are treated as zero.
pub const PINV_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    OutputAlignedGd,
    RrrOracle,
    SvdW,
    PcaX,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedMatrix {
    /// `d_out × R`.
    pub b: Matrix,
    /// `R × d_in`.
    pub c: Matrix,
    pub rank: usize,
    pub method: Method,
    /// `‖Y − B·C·X‖_F / ‖Y‖_F` on the calibration data it was fit with.
    pub calib_error: f64,
    pub achieved_factor: f64,
}

impl FactorizedMatrix {
    pub fn new(b: Matrix, c: Matrix, method: Method, calib_error: f64) -> Result<Self> {
        if b.cols() != c.rows() {
            return Err(Error::mismatch("factor pair", b.shape(), c.shape()));
        }
        let rank = b.cols();
        Ok(Self {
            achieved_factor: achieved_factor(rank, c.cols(), b.rows()),
            b,
            c,
            rank,
            method,
            calib_error,
        })
    }

    pub fn d_in(&self) -> usize {
        self.c.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn params(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    /// The rank-`R` matrix `B·C`.
    pub fn reconstruct(&self) -> Matrix {
        self.b.matmul(&self.c).expect("factor shapes agree")
    }

    /// `B·(C·X)` for activations stored as columns.
    pub fn apply_columns(&self, x: &Matrix) -> Result<Matrix> {
        self.b.matmul(&self.c.matmul(x)?)
    }

    /// `(x·Cᵀ)·Bᵀ` for activations stored as rows.
    pub fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul_t(&self.c)?.matmul_t(&self.b)
    }
}

/// Fraction of a `d_out × d_in` matrix's parameters kept at rank `R`:
/// `R·(d_in + d_out) / (d_in·d_out)`.
pub fn achieved_factor(rank: usize, d_in: usize, d_out: usize) -> f64 {
    (rank * (d_in + d_out)) as f64 / (d_in * d_out) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankChoice {
    /// Keep the dense matrix.
    Unpruned,
    Rank { rank: usize, achieved_factor: f64 },
}

impl RankChoice {
    pub fn rank(self) -> Option<usize> {
        match self {
            RankChoice::Unpruned => None,
            RankChoice::Rank { rank, .. } => Some(rank),
        }
    }

    pub fn factor(self) -> f64 {
        match self {
            RankChoice::Unpruned => 1.0,
            RankChoice::Rank { achieved_factor, .. } => achieved_factor,
        }
    }
}

/// Largest rank whose parameter count fits in a fraction `p` of the dense
/// matrix, clamped to `[1, min(d_in, d_out) − 1]`. `p = 1` keeps the matrix
/// dense.
pub fn rank_for_factor(p: f64, d_in: usize, d_out: usize) -> Result<RankChoice> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("retention {p} outside (0, 1]")));
    }
    if p == 1.0 {
        return Ok(RankChoice::Unpruned);
    }
    let exact = p * (d_in * d_out) as f64 / (d_in + d_out) as f64;
    // Absorb representation error so that e.g. 0.35·64/16 lands on 1.4, not 1.39999.
    let floor = (exact + 1e-9).floor() as usize;
    let upper = d_in.min(d_out).saturating_sub(1).max(1);
    let rank = floor.clamp(1, upper);
    Ok(RankChoice::Rank {
        rank,
        achieved_factor: achieved_factor(rank, d_in, d_out),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorizeOptions {
    pub epochs: usize,
    pub batch_tokens: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FactorizeOptions {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_tokens: 5000,
            learning_rate: 0.001,
            seed: 0,
        }
    }
}

impl FactorizeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_tokens == 0 {
            return Err(Error::InvalidArgument("batch_tokens must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

fn check_rank(r: usize, d_in: usize, d_out: usize) -> Result<()> {
    let max = d_in.min(d_out);
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    Ok(())
}

fn check_inputs(w: &Matrix, x: &Matrix) -> Result<()> {
    if x.rows() != w.cols() {
        return Err(Error::mismatch("calibration input", w.shape(), x.shape()));
    }
    if !w.is_finite() || !x.is_finite() {
        return Err(Error::NonFinite("factorization input"));
    }
    Ok(())
}

fn output_error(y: &Matrix, b: &Matrix, c: &Matrix, x: &Matrix) -> Result<f64> {
    frobenius_rel_error(y, &b.matmul(&c.matmul(x)?)?)
}

/// Weight-only baseline: `B = U_R·√Σ_R`, `C = √Σ_R·V_Rᵀ`.
pub fn factorize_svd_w(w: &Matrix, x_cal: &Matrix, r: usize) -> Result<FactorizedMatrix> {
    check_inputs(w, x_cal)?;
    check_rank(r, w.cols(), w.rows())?;
    let (b, c) = svd_factors(w, r)?;
    let y = w.matmul(x_cal)?;
    let err = output_error(&y, &b, &c, x_cal)?;
    FactorizedMatrix::new(b, c, Method::SvdW, err)
}

fn svd_factors(w: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let s = truncated_svd(w, r)?;
    let mut b = s.u.clone();
    let mut c = s.vt.clone();
    for k in 0..r {
        let root = s.sigma[k].sqrt();
        for row in 0..b.rows() {
            b[(row, k)] *= root;
        }
        for v in c.row_mut(k) {
            *v *= root;
        }
    }
    Ok((b, c))
}

/// Input-only baseline: project inputs onto the top-`R` directions of the
/// uncentered second moment `X·Xᵀ`, so `C = P` and `B = W·Pᵀ`.
pub fn factorize_pca_x(w: &Matrix, x_cal: &Matrix, r: usize) -> Result<FactorizedMatrix> {
    check_inputs(w, x_cal)?;
    check_rank(r, w.cols(), w.rows())?;
    if x_cal.cols() < r {
        return Err(Error::RankDeficient {
            available: x_cal.cols(),
            requested: r,
        });
    }
    let s = svd(x_cal)?;
    let available = s.numerical_rank(PINV_CUTOFF);
    if available < r {
        return Err(Error::RankDeficient {
            available,
            requested: r,
        });
    }
    let p = s.u.column_block(0, r).transpose();
    let b = w.matmul_t(&p)?;
    let y = w.matmul(x_cal)?;
    let err = output_error(&y, &b, &p, x_cal)?;
    FactorizedMatrix::new(b, p, Method::PcaX, err)
}

/// Closed-form minimizer of `‖W·X − B·C·X‖_F` over rank-`R` maps.
///
/// With thin SVD `X = U·Σ·Vᵀ`, the problem reduces to the best rank-`R`
/// approximation `P·Q` of `Z = (W·X)·V`; then `B = P` and
/// `C = Q·Σ⁺·Uᵀ`. Singular values of `X` below `1e-10·σ_max` are dropped.
pub fn factorize_rrr_oracle(w: &Matrix, x_cal: &Matrix, r: usize) -> Result<FactorizedMatrix> {
    check_inputs(w, x_cal)?;
    check_rank(r, w.cols(), w.rows())?;
    let (d_in, d_out) = (w.cols(), w.rows());
    let y = w.matmul(x_cal)?;

    let sx = svd(x_cal)?;
    let k = sx.numerical_rank(PINV_CUTOFF);
    if k == 0 {
        return Err(Error::RankDeficient {
            available: 0,
            requested: r,
        });
    }
    let u = sx.u.column_block(0, k);
    let v = sx.vt.row_block(0, k);
    // Z = Y·V, with V stored transposed as `v`.
    let z = y.matmul_t(&v)?;
    let kept = r.min(k).min(d_out);
    let sz = truncated_svd(&z, kept)?;

    let mut b = Matrix::zeros(d_out, r);
    let mut c = Matrix::zeros(r, d_in);
    for j in 0..kept {
        for row in 0..d_out {
            b[(row, j)] = sz.u[(row, j)] * sz.sigma[j];
        }
        // Row j of C is Σ_i Q[j,i]/σ_i · U[:,i]ᵀ.
        for i in 0..k {
            let coef = sz.vt[(j, i)] / sx.sigma[i];
            for col in 0..d_in {
                c[(j, col)] += coef * u[(col, i)];
            }
        }
    }
    let err = output_error(&y, &b, &c, x_cal)?;
    FactorizedMatrix::new(b, c, Method::RrrOracle, err)
}

/// `L(B, C) = ½‖Y − B·C·X‖²_F` with its gradients
/// `∂L/∂B = −R·(C·X)ᵀ` and `∂L/∂C = −Bᵀ·R·Xᵀ`, `R = Y − B·C·X`.
pub fn loss_and_gradients(
    b: &Matrix,
    c: &Matrix,
    x: &Matrix,
    y: &Matrix,
) -> Result<(f64, Matrix, Matrix)> {
    let cx = c.matmul(x)?;
    let resid = y.sub(&b.matmul(&cx)?)?;
    let loss = 0.5 * resid.inner(&resid)?;
    let grad_b = resid.matmul_t(&cx)?.scale(-1.0);
    let grad_c = b.transpose().matmul(&resid)?.matmul_t(x)?.scale(-1.0);
    Ok((loss, grad_b, grad_c))
}

/// Relative output error evaluated through second-moment statistics, so the
/// per-batch check costs `O(d³)` regardless of the token count.
struct MomentObjective {
    xx: Matrix,
    yx: Matrix,
    yy: f64,
}

impl MomentObjective {
    fn new(x: &Matrix, y: &Matrix) -> Result<Self> {
        let yy = y.inner(y)?;
        if yy == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(Self {
            xx: x.matmul_t(x)?,
            yx: y.matmul_t(x)?,
            yy,
        })
    }

    fn rel_error(&self, b: &Matrix, c: &Matrix) -> Result<f64> {
        let m = b.matmul(c)?;
        let cross = m.inner(&self.yx)?;
        let quad = m.matmul(&self.xx)?.inner(&m)?;
        let sq = self.yy - 2.0 * cross + quad;
        if !sq.is_finite() {
            return Ok(f64::NAN);
        }
        Ok((sq.max(0.0) / self.yy).sqrt())
    }
}

/// Fits `B`, `C` to the calibration outputs by Adam.
///
/// Starts from the SVD-of-`W` factors, visits the tokens in shuffled batches
/// of `batch_tokens` columns for `epochs` passes, and after every batch
/// measures the error on all calibration tokens, retaining the best pair.
/// There is no early stopping. `y_cal` must equal `W·x_cal`.
pub fn factorize_output_aligned(
    w: &Matrix,
    x_cal: &Matrix,
    y_cal: &Matrix,
    r: usize,
    opts: &FactorizeOptions,
) -> Result<FactorizedMatrix> {
    opts.validate()?;
    check_inputs(w, x_cal)?;
    check_rank(r, w.cols(), w.rows())?;
    if y_cal.shape() != (w.rows(), x_cal.cols()) {
        return Err(Error::mismatch("calibration output", (w.rows(), x_cal.cols()), y_cal.shape()));
    }

    let objective = MomentObjective::new(x_cal, y_cal)?;
    let (mut b, mut c) = svd_factors(w, r)?;
    let mut best = (b.clone(), c.clone());
    let mut best_err = objective.rel_error(&b, &c)?;

    let mut state_b = AdamState::new(b.rows(), b.cols(), opts.learning_rate);
    let mut state_c = AdamState::new(c.rows(), c.cols(), opts.learning_rate);
    let mut rng = seeded_rng(opts.seed);
    let mut order: Vec<usize> = (0..x_cal.cols()).collect();
    let mut batches = 0;

    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_tokens) {
            let xb = x_cal.select_columns(chunk);
            let yb = y_cal.select_columns(chunk);
            let (_, grad_b, grad_c) = loss_and_gradients(&b, &c, &xb, &yb)?;
            adam_step(&mut b, &grad_b, &mut state_b)?;
            adam_step(&mut c, &grad_c, &mut state_c)?;
            batches += 1;

            let err = if b.is_finite() && c.is_finite() {
                objective.rel_error(&b, &c)?
            } else {
                f64::NAN
            };
            if !err.is_finite() {
                let (bb, cb) = best;
                let calib = output_error(y_cal, &bb, &cb, x_cal)?;
                let last = FactorizedMatrix::new(bb, cb, Method::OutputAlignedGd, calib)?;
                return Err(Error::Diverged {
                    batches,
                    last_finite: Box::new(last),
                });
            }
            // Require a margin so rounding in the moment form never trades a
            // pair for one that is no better when measured directly.
            if err < best_err * (1.0 - 1e-12) {
                best_err = err;
                best = (b.clone(), c.clone());
            }
        }
    }

    let (b, c) = best;
    let calib = output_error(y_cal, &b, &c, x_cal)?;
    FactorizedMatrix::new(b, c, Method::OutputAlignedGd, calib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_rng;

    #[test]
    fn rank_arithmetic_fixtures() {
        assert_eq!(
            rank_for_factor(0.5, 8, 8).unwrap(),
            RankChoice::Rank {
                rank: 2,
                achieved_factor: 0.5
            }
        );
        assert_eq!(rank_for_factor(1.0, 8, 8).unwrap(), RankChoice::Unpruned);
        assert!(rank_for_factor(0.0, 8, 8).is_err());
        assert!(rank_for_factor(-0.5, 8, 8).is_err());
        assert!(rank_for_factor(1.5, 8, 8).is_err());
        assert!(rank_for_factor(f64::NAN, 8, 8).is_err());
        // Tiny factor clamps up to rank 1.
        assert_eq!(rank_for_factor(0.05, 8, 8).unwrap().rank(), Some(1));
    }

    #[test]
    fn achieved_factor_is_recomputable() {
        let f = FactorizedMatrix::new(Matrix::zeros(6, 3), Matrix::zeros(3, 4), Method::SvdW, 0.0)
            .unwrap();
        assert_eq!(f.achieved_factor, (3 * (4 + 6)) as f64 / 24.0);
        assert_eq!(f.params(), 30);
    }

    #[test]
    fn rank_validation() {
        let w = Matrix::identity(4);
        let x = Matrix::identity(4);
        assert!(matches!(factorize_svd_w(&w, &x, 0), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(factorize_rrr_oracle(&w, &x, 5), Err(Error::RankOutOfRange { .. })));
        assert!(factorize_svd_w(&w, &Matrix::identity(3), 1).is_err());
    }

    #[test]
    fn pca_signals_rank_deficiency() {
        let mut rng = seeded_rng(1);
        let w = Matrix::random_normal(5, 5, 1.0, &mut rng);
        let basis = Matrix::random_normal(5, 2, 1.0, &mut rng);
        let coeffs = Matrix::random_normal(2, 20, 1.0, &mut rng);
        let x = basis.matmul(&coeffs).unwrap();
        assert!(matches!(
            factorize_pca_x(&w, &x, 3),
            Err(Error::RankDeficient { available: 2, requested: 3 })
        ));
        assert!(matches!(
            factorize_pca_x(&w, &Matrix::random_normal(5, 2, 1.0, &mut rng), 3),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn output_aligned_rejects_zero_epochs() {
        let w = Matrix::identity(3);
        let x = Matrix::identity(3);
        let opts = FactorizeOptions {
            epochs: 0,
            ..Default::default()
        };
        assert!(factorize_output_aligned(&w, &x, &w, 1, &opts).is_err());
        assert_eq!(FactorizeOptions::default().epochs, 2);
        assert_eq!(FactorizeOptions::default().batch_tokens, 5000);
        assert_eq!(FactorizeOptions::default().learning_rate, 0.001);
    }

    #[test]
    fn divergence_returns_last_finite_iterate() {
        let mut rng = seeded_rng(3);
        let w = Matrix::random_normal(6, 6, 1.0, &mut rng);
        let x = Matrix::random_normal(6, 40, 1.0, &mut rng);
        let y = w.matmul(&x).unwrap();
        let opts = FactorizeOptions {
            epochs: 50,
            batch_tokens: 8,
            learning_rate: 1e300,
            seed: 1,
        };
        match factorize_output_aligned(&w, &x, &y, 2, &opts) {
            Err(Error::Diverged { last_finite, .. }) => {
                assert!(last_finite.calib_error.is_finite());
                assert!(last_finite.b.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn moment_error_matches_direct_error() {
        let mut rng = seeded_rng(9);
        let w = Matrix::random_normal(7, 5, 1.0, &mut rng);
        let x = Matrix::random_normal(5, 30, 1.0, &mut rng);
        let y = w.matmul(&x).unwrap();
        let b = Matrix::random_normal(7, 2, 1.0, &mut rng);
        let c = Matrix::random_normal(2, 5, 1.0, &mut rng);
        let direct = output_error(&y, &b, &c, &x).unwrap();
        let moment = MomentObjective::new(&x, &y).unwrap().rel_error(&b, &c).unwrap();
        assert!((direct - moment).abs() < 1e-10);
    }
}
