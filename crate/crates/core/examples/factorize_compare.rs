//! Compare the four factorizers on a weight whose calibration inputs mostly
//! excite its weakest directions.

use sieve_core::factorize::{
    factorize_output_aligned, factorize_pca_x, factorize_rrr_oracle, factorize_svd_w, FactorizeOptions,
};
use sieve_core::linalg::{seeded_rng, svd, Matrix};

fn main() -> sieve_core::Result<()> {
    let mut rng = seeded_rng(4);
    let (d_out, d_in, t, r) = (24, 16, 400, 4);
    let w = Matrix::random_normal(d_out, d_in, 0.25, &mut rng);

    // Inputs live mostly in the span of W's smallest singular directions.
    let v = svd(&w)?.vt.transpose();
    let scales: Vec<f64> = (0..d_in).map(|j| 0.05 + (j as f64 / d_in as f64).powi(3)).collect();
    let x = v.matmul(&Matrix::diag(&scales))?.matmul(&Matrix::random_normal(d_in, t, 1.0, &mut rng))?;
    let y = w.matmul(&x)?;

    let opts = FactorizeOptions {
        epochs: 300,
        batch_tokens: 100,
        learning_rate: 0.003,
        seed: 1,
    };
    let rows = [
        factorize_svd_w(&w, &x, r)?,
        factorize_pca_x(&w, &x, r)?,
        factorize_output_aligned(&w, &x, &y, r, &opts)?,
        factorize_rrr_oracle(&w, &x, r)?,
    ];
    println!("rank {r}, achieved factor {:.3}", rows[0].achieved_factor);
    for f in &rows {
        println!("{:<18} relative output error {:.5}", format!("{:?}", f.method), f.calib_error);
    }
    Ok(())
}
