use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Adam moments and hyperparameters for one parameter matrix.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Matrix,
    pub v: Matrix,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with zero moments and the usual defaults
    /// (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param`, in place.
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::mismatch("adam_step", param.shape(), grad.shape()));
    }
    if state.m.shape() != param.shape() || state.v.shape() != param.shape() {
        return Err(Error::mismatch("adam_step moments", state.m.shape(), param.shape()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (((p, &g), mi), vi) in param
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_from_fresh_moments_is_fixed_point() {
        let mut p = Matrix::from_rows(&[vec![1.5, -2.0]]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(1, 2, 0.3);
        st.step = 41;
        for _ in 0..5 {
            adam_step(&mut p, &Matrix::zeros(1, 2), &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 46);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let mut st = AdamState::new(1, 1, 0.001);
        adam_step(&mut p, &Matrix::from_rows(&[vec![1.0]]).unwrap(), &mut st).unwrap();
        assert!((p[(0, 0)] + 0.001).abs() < 1e-10);
    }

    #[test]
    fn quadratic_best_so_far_non_increasing() {
        // f(x) = x², f'(x) = 2x.
        let mut x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let mut st = AdamState::new(1, 1, 0.001);
        let mut best = 1.0f64;
        let mut trace = vec![best];
        for _ in 0..10 {
            let g = x.scale(2.0);
            adam_step(&mut x, &g, &mut st).unwrap();
            let loss = x[(0, 0)] * x[(0, 0)];
            best = best.min(loss);
            trace.push(best);
        }
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(*trace.last().unwrap() < 1.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let mut st = AdamState::new(2, 2, 0.1);
        assert!(adam_step(&mut p, &Matrix::zeros(2, 3), &mut st).is_err());
    }
}
