mod common;

use rand::Rng;
use sieve_core::calibrate::{build_cache, capture_calibration, FactorSet, Pruner, PruningVector};
use sieve_core::factorize::{factorize_pca_x, factorize_rrr_oracle, factorize_svd_w, FactorizeOptions};
use sieve_core::linalg::{frobenius_rel_error, seeded_rng, svd, truncated_svd, Matrix};
use sieve_core::model::{forward, greedy_decode, ModelWeights, TransformerConfig};

use common::{optimal_output_error, singular_values, symmetric_eigen};

#[test]
fn svd_matches_eigen_oracle() {
    for (i, &(m, n)) in [(5, 5), (9, 4), (4, 9), (16, 16), (32, 7), (1, 6)].iter().enumerate() {
        let a = Matrix::random_normal(m, n, 1.0, &mut seeded_rng(i as u64));
        let s = svd(&a).unwrap();
        let oracle = singular_values(&a);
        for (got, want) in s.sigma.iter().zip(&oracle) {
            assert!((got - want).abs() <= 1e-9 * oracle[0], "{m}x{n}: {got} vs {want}");
        }
        assert!(s.reconstruct().max_abs_diff(&a).unwrap() <= 1e-12 * oracle[0] * 10.0);
        let utu = s.u.transpose().matmul(&s.u).unwrap();
        assert!(utu.max_abs_diff(&Matrix::identity(utu.rows())).unwrap() <= 1e-12);
    }
}

#[test]
fn truncated_svd_beats_random_rank_r_candidates() {
    let mut rng = seeded_rng(42);
    for trial in 0..5 {
        let (m, n, r) = (12, 10, 1 + trial);
        let a = Matrix::random_normal(m, n, 1.0, &mut rng);
        let opt = truncated_svd(&a, r).unwrap();
        let best = opt.reconstruct();
        let best_err = a.sub(&best).unwrap().frobenius_norm();
        // Error equals the tail energy.
        let sv = singular_values(&a);
        let tail: f64 = sv[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((best_err - tail).abs() <= 1e-9 * tail);
        for k in 0..100 {
            let scale = rng.random_range(0.1..2.0);
            let cand = if k % 2 == 0 {
                Matrix::random_normal(m, r, scale, &mut rng)
                    .matmul(&Matrix::random_normal(r, n, 1.0, &mut rng))
                    .unwrap()
            } else {
                // Perturbations of the optimum stay rank r.
                let noise = Matrix::random_normal(r, r, 0.05 * scale, &mut rng);
                let sig = Matrix::diag(&opt.sigma).add(&noise).unwrap();
                opt.u.matmul(&sig).unwrap().matmul(&opt.vt).unwrap()
            };
            assert!(a.sub(&cand).unwrap().frobenius_norm() >= best_err * (1.0 - 1e-12));
        }
    }
}

#[test]
fn rrr_oracle_reaches_the_independent_optimum() {
    for i in 0..20 {
        let inst = common::instance(i);
        let got = factorize_rrr_oracle(&inst.w, &inst.x, inst.r).unwrap().calib_error;
        let want = optimal_output_error(&inst.w, &inst.x, inst.r);
        assert!((got - want).abs() <= 1e-6 * want.max(1e-3), "instance {i}: {got} vs {want}");
    }
}

#[test]
fn rrr_oracle_handles_rank_deficient_inputs() {
    let mut rng = seeded_rng(8);
    let w = Matrix::random_normal(6, 6, 1.0, &mut rng);
    let x = Matrix::random_normal(6, 3, 1.0, &mut rng)
        .matmul(&Matrix::random_normal(3, 40, 1.0, &mut rng))
        .unwrap();
    // Rank 3 reproduces W on the span of X exactly.
    let f = factorize_rrr_oracle(&w, &x, 3).unwrap();
    assert!(f.calib_error < 1e-10, "{}", f.calib_error);
}

#[test]
fn pca_x_projects_onto_top_uncentered_directions() {
    let mut rng = seeded_rng(12);
    let w = Matrix::random_normal(7, 5, 1.0, &mut rng);
    let mut x = Matrix::random_normal(5, 60, 1.0, &mut rng);
    // A large mean on one axis dominates the uncentered moment.
    for v in x.row_mut(4) {
        *v += 10.0;
    }
    let (_, q) = symmetric_eigen(&x.matmul(&x.transpose()).unwrap());
    let top = q.select_columns(&[0, 1]);
    let proj = top.matmul(&top.transpose()).unwrap();
    let want = w.matmul(&proj).unwrap();
    let got = factorize_pca_x(&w, &x, 2).unwrap().reconstruct();
    assert!(got.max_abs_diff(&want).unwrap() <= 1e-9);
}

#[test]
fn svd_w_keeps_the_top_weight_directions() {
    let mut rng = seeded_rng(13);
    let w = Matrix::random_normal(9, 6, 1.0, &mut rng);
    let x = Matrix::random_normal(6, 30, 1.0, &mut rng);
    let f = factorize_svd_w(&w, &x, 2).unwrap();
    let sv = singular_values(&w);
    let tail = (sv[2] * sv[2] + sv[3..].iter().map(|s| s * s).sum::<f64>()).sqrt();
    let err = w.sub(&f.reconstruct()).unwrap().frobenius_norm();
    assert!((err - tail).abs() <= 1e-9);
    let y = w.matmul(&x).unwrap();
    let direct = frobenius_rel_error(&y, &f.reconstruct().matmul(&x).unwrap()).unwrap();
    assert!((direct - f.calib_error).abs() <= 1e-12);
}

/// Straight-line reference forward pass over nested vectors.
fn reference_logits(m: &ModelWeights, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &m.config;
    let d = cfg.d_model;
    let hd = d / cfg.n_heads;
    let t = tokens.len();
    let lin = |w: &Matrix, x: &[f64]| -> Vec<f64> {
        (0..w.rows()).map(|o| (0..w.cols()).map(|i| w[(o, i)] * x[i]).sum()).collect()
    };
    let norm = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());

    let mut xs: Vec<Vec<f64>> = (0..t)
        .map(|p| (0..d).map(|i| m.tok_emb[(tokens[p] as usize, i)] + m.pos_emb[(p, i)]).collect())
        .collect();
    for l in &m.layers {
        let h: Vec<Vec<f64>> = xs.iter().map(|x| norm(x, &l.ln1_gain, &l.ln1_bias)).collect();
        let qkv: Vec<Vec<f64>> = h.iter().map(|x| lin(&l.w_qkv, x)).collect();
        let mut concat = vec![vec![0.0; d]; t];
        for head in 0..cfg.n_heads {
            let q = |p: usize, k: usize| qkv[p][head * hd + k];
            let key = |p: usize, k: usize| qkv[p][d + head * hd + k];
            let val = |p: usize, k: usize| qkv[p][2 * d + head * hd + k];
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..hd).map(|k| q(i, k) * key(j, k)).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..hd {
                    concat[i][head * hd + k] = (0..=i).map(|j| e[j] / z * val(j, k)).sum();
                }
            }
        }
        for i in 0..t {
            let o = lin(&l.w_o, &concat[i]);
            for k in 0..d {
                xs[i][k] += o[k];
            }
            let h2 = norm(&xs[i], &l.ln2_gain, &l.ln2_bias);
            let a: Vec<f64> = lin(&l.w_1, &h2).iter().zip(&l.b_1).map(|(v, b)| gelu(v + b)).collect();
            let f = lin(&l.w_2, &a);
            for k in 0..d {
                xs[i][k] += f[k] + l.b_2[k];
            }
        }
    }
    xs.iter()
        .map(|x| lin(&m.unembed, &norm(x, &m.lnf_gain, &m.lnf_bias)))
        .collect()
}

#[test]
fn forward_matches_reference() {
    let cfg = TransformerConfig {
        n_layers: 2,
        d_model: 12,
        n_heads: 3,
        d_ff: 20,
        vocab_size: 256,
        max_seq_len: 10,
    };
    let model = ModelWeights::random(cfg, 31).unwrap();
    let mut rng = seeded_rng(1);
    for _ in 0..10 {
        let len = rng.random_range(1..=10);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..256)).collect();
        let (logits, _) = forward(&model, &tokens, &[]).unwrap();
        let want = reference_logits(&model, &tokens);
        for (p, row) in want.iter().enumerate() {
            for (v, w) in logits.row(p).iter().zip(row) {
                assert!((v - w).abs() <= 1e-9 * (1.0 + w.abs()), "pos {p}: {v} vs {w}");
            }
        }
    }
}

#[test]
fn greedy_decode_is_argmax_of_reference() {
    let cfg = TransformerConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 256,
        max_seq_len: 12,
    };
    let model = ModelWeights::random(cfg, 2).unwrap();
    let prompt = vec![72u32, 105, 33];
    let out = greedy_decode(&model, &prompt, 5).unwrap();
    let mut seq = prompt.clone();
    for &tok in &out {
        let logits = reference_logits(&model, &seq);
        let last = logits.last().unwrap();
        let arg = (0..256).fold(0, |b, i| if last[i] > last[b] { i } else { b });
        assert_eq!(tok as usize, arg);
        seq.push(tok);
    }
}

#[test]
fn pruned_projection_uses_the_factors() {
    let cfg = TransformerConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 256,
        max_seq_len: 12,
    };
    let model = ModelWeights::random(cfg, 6).unwrap();
    let corpus: Vec<u32> = (0..600).map(|i| (i * 37 % 251) as u32).collect();
    let cap = capture_calibration(&model, &corpus, 600).unwrap();
    let cache = build_cache(&model, &cap, &FactorSet::canonical(), &FactorizeOptions::default()).unwrap();
    let pruner = Pruner::new(&model, &cache).unwrap();
    // Substituting B·C into a copy of the weights gives the same logits up to
    // the association order of the products.
    let p = PruningVector::new(vec![3, 5, 2, 7]);
    let net = pruner.assemble(&p).unwrap();
    let mut dense = model.clone();
    for site in cfg.sites() {
        if let Some(f) = net.factor(site) {
            *dense.site_weight_mut(site) = f.reconstruct();
        }
    }
    let tokens = [5u32, 200, 17, 99, 3];
    let (a, _) = forward(&net, &tokens, &[]).unwrap();
    let (b, _) = forward(&dense, &tokens, &[]).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);
}
