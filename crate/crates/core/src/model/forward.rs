use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ModelWeights, SiteId, SiteKind, TransformerConfig};

/// Greedy decoding stops when this byte is produced.
pub const STOP_TOKEN: u32 = b'\n' as u32;

const LN_EPS: f64 = 1e-5;

/// Anything that can run the transformer: a dense model, or a pruned view
/// that swaps some projections for low-rank factors.
pub trait Network: Sync {
    fn weights(&self) -> &ModelWeights;

    /// Applies the site's projection to token rows: `x · Wᵀ` for
    /// `x` of shape `T × d_in`, giving `T × d_out`.
    fn project(&self, site: SiteId, x: &Matrix) -> Result<Matrix>;

    fn config(&self) -> &TransformerConfig {
        &self.weights().config
    }
}

impl Network for ModelWeights {
    fn weights(&self) -> &ModelWeights {
        self
    }

    fn project(&self, site: SiteId, x: &Matrix) -> Result<Matrix> {
        x.matmul_t(self.site_weight(site))
    }
}

/// Per-site calibration pair with tokens as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteCapture {
    /// `d_in × T`.
    pub x: Matrix,
    /// `d_out × T`.
    pub y: Matrix,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationCapture {
    pub sites: BTreeMap<SiteId, SiteCapture>,
    pub tokens: usize,
}

/// Accumulates tapped operands across forward passes.
#[derive(Debug, Default)]
pub struct CaptureRecorder {
    // (d_in, d_out, input rows, output rows), both token-major.
    buffers: BTreeMap<SiteId, (usize, usize, Vec<f64>, Vec<f64>)>,
    tokens: usize,
}

impl CaptureRecorder {
    pub fn new(config: &TransformerConfig, taps: &[SiteId]) -> Self {
        let buffers = taps
            .iter()
            .map(|&s| {
                let (d_in, d_out) = config.site_dims(s.kind);
                (s, (d_in, d_out, Vec::new(), Vec::new()))
            })
            .collect();
        Self { buffers, tokens: 0 }
    }

    fn record(&mut self, site: SiteId, x: &Matrix, y: &Matrix) {
        if let Some((_, _, xs, ys)) = self.buffers.get_mut(&site) {
            xs.extend_from_slice(x.as_slice());
            ys.extend_from_slice(y.as_slice());
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn finish(self) -> ActivationCapture {
        let tokens = self.tokens;
        let sites = self
            .buffers
            .into_iter()
            .map(|(site, (d_in, d_out, xs, ys))| {
                let x = Matrix::from_vec(tokens, d_in, xs).expect("rows recorded per token");
                let y = Matrix::from_vec(tokens, d_out, ys).expect("rows recorded per token");
                (
                    site,
                    SiteCapture {
                        x: x.transpose(),
                        y: y.transpose(),
                    },
                )
            })
            .collect();
        ActivationCapture { sites, tokens }
    }
}

/// Row-wise LayerNorm with learned gain and bias.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> Matrix {
    let d = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

/// GeLU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Causal softmax attention weights for one head, `T × T`, scaled by
/// `1/√head_dim`. Entries above the diagonal are zero.
pub fn causal_attention_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.shape() != k.shape() {
        return Err(Error::mismatch("attention", q.shape(), k.shape()));
    }
    let t = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut w = Matrix::zeros(t, t);
    for i in 0..t {
        let qi = q.row(i);
        let row = w.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
            let kj = k.row(j);
            let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            *slot = s;
            max = max.max(s);
        }
        let mut total = 0.0;
        for slot in row.iter_mut().take(i + 1) {
            *slot = (*slot - max).exp();
            total += *slot;
        }
        for slot in row.iter_mut().take(i + 1) {
            *slot /= total;
        }
    }
    Ok(w)
}

/// Single-head causal scaled dot-product attention over `T × head_dim` inputs.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if v.rows() != k.rows() {
        return Err(Error::mismatch("attention", k.shape(), v.shape()));
    }
    let w = causal_attention_weights(q, k)?;
    w.matmul(v)
}

fn multi_head_with(
    x: &Matrix,
    n_heads: usize,
    mut project: impl FnMut(SiteKind, &Matrix) -> Result<Matrix>,
) -> Result<Matrix> {
    let d = x.cols();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "d_model {d} not divisible by {n_heads} heads"
        )));
    }
    let qkv = project(SiteKind::Qkv, x)?;
    if qkv.cols() != 3 * d {
        return Err(Error::mismatch("multi_head", x.shape(), qkv.shape()));
    }
    let hd = d / n_heads;
    let mut concat = Matrix::zeros(x.rows(), d);
    for h in 0..n_heads {
        let q = qkv.column_block(h * hd, (h + 1) * hd);
        let k = qkv.column_block(d + h * hd, d + (h + 1) * hd);
        let v = qkv.column_block(2 * d + h * hd, 2 * d + (h + 1) * hd);
        let head = attention(&q, &k, &v)?;
        for r in 0..x.rows() {
            concat.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(head.row(r));
        }
    }
    project(SiteKind::Out, &concat)
}

/// Multi-head causal self-attention with dense projections.
pub fn multi_head(x: &Matrix, w_qkv: &Matrix, w_o: &Matrix, n_heads: usize) -> Result<Matrix> {
    multi_head_with(x, n_heads, |kind, input| match kind {
        SiteKind::Qkv => input.matmul_t(w_qkv),
        _ => input.matmul_t(w_o),
    })
}

fn ffn_with(
    x: &Matrix,
    b_1: &[f64],
    b_2: &[f64],
    mut project: impl FnMut(SiteKind, &Matrix) -> Result<Matrix>,
) -> Result<Matrix> {
    let mut h = project(SiteKind::Ffn1, x)?;
    h.add_row_vector(b_1)?;
    let h = h.map(gelu);
    let mut out = project(SiteKind::Ffn2, &h)?;
    out.add_row_vector(b_2)?;
    Ok(out)
}

/// `GeLU(x·W₁ᵀ + b₁)·W₂ᵀ + b₂` over token rows.
pub fn ffn(x: &Matrix, w_1: &Matrix, b_1: &[f64], w_2: &Matrix, b_2: &[f64]) -> Result<Matrix> {
    ffn_with(x, b_1, b_2, |kind, input| match kind {
        SiteKind::Ffn1 => input.matmul_t(w_1),
        _ => input.matmul_t(w_2),
    })
}

fn validate_tokens(config: &TransformerConfig, tokens: &[u32]) -> Result<()> {
    if tokens.len() > config.max_seq_len {
        return Err(Error::ContextOverflow {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some((position, &token)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= config.vocab_size)
    {
        return Err(Error::InvalidToken {
            token,
            position,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Final-normed hidden states, `T × d_model`.
fn hidden_states<N: Network + ?Sized>(
    net: &N,
    tokens: &[u32],
    mut recorder: Option<&mut CaptureRecorder>,
) -> Result<Matrix> {
    let w = net.weights();
    let cfg = &w.config;
    validate_tokens(cfg, tokens)?;
    let d = cfg.d_model;
    let mut x = Matrix::zeros(tokens.len(), d);
    for (pos, &t) in tokens.iter().enumerate() {
        let e = w.tok_emb.row(t as usize);
        let p = w.pos_emb.row(pos);
        for ((dst, a), b) in x.row_mut(pos).iter_mut().zip(e).zip(p) {
            *dst = a + b;
        }
    }

    for (layer, lw) in w.layers.iter().enumerate() {
        let mut project = |kind: SiteKind, input: &Matrix| -> Result<Matrix> {
            let site = SiteId { layer, kind };
            let y = net.project(site, input)?;
            if let Some(rec) = recorder.as_deref_mut() {
                rec.record(site, input, &y);
            }
            Ok(y)
        };
        let h = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias);
        let attn = multi_head_with(&h, cfg.n_heads, &mut project)?;
        x = x.add(&attn)?;
        let h = layer_norm(&x, &lw.ln2_gain, &lw.ln2_bias);
        let f = ffn_with(&h, &lw.b_1, &lw.b_2, &mut project)?;
        x = x.add(&f)?;
    }
    if let Some(rec) = recorder {
        rec.tokens += tokens.len();
    }
    Ok(layer_norm(&x, &w.lnf_gain, &w.lnf_bias))
}

/// Logits for every position (`T × vocab`) and, when `taps` is nonempty,
/// the exact operand pairs of each tapped projection.
pub fn forward<N: Network + ?Sized>(
    net: &N,
    tokens: &[u32],
    taps: &[SiteId],
) -> Result<(Matrix, Option<ActivationCapture>)> {
    if taps.is_empty() {
        let h = hidden_states(net, tokens, None)?;
        return Ok((h.matmul_t(&net.weights().unembed)?, None));
    }
    let mut rec = CaptureRecorder::new(net.config(), taps);
    let h = hidden_states(net, tokens, Some(&mut rec))?;
    Ok((h.matmul_t(&net.weights().unembed)?, Some(rec.finish())))
}

impl CaptureRecorder {
    /// Runs one sequence, recording tapped sites.
    pub fn run<N: Network + ?Sized>(&mut self, net: &N, tokens: &[u32]) -> Result<()> {
        hidden_states(net, tokens, Some(self)).map(|_| ())
    }
}

fn next_token<N: Network + ?Sized>(net: &N, seq: &[u32]) -> Result<u32> {
    let h = hidden_states(net, seq, None)?;
    let last = h.row_block(h.rows() - 1, h.rows());
    let logits = last.matmul_t(&net.weights().unembed)?;
    // Strict comparison keeps the lowest id among ties.
    let mut best = 0usize;
    for (i, &v) in logits.as_slice().iter().enumerate() {
        if v > logits.as_slice()[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

fn check_context(config: &TransformerConfig, prompt: &[u32], max_new: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be nonempty".into()));
    }
    let needed = prompt.len() + max_new.saturating_sub(1);
    if needed > config.max_seq_len {
        return Err(Error::ContextOverflow {
            len: needed,
            max: config.max_seq_len,
        });
    }
    Ok(())
}

/// Greedy continuation of `prompt`: up to `max_new` argmax tokens, stopping
/// before [`STOP_TOKEN`]. The stop token itself is not returned.
pub fn greedy_decode<N: Network + ?Sized>(net: &N, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    check_context(net.config(), prompt, max_new)?;
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let t = next_token(net, &seq)?;
        if t == STOP_TOKEN {
            break;
        }
        out.push(t);
        seq.push(t);
    }
    Ok(out)
}

/// Whether `greedy_decode(net, prompt, max_new) == expected`, stopping at
/// the first divergent token.
pub fn decode_agrees<N: Network + ?Sized>(
    net: &N,
    prompt: &[u32],
    expected: &[u32],
    max_new: usize,
) -> Result<bool> {
    check_context(net.config(), prompt, max_new)?;
    if expected.len() > max_new || expected.contains(&STOP_TOKEN) {
        return Ok(false);
    }
    let mut seq = prompt.to_vec();
    for &want in expected {
        if next_token(net, &seq)? != want {
            return Ok(false);
        }
        seq.push(want);
    }
    if expected.len() == max_new {
        return Ok(true);
    }
    Ok(next_token(net, &seq)? == STOP_TOKEN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius_rel_error, seeded_rng};
    use crate::model::ModelWeights;

    fn cfg(n_layers: usize) -> TransformerConfig {
        TransformerConfig {
            n_layers,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 256,
            max_seq_len: 12,
        }
    }

    #[test]
    fn no_taps_no_capture() {
        let m = ModelWeights::random(cfg(1), 3).unwrap();
        let (logits, cap) = forward(&m, &[1, 2, 3], &[]).unwrap();
        assert_eq!(logits.shape(), (3, 256));
        assert!(cap.is_none());
    }

    #[test]
    fn zeroed_updates_leave_residual_stream() {
        let mut m = ModelWeights::random(cfg(1), 5).unwrap();
        m.layers[0].w_o = Matrix::zeros(8, 8);
        m.layers[0].w_2 = Matrix::zeros(8, 12);
        m.layers[0].b_2 = vec![0.0; 8];
        let tokens = [10, 200, 33];
        let (logits, _) = forward(&m, &tokens, &[]).unwrap();
        for (pos, &t) in tokens.iter().enumerate() {
            let x: Vec<f64> = m
                .tok_emb
                .row(t as usize)
                .iter()
                .zip(m.pos_emb.row(pos))
                .map(|(a, b)| a + b)
                .collect();
            let x = Matrix::from_vec(1, 8, x).unwrap();
            let expected = layer_norm(&x, &m.lnf_gain, &m.lnf_bias).matmul_t(&m.unembed).unwrap();
            assert_eq!(expected.row(0), logits.row(pos));
        }
    }

    #[test]
    fn single_token_attention_returns_value() {
        let mut rng = seeded_rng(1);
        let q = Matrix::random_normal(1, 4, 1.0, &mut rng);
        let k = Matrix::random_normal(1, 4, 1.0, &mut rng);
        let v = Matrix::random_normal(1, 4, 1.0, &mut rng);
        assert_eq!(attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn identical_keys_give_prefix_mean() {
        let mut rng = seeded_rng(2);
        let q = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let key = Matrix::random_normal(1, 3, 1.0, &mut rng);
        let k = Matrix::from_fn(5, 3, |_, c| key[(0, c)]);
        let v = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..5 {
            for c in 0..3 {
                let mean: f64 = (0..=i).map(|j| v[(j, c)]).sum::<f64>() / (i + 1) as f64;
                assert!((out[(i, c)] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = seeded_rng(8);
        let (q, k, v) = (
            Matrix::random_normal(4, 5, 1.0, &mut rng),
            Matrix::random_normal(4, 5, 1.0, &mut rng),
            Matrix::random_normal(4, 5, 1.0, &mut rng),
        );
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..4 {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..5).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() / 5f64.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..5 {
                let want: f64 = (0..=i).map(|j| scores[j].exp() / z * v[(j, c)]).sum();
                assert!((out[(i, c)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = seeded_rng(4);
        let q = Matrix::random_normal(6, 4, 3.0, &mut rng);
        let k = Matrix::random_normal(6, 4, 3.0, &mut rng);
        let w = causal_attention_weights(&q, &k).unwrap();
        for i in 0..6 {
            let s: f64 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(w.row(i)[i + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn ffn_bias_cases_and_scalar_oracle() {
        let mut rng = seeded_rng(6);
        let w1 = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let w2 = Matrix::random_normal(4, 6, 1.0, &mut rng);
        let b2 = vec![0.5, -1.0, 2.0, 0.25];
        let zero = Matrix::zeros(3, 4);
        let out = ffn(&zero, &w1, &[0.0; 6], &w2, &b2).unwrap();
        assert!(out.row(2) == b2.as_slice());
        let x = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let out = ffn(&x, &w1, &[0.1; 6], &Matrix::zeros(4, 6), &b2).unwrap();
        assert!(out.row(1) == b2.as_slice());

        let b1: Vec<f64> = (0..6).map(|i| i as f64 * 0.1 - 0.2).collect();
        let out = ffn(&x, &w1, &b1, &w2, &b2).unwrap();
        for t in 0..3 {
            let hidden: Vec<f64> = (0..6)
                .map(|h| {
                    let pre: f64 = (0..4).map(|i| x[(t, i)] * w1[(h, i)]).sum::<f64>() + b1[h];
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    0.5 * pre * (1.0 + (c * (pre + 0.044715 * pre.powi(3))).tanh())
                })
                .collect();
            for o in 0..4 {
                let want: f64 = (0..6).map(|h| hidden[h] * w2[(o, h)]).sum::<f64>() + b2[o];
                assert!((out[(t, o)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_head_rejects_bad_split() {
        let x = Matrix::zeros(2, 6);
        let w = Matrix::zeros(18, 6);
        assert!(multi_head(&x, &w, &Matrix::zeros(6, 6), 4).is_err());
    }

    #[test]
    fn capture_fidelity() {
        let m = ModelWeights::random(cfg(2), 7).unwrap();
        let taps: Vec<_> = m.config.sites().collect();
        let (_, cap) = forward(&m, &[5, 6, 7, 8, 9], &taps).unwrap();
        let cap = cap.unwrap();
        assert_eq!(cap.tokens, 5);
        for (site, pair) in &cap.sites {
            assert_eq!(pair.x.cols(), 5);
            let y = m.site_weight(*site).matmul(&pair.x).unwrap();
            assert!(frobenius_rel_error(&y, &pair.y).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn input_validation() {
        let m = ModelWeights::random(cfg(1), 3).unwrap();
        assert!(matches!(forward(&m, &[0; 13], &[]), Err(Error::ContextOverflow { .. })));
        assert!(matches!(forward(&m, &[1, 256], &[]), Err(Error::InvalidToken { position: 1, .. })));
        assert!(greedy_decode(&m, &[], 3).is_err());
        assert!(matches!(greedy_decode(&m, &[1; 10], 4), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn early_exit_agrees_with_full_decode() {
        for seed in 0..6 {
            let m = ModelWeights::random(cfg(2), seed).unwrap();
            let prompt = [seed as u32 + 65, 66, 67];
            let full = greedy_decode(&m, &prompt, 5).unwrap();
            assert!(decode_agrees(&m, &prompt, &full, 5).unwrap());
            let mut other = full.clone();
            if other.is_empty() {
                other.push(1);
            } else {
                other[0] ^= 1;
            }
            assert!(!decode_agrees(&m, &prompt, &other, 5).unwrap());
            if full.len() > 1 {
                assert!(!decode_agrees(&m, &prompt, &full[..full.len() - 1], 5).unwrap());
            }
        }
    }
}
