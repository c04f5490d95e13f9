//! Accuracy at a fixed uniform level as the calibration set grows.

use sieve_core::calibrate::FactorSet;
use sieve_core::corpus::{agreement_task, synthetic_text};
use sieve_core::factorize::FactorizeOptions;
use sieve_core::model::{tokenizer, ModelWeights, TransformerConfig};
use sieve_core::report::calibration_sweep;

fn main() -> sieve_core::Result<()> {
    let config = TransformerConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab_size: 256,
        max_seq_len: 32,
    };
    let model = ModelWeights::random(config, 5)?;
    let corpus = tokenizer::encode(synthetic_text(40_000, 5));
    let task = agreement_task(48, 8, 4, 0.05, 5);
    let sizes = [64, 256, 1024, 4096, 16_384];
    let opts = FactorizeOptions {
        batch_tokens: 1024,
        ..FactorizeOptions::default()
    };
    for p in calibration_sweep(&model, &corpus, &sizes, &task, &FactorSet::canonical(), 4, &opts)? {
        println!("{:>6} tokens  accuracy {:.3}", p.tokens, p.accuracy);
    }
    Ok(())
}
