//! Capture calibration activations, factor every site at every level, and
//! persist the cache.

use sieve_core::calibrate::{build_cache, capture_calibration, load_cache, save_cache, FactorSet};
use sieve_core::corpus::synthetic_text;
use sieve_core::factorize::FactorizeOptions;
use sieve_core::model::{tokenizer, ModelWeights, TransformerConfig};

fn main() -> sieve_core::Result<()> {
    let config = TransformerConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 256,
        max_seq_len: 32,
    };
    let model = ModelWeights::random(config, 1)?;
    let corpus = tokenizer::encode(synthetic_text(20_000, 0));
    let capture = capture_calibration(&model, &corpus, 8_000)?;
    let set = FactorSet::canonical();
    let opts = FactorizeOptions {
        batch_tokens: 1000,
        ..FactorizeOptions::default()
    };
    let cache = build_cache(&model, &capture, &set, &opts)?;
    println!("{} entries, {} degraded", cache.built_count(), cache.degraded_count());

    for site in config.sites().take(4) {
        let errs: Vec<String> = (1..set.len())
            .map(|l| match cache.entry(site, l).and_then(|e| e.factors()) {
                Some(f) => format!("{:.3}", f.calib_error),
                None => "-".into(),
            })
            .collect();
        println!("{:<8} {}", site.to_string(), errs.join(" "));
    }

    let dir = std::env::temp_dir().join("sieve-example-cache.siev");
    save_cache(&cache, &dir)?;
    let back = load_cache(&dir)?;
    println!("fingerprint {} (reloaded equal: {})", cache.fingerprint()?, back == cache);
    Ok(())
}
