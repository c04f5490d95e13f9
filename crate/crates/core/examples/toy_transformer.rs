//! Build a seeded model, decode a prompt, and look at one site's captured
//! activations and the model's cost.

use sieve_core::calibrate::{FactorSet, PruningVector};
use sieve_core::model::{
    count_params, estimate_flops_per_token, forward, greedy_decode, tokenizer, ModelWeights, SiteId, SiteKind,
    TransformerConfig,
};

fn main() -> sieve_core::Result<()> {
    let config = TransformerConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 256,
        max_seq_len: 32,
    };
    let model = ModelWeights::random(config, 0)?;
    let prompt = tokenizer::encode("the model keeps");
    let out = greedy_decode(&model, &prompt, 8)?;
    println!("continuation: {:?}", String::from_utf8_lossy(&tokenizer::decode(&out)?));

    let site = SiteId::new(1, SiteKind::Ffn1);
    let (logits, capture) = forward(&model, &prompt, &[site])?;
    let cap = &capture.expect("taps requested").sites[&site];
    println!("logits {:?}, {site} X {:?} Y {:?}", logits.shape(), cap.x.shape(), cap.y.shape());

    let set = FactorSet::canonical();
    let half = PruningVector::uniform(config.n_sites(), 4);
    println!(
        "params {} (sites {}), flops/token dense {} at 0.5 {}",
        count_params(&model, false),
        count_params(&model, true),
        estimate_flops_per_token(&config, None)?,
        estimate_flops_per_token(&config, Some((&half, &set)))?
    );
    Ok(())
}
