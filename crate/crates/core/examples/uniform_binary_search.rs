//! Find the most aggressive uniform pruning level that holds accuracy, then
//! write the whole accuracy-vs-pruning curve as CSV.

use sieve_core::calibrate::{build_cache, capture_calibration, FactorSet};
use sieve_core::corpus::{agreement_task, synthetic_text};
use sieve_core::factorize::FactorizeOptions;
use sieve_core::model::{tokenizer, ModelWeights, TransformerConfig};
use sieve_core::report::{sweep_uniform, uniform_run, write_sweep_csv};
use sieve_core::search::TaskObjective;

fn main() -> sieve_core::Result<()> {
    let config = TransformerConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab_size: 256,
        max_seq_len: 16,
    };
    let model = ModelWeights::random(config, 1)?;
    let corpus = tokenizer::encode(synthetic_text(8000, 1));
    let capture = capture_calibration(&model, &corpus, 6000)?;
    let cache = build_cache(&model, &capture, &FactorSet::canonical(), &FactorizeOptions::default())?;
    let task = agreement_task(64, 8, 4, 0.1, 2);
    let objective = TaskObjective::new(&model, &cache, &task)?;

    let run = uniform_run(&model, &cache, &objective)?;
    let outcome = run.uniform.as_ref().expect("uniform run");
    println!(
        "a* {:.3}, a0 {:.3}: level {} (factor {}), accuracy {:.3}, compression {:.3}, {} evaluations",
        run.a_star, run.a0, outcome.level, outcome.factor, run.accuracy, run.compression, outcome.evaluations
    );

    let curve = sweep_uniform(&objective, &(0..10).collect::<Vec<_>>())?;
    let path = std::env::temp_dir().join("sieve-uniform-sweep.csv");
    write_sweep_csv(&curve, &path)?;
    for p in &curve {
        println!("{:>5.1}% pruned  accuracy {:.3}", 100.0 * p.compression, p.accuracy);
    }
    println!("curve written to {}", path.display());
    Ok(())
}
