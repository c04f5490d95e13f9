//! Per-site pruning levels by genetic search, followed by bottleneck analysis
//! and a report bundle.

use sieve_core::calibrate::{build_cache, capture_calibration, FactorSet};
use sieve_core::corpus::{agreement_task, synthetic_text};
use sieve_core::factorize::FactorizeOptions;
use sieve_core::model::{tokenizer, ModelWeights, SiteId, TransformerConfig};
use sieve_core::report::{build_report, emit_report, ga_run, write_history};
use sieve_core::search::{GaConfig, TaskObjective};

fn main() -> sieve_core::Result<()> {
    let config = TransformerConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 256,
        max_seq_len: 16,
    };
    let model = ModelWeights::random(config, 3)?;
    let corpus = tokenizer::encode(synthetic_text(8000, 3));
    let capture = capture_calibration(&model, &corpus, 4096)?;
    let cache = build_cache(&model, &capture, &FactorSet::canonical(), &FactorizeOptions::default())?;
    let task = agreement_task(32, 8, 3, 0.1, 3);
    let objective = TaskObjective::new(&model, &cache, &task)?;

    let cfg = GaConfig {
        population: 40,
        seed: 7,
        ..GaConfig::default()
    };
    let (run, history) = ga_run(&model, &cache, &objective, &cfg, &[], &mut |_| Ok(()))?;
    let factors = run.best.factors(&run.factor_set)?;
    println!(
        "{} generations, best accuracy {:.3} (a0 {:.3}), compression {:.3}",
        run.ga.as_ref().map_or(0, |g| g.generations),
        run.accuracy,
        run.a0,
        run.compression
    );
    for (i, f) in factors.iter().enumerate() {
        println!("  {:<8} {f}", SiteId::from_index(i).to_string());
    }

    let report = build_report(&run, &history)?;
    if let Some(b) = &report.bottlenecks {
        let names: Vec<String> = b.bottlenecks.iter().map(|&i| SiteId::from_index(i).to_string()).collect();
        println!("bottlenecks over {} top chromosomes: {names:?}", b.qualifying);
    }
    let dir = std::env::temp_dir().join("sieve-ga-report");
    write_history(&history, &std::env::temp_dir().join("sieve-ga-history.jsonl"))?;
    emit_report(&report, &history, &dir)?;
    println!("report written to {}", dir.display());
    Ok(())
}
