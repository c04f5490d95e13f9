use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use sieve_core::calibrate::{
    build_cache, capture_calibration, load_cache, load_capture, save_cache, save_capture,
    FactorSet, Pruner, PruningVector,
};
use sieve_core::corpus::{agreement_task, read_corpus, synthetic_text};
use sieve_core::factorize::FactorizeOptions;
use sieve_core::model::{load_model, save_model, ModelWeights, TransformerConfig};
use sieve_core::report::{
    build_report, calibration_sweep, emit_report, ga_run, sweep_uniform, uniform_run, write_calibration_csv,
    write_sweep_csv, RunRecord,
};
use sieve_core::search::{evaluate, read_history, GaConfig, TaskObjective, TaskSpec};

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_INPUT: u8 = 3;

#[derive(Parser)]
#[command(name = "sieve", version, about = "Low-rank pruning of small transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Up,
    Ga,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Uniform,
    Calibration,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random model.
    Init {
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 128)]
        d_ff: usize,
        #[arg(long, default_value_t = 64)]
        max_seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic text corpus.
    Corpus {
        #[arg(long, default_value_t = 200_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a baseline-agreement task over synthetic prompts.
    Task {
        #[arg(long, default_value_t = 64)]
        prompts: usize,
        #[arg(long, default_value_t = 16)]
        prompt_len: usize,
        #[arg(long, default_value_t = 8)]
        max_new_tokens: usize,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record calibration activations for every site.
    Capture {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 200_000)]
        tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Factor every site at every level.
    Cache {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        capture: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fopts: FactorizeArgs,
    },
    /// Search pruning levels; writes run.json, best_vector.json and, for GA, history.jsonl.
    Search {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// Overrides the task file's tolerance.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        population: usize,
    },
    /// Task accuracy of the dense or a pruned model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pruning: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        task: PathBuf,
    },
    /// Turn a run directory into report.json and CSV tables.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy curves over uniform levels or calibration sizes.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Uniform sweep: cache to read.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Calibration sweep: corpus to draw from.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Calibration sweep: comma-separated token counts.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Calibration sweep: factor-set index to prune every site to.
        #[arg(long, default_value_t = 4)]
        level: usize,
        #[command(flatten)]
        fopts: FactorizeArgs,
    },
}

#[derive(clap::Args)]
struct FactorizeArgs {
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 5000)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl FactorizeArgs {
    fn options(&self) -> FactorizeOptions {
        FactorizeOptions {
            epochs: self.epochs,
            batch_tokens: self.batch,
            learning_rate: self.lr,
            seed: self.seed,
        }
    }
}

enum Outcome {
    Done,
    Infeasible,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INPUT) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Infeasible) => ExitCode::from(EXIT_INFEASIBLE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_task(path: &Path, epsilon: Option<f64>) -> anyhow::Result<TaskSpec> {
    let mut task = TaskSpec::load(path).with_context(|| format!("task {}", path.display()))?;
    if let Some(eps) = epsilon {
        task.epsilon = eps;
        task.validate()?;
    }
    Ok(task)
}

fn run(command: Command) -> anyhow::Result<Outcome> {
    match command {
        Command::Init {
            layers,
            d_model,
            heads,
            d_ff,
            max_seq_len,
            seed,
            out,
        } => {
            let config = TransformerConfig {
                n_layers: layers,
                d_model,
                n_heads: heads,
                d_ff,
                vocab_size: 256,
                max_seq_len,
            };
            save_model(&ModelWeights::random(config, seed)?, &out)?;
        }
        Command::Corpus { bytes, seed, out } => {
            std::fs::write(&out, synthetic_text(bytes, seed)).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Task {
            prompts,
            prompt_len,
            max_new_tokens,
            epsilon,
            seed,
            out,
        } => {
            let task = agreement_task(prompts, prompt_len, max_new_tokens, epsilon, seed);
            task.validate()?;
            task.save(&out)?;
        }
        Command::Capture {
            model,
            corpus,
            tokens,
            out,
        } => {
            let model = load_model(&model)?;
            let corpus = read_corpus(&corpus)?;
            let cap = capture_calibration(&model, &corpus, tokens)?;
            save_capture(&cap, &out)?;
            info!("captured {tokens} tokens, fingerprint {}", cap.calibration_fingerprint);
        }
        Command::Cache {
            model,
            capture,
            out,
            fopts,
        } => {
            let model = load_model(&model)?;
            let cap = load_capture(&capture)?;
            let cache = build_cache(&model, &cap, &FactorSet::canonical(), &fopts.options())?;
            save_cache(&cache, &out)?;
            info!(
                "cache {} with {} entries, {} degraded",
                cache.fingerprint()?,
                cache.built_count(),
                cache.degraded_count()
            );
        }
        Command::Search {
            mode,
            model,
            cache,
            task,
            epsilon,
            out,
            seed,
            population,
        } => {
            let model = load_model(&model)?;
            let cache = load_cache(&cache)?;
            let task = load_task(&task, epsilon)?;
            let objective = TaskObjective::new(&model, &cache, &task)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            info!("a* = {:.4}, a0 = {:.4}", objective.a_star(), objective.a0());
            let run = match mode {
                Mode::Up => uniform_run(&model, &cache, &objective)?,
                Mode::Ga => {
                    let cfg = GaConfig {
                        seed,
                        population,
                        ..GaConfig::default()
                    };
                    let history_path = out.join("history.jsonl");
                    let resume = if history_path.exists() {
                        read_history(&history_path)?
                    } else {
                        Vec::new()
                    };
                    if !resume.is_empty() {
                        info!("resuming from {} history records", resume.len());
                    }
                    let mut file = OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&history_path)
                        .with_context(|| format!("opening {}", history_path.display()))?;
                    let mut sink = |r: &sieve_core::search::HistoryRecord| -> sieve_core::Result<()> {
                        let line = serde_json::to_string(r)?;
                        writeln!(file, "{line}").map_err(|e| sieve_core::Error::Io {
                            path: history_path.clone(),
                            source: e,
                        })
                    };
                    ga_run(&model, &cache, &objective, &cfg, &resume, &mut sink)?.0
                }
            };
            run.save(&out.join("run.json"))?;
            write_json(&run.best, &out.join("best_vector.json"))?;
            info!(
                "best: accuracy {:.4}, compression {:.4}, feasible {}",
                run.accuracy, run.compression, run.feasible
            );
            if !run.feasible {
                return Ok(Outcome::Infeasible);
            }
        }
        Command::Eval {
            model,
            pruning,
            cache,
            task,
        } => {
            let model = load_model(&model)?;
            let task = load_task(&task, None)?;
            let baseline = sieve_core::search::baseline_outputs(&model, &task)?;
            let result = match pruning {
                None => evaluate(&model, &task, Some(&baseline))?,
                Some(vec_path) => {
                    let Some(cache_path) = cache else {
                        bail!("--pruning needs --cache");
                    };
                    let cache = load_cache(&cache_path)?;
                    let bytes = std::fs::read(&vec_path).with_context(|| format!("reading {}", vec_path.display()))?;
                    let p: PruningVector = serde_json::from_slice(&bytes).map_err(sieve_core::Error::from)?;
                    let pruner = Pruner::new(&model, &cache)?;
                    evaluate(&pruner.assemble(&p)?, &task, Some(&baseline))?
                }
            };
            println!("{}", result.accuracy);
        }
        Command::Report { run, out } => {
            let record = RunRecord::load(&run.join("run.json"))?;
            let history_path = run.join("history.jsonl");
            let history = if history_path.exists() {
                read_history(&history_path)?
            } else {
                Vec::new()
            };
            let report = build_report(&record, &history)?;
            emit_report(&report, &history, &out)?;
        }
        Command::Sweep {
            kind,
            model,
            task,
            out,
            cache,
            corpus,
            sizes,
            level,
            fopts,
        } => {
            let model = load_model(&model)?;
            let task = load_task(&task, None)?;
            match kind {
                SweepKind::Uniform => {
                    let Some(cache_path) = cache else {
                        bail!("uniform sweep needs --cache");
                    };
                    let cache = load_cache(&cache_path)?;
                    let objective = TaskObjective::new(&model, &cache, &task)?;
                    let levels: Vec<usize> = (0..cache.factor_set.len()).collect();
                    write_sweep_csv(&sweep_uniform(&objective, &levels)?, &out)?;
                }
                SweepKind::Calibration => {
                    let Some(corpus_path) = corpus else {
                        bail!("calibration sweep needs --corpus");
                    };
                    if sizes.is_empty() {
                        bail!("calibration sweep needs --sizes");
                    }
                    let corpus = read_corpus(&corpus_path)?;
                    let points = calibration_sweep(
                        &model,
                        &corpus,
                        &sizes,
                        &task,
                        &FactorSet::canonical(),
                        level,
                        &fopts.options(),
                    )?;
                    write_calibration_csv(&points, &out)?;
                }
            }
        }
    }
    Ok(Outcome::Done)
}

