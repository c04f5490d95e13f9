//! Pruning-level search under an accuracy tolerance.
//!
//! A search maximizes compression subject to `a ≥ a₀ = (1 − ε)·a*`, where
//! `a*` is the unpruned model's accuracy on the task. Two strategies are
//! provided: a binary search over a single level applied to every site
//! ([`binary_search_uniform`]) and a genetic algorithm over per-site levels
//! ([`ga_search`]).

mod binary;
mod bottleneck;
mod ga;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{compression_ratio, AdapterCache, FactorSet, Pruner, PruningVector};
use crate::error::{Error, Result};
use crate::model::{decode_agrees, greedy_decode, tokenizer, ModelWeights, Network, TransformerConfig, STOP_TOKEN};

pub use binary::{binary_search_levels, binary_search_uniform, UniformSearchOutcome};
pub use bottleneck::{bottleneck_analysis, BottleneckReport, TOP_FITNESS_WINDOW};
pub use ga::{ga_search, ga_search_with, read_history, Chromosome, GaConfig, GaOutcome, HistoryRecord};

/// Exponent gain of the accuracy term in the fitness function.
pub const PENALTY_GAIN: f64 = 50.0;
/// The exponent is clamped here before `exp` so fitness stays finite.
pub const EXPONENT_CLAMP: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskMode {
    /// A prompt is correct when the decode equals its expected string.
    ExactMatch,
    /// A prompt is correct when the decode equals the unpruned model's.
    BaselineAgreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub mode: TaskMode,
    pub prompts: Vec<String>,
    #[serde(default)]
    pub expected: Vec<String>,
    pub max_new_tokens: usize,
    pub epsilon: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() || self.prompts.iter().any(String::is_empty) {
            return Err(Error::InvalidArgument("task needs nonempty prompts".into()));
        }
        if self.mode == TaskMode::ExactMatch && self.expected.len() != self.prompts.len() {
            return Err(Error::InvalidArgument(format!(
                "{} expected strings for {} prompts",
                self.expected.len(),
                self.prompts.len()
            )));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        Ok(())
    }

    pub fn prompt_tokens(&self) -> Vec<Vec<u32>> {
        self.prompts.iter().map(tokenizer::encode).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let task: TaskSpec = serde_json::from_slice(&text)?;
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub verdicts: Vec<bool>,
}

impl EvalResult {
    pub fn from_verdicts(verdicts: Vec<bool>) -> Self {
        let correct = verdicts.iter().filter(|&&v| v).count();
        Self {
            accuracy: correct as f64 / verdicts.len() as f64,
            verdicts,
        }
    }
}

/// Greedy decodes of every prompt; the reference for agreement tasks.
pub fn baseline_outputs<N: Network + ?Sized>(net: &N, task: &TaskSpec) -> Result<Vec<Vec<u32>>> {
    task.prompt_tokens()
        .par_iter()
        .map(|p| greedy_decode(net, p, task.max_new_tokens))
        .collect()
}

fn targets(task: &TaskSpec, baseline: Option<&[Vec<u32>]>) -> Result<Vec<Vec<u32>>> {
    match task.mode {
        TaskMode::ExactMatch => Ok(task
            .expected
            .iter()
            .map(|e| {
                let mut t = tokenizer::encode(e);
                if t.last() == Some(&STOP_TOKEN) {
                    t.pop();
                }
                t
            })
            .collect()),
        TaskMode::BaselineAgreement => {
            let b = baseline.ok_or(Error::MissingBaseline)?;
            if b.len() != task.prompts.len() {
                return Err(Error::InvalidArgument("baseline does not cover every prompt".into()));
            }
            Ok(b.to_vec())
        }
    }
}

fn evaluate_targets<N: Network + ?Sized>(
    net: &N,
    prompts: &[Vec<u32>],
    targets: &[Vec<u32>],
    max_new: usize,
) -> Result<EvalResult> {
    let verdicts = prompts
        .par_iter()
        .zip(targets)
        .map(|(p, t)| decode_agrees(net, p, t, max_new))
        .collect::<Result<Vec<bool>>>()?;
    Ok(EvalResult::from_verdicts(verdicts))
}

/// Task accuracy = correct prompts / prompts. Deterministic.
pub fn evaluate<N: Network + ?Sized>(
    net: &N,
    task: &TaskSpec,
    baseline: Option<&[Vec<u32>]>,
) -> Result<EvalResult> {
    task.validate()?;
    let targets = targets(task, baseline)?;
    evaluate_targets(net, &task.prompt_tokens(), &targets, task.max_new_tokens)
}

/// `a₀ = (1 − ε)·a*`.
pub fn threshold_accuracy(a_star: f64, epsilon: f64) -> f64 {
    (1.0 - epsilon) * a_star
}

/// `F = c·(1 + e^{gain·(a − a₀)})`, exponent clamped at +60.
pub fn fitness_with_gain(compression: f64, accuracy: f64, a0: f64, gain: f64) -> f64 {
    let exponent = (gain * (accuracy - a0)).min(EXPONENT_CLAMP);
    compression * (1.0 + exponent.exp())
}

pub fn fitness_value(compression: f64, accuracy: f64, a0: f64) -> f64 {
    fitness_with_gain(compression, accuracy, a0, PENALTY_GAIN)
}

/// Fitness of a pruning vector at measured accuracy `a`.
pub fn fitness(p: &PruningVector, a: f64, a0: f64, config: &TransformerConfig, set: &FactorSet) -> Result<f64> {
    Ok(fitness_value(compression_ratio(p, config, set)?, a, a0))
}

/// Accuracy and compression of one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub accuracy: f64,
    pub compression: f64,
}

/// What a search optimizes: a map from pruning vectors to measurements.
/// Implementations must be pure so that concurrent evaluation order does
/// not matter.
pub trait PruningObjective: Sync {
    fn n_sites(&self) -> usize;
    fn factor_set(&self) -> &FactorSet;
    fn measure(&self, p: &PruningVector) -> Result<Measurement>;
}

/// The real objective: assemble from the cache, decode, score.
pub struct TaskObjective<'a> {
    pruner: Pruner<'a>,
    task: &'a TaskSpec,
    prompts: Vec<Vec<u32>>,
    targets: Vec<Vec<u32>>,
    a_star: f64,
}

impl<'a> TaskObjective<'a> {
    /// Decodes the baseline (agreement mode) and scores the unpruned model.
    pub fn new(model: &'a ModelWeights, cache: &'a AdapterCache, task: &'a TaskSpec) -> Result<Self> {
        task.validate()?;
        let pruner = Pruner::new(model, cache)?;
        let baseline = match task.mode {
            TaskMode::BaselineAgreement => Some(baseline_outputs(model, task)?),
            TaskMode::ExactMatch => None,
        };
        let targets = targets(task, baseline.as_deref())?;
        let prompts = task.prompt_tokens();
        let a_star = evaluate_targets(model, &prompts, &targets, task.max_new_tokens)?.accuracy;
        Ok(Self {
            pruner,
            task,
            prompts,
            targets,
            a_star,
        })
    }

    pub fn a_star(&self) -> f64 {
        self.a_star
    }

    pub fn a0(&self) -> f64 {
        threshold_accuracy(self.a_star, self.task.epsilon)
    }

    pub fn task(&self) -> &TaskSpec {
        self.task
    }

    pub fn pruner(&self) -> &Pruner<'a> {
        &self.pruner
    }

    pub fn evaluate(&self, p: &PruningVector) -> Result<EvalResult> {
        let net = self.pruner.assemble(p)?;
        evaluate_targets(&net, &self.prompts, &self.targets, self.task.max_new_tokens)
    }
}

impl PruningObjective for TaskObjective<'_> {
    fn n_sites(&self) -> usize {
        self.pruner.model.config.n_sites()
    }

    fn factor_set(&self) -> &FactorSet {
        &self.pruner.cache.factor_set
    }

    fn measure(&self, p: &PruningVector) -> Result<Measurement> {
        let accuracy = self.evaluate(p)?.accuracy;
        let compression = compression_ratio(p, &self.pruner.model.config, self.factor_set())?;
        Ok(Measurement { accuracy, compression })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_fixtures() {
        assert!((threshold_accuracy(0.9, 0.05) - 0.855).abs() < 1e-15);
        assert_eq!(threshold_accuracy(0.7, 0.0), 0.7);
        assert!((threshold_accuracy(0.66, 0.05) - 0.627).abs() < 1e-15);
    }

    #[test]
    fn fitness_fixtures() {
        assert!((fitness_value(0.4, 0.7, 0.7) - 0.8).abs() < 1e-12);
        let below = fitness_value(0.5, 0.5, 0.7);
        assert!((below - 0.5 * (1.0 + (-10.0f64).exp())).abs() < 1e-12);
        let above = fitness_value(0.5, 0.72, 0.7);
        assert!((above - 0.5 * (1.0 + 1.0f64.exp())).abs() < 1e-9);
        assert!(fitness_value(0.5, 10.0, 0.0).is_finite());
    }

    #[test]
    fn task_validation() {
        let mut t = TaskSpec {
            mode: TaskMode::ExactMatch,
            prompts: vec!["a".into(), "b".into()],
            expected: vec!["x".into()],
            max_new_tokens: 2,
            epsilon: 0.05,
        };
        assert!(t.validate().is_err());
        t.expected.push("y".into());
        assert!(t.validate().is_ok());
        t.epsilon = 1.0;
        assert!(t.validate().is_err());
        t.epsilon = 0.0;
        t.prompts.clear();
        assert!(t.validate().is_err());
    }

    #[test]
    fn task_json_shape() {
        let t: TaskSpec = serde_json::from_str(
            r#"{"mode":"BASELINE_AGREEMENT","prompts":["hi"],"max_new_tokens":3,"epsilon":0.05}"#,
        )
        .unwrap();
        assert_eq!(t.mode, TaskMode::BaselineAgreement);
        assert!(t.expected.is_empty());
    }
}
