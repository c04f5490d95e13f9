//! Genetic search over per-site retention levels.
//!
//! Each generation draws from its own RNG stream, seeded from the run seed
//! and the generation number. Together with the recorded population this
//! makes a run resumable from its history stream with bit-identical results.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::PruningVector;
use crate::error::{Error, Result};
use crate::linalg::{derive_seed, seeded_rng, SeededRng};
use crate::search::{fitness_with_gain, Measurement, PruningObjective, PENALTY_GAIN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub n_uniform_seeds: usize,
    pub crossover_prob: f64,
    /// Per-gene probability of moving one level up or down.
    pub mutation_prob: f64,
    pub penalty_gain: f64,
    pub stall_generations: usize,
    /// Relative improvement of the best fitness that resets the stall count.
    pub stall_improvement: f64,
    pub elitism_count: usize,
    /// Hard cap on generations, including generation 0.
    pub max_generations: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 100,
            n_uniform_seeds: 10,
            crossover_prob: 0.5,
            mutation_prob: 0.2,
            penalty_gain: PENALTY_GAIN,
            stall_generations: 10,
            stall_improvement: 0.05,
            elitism_count: 1,
            max_generations: 200,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.population == 0 {
            return bad("population must be positive");
        }
        if self.n_uniform_seeds > self.population {
            return bad("more uniform seeds than chromosomes");
        }
        if self.elitism_count > self.population {
            return bad("elitism exceeds population");
        }
        for p in [self.crossover_prob, self.mutation_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.stall_generations == 0 || self.max_generations == 0 {
            return bad("generation limits must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chromosome {
    pub genes: PruningVector,
    pub fitness: Option<f64>,
    pub accuracy: Option<f64>,
    pub compression: Option<f64>,
}

impl Chromosome {
    fn unevaluated(genes: Vec<usize>) -> Self {
        Self {
            genes: PruningVector::new(genes),
            fitness: None,
            accuracy: None,
            compression: None,
        }
    }

    fn fit(&self) -> f64 {
        self.fitness.unwrap_or(f64::NEG_INFINITY)
    }
}

/// One line of the history stream: a chromosome as evaluated in a generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub generation: usize,
    pub genes: Vec<usize>,
    pub accuracy: f64,
    pub compression: f64,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaOutcome {
    pub best: Chromosome,
    /// Whether `best` meets the accuracy threshold.
    pub feasible: bool,
    pub generations: usize,
    /// Best-ever fitness after each generation.
    pub best_fitness_trace: Vec<f64>,
    pub history: Vec<HistoryRecord>,
}

/// Runs the GA to termination without a history sink.
pub fn ga_search(objective: &dyn PruningObjective, a0: f64, cfg: &GaConfig) -> Result<GaOutcome> {
    ga_search_with(objective, a0, cfg, &[], &mut |_| Ok(()))
}

struct Tracker {
    best: Option<Chromosome>,
    best_feasible: Option<Chromosome>,
    reference: f64,
    stall: usize,
    trace: Vec<f64>,
}

impl Tracker {
    fn new() -> Self {
        Self {
            best: None,
            best_feasible: None,
            reference: f64::NEG_INFINITY,
            stall: 0,
            trace: Vec::new(),
        }
    }

    /// Folds in one evaluated generation; returns true when the stall
    /// criterion says to stop.
    fn observe(&mut self, population: &[Chromosome], a0: f64, cfg: &GaConfig) -> bool {
        for c in population {
            if self.best.as_ref().is_none_or(|b| c.fit() > b.fit()) {
                self.best = Some(c.clone());
            }
            if c.accuracy.unwrap_or(f64::NEG_INFINITY) >= a0
                && self.best_feasible.as_ref().is_none_or(|b| c.fit() > b.fit())
            {
                self.best_feasible = Some(c.clone());
            }
        }
        let best = self.best.as_ref().map_or(f64::NEG_INFINITY, Chromosome::fit);
        self.trace.push(best);
        if self.trace.len() == 1 {
            self.reference = best;
            return false;
        }
        let improved = if self.reference > 0.0 {
            best >= self.reference * (1.0 + cfg.stall_improvement)
        } else {
            best > self.reference
        };
        if improved {
            self.reference = best;
            self.stall = 0;
        } else {
            self.stall += 1;
        }
        self.stall >= cfg.stall_generations
    }
}

/// Runs the GA, streaming every evaluated chromosome to `sink` and first
/// replaying `resume` (a prefix of a previous run's history with the same
/// configuration and objective).
pub fn ga_search_with(
    objective: &dyn PruningObjective,
    a0: f64,
    cfg: &GaConfig,
    resume: &[HistoryRecord],
    sink: &mut dyn FnMut(&HistoryRecord) -> Result<()>,
) -> Result<GaOutcome> {
    cfg.validate()?;
    let n_sites = objective.n_sites();
    let n_levels = objective.factor_set().len();
    if n_sites == 0 || n_levels == 0 {
        return Err(Error::InvalidArgument("nothing to search".into()));
    }

    let mut memo: HashMap<Vec<usize>, Measurement> = HashMap::new();
    let mut tracker = Tracker::new();
    let mut history: Vec<HistoryRecord> = Vec::new();
    let mut population: Vec<Chromosome>;
    let mut generation = 0;
    let mut stop = false;

    let replayed = replay(resume, cfg.population)?;
    if replayed.is_empty() {
        population = initial_population(n_sites, n_levels, cfg);
    } else {
        let mut last = Vec::new();
        for (g, records) in replayed.into_iter().enumerate() {
            last = records
                .iter()
                .map(|r| {
                    memo.insert(
                        r.genes.clone(),
                        Measurement {
                            accuracy: r.accuracy,
                            compression: r.compression,
                        },
                    );
                    Chromosome {
                        genes: PruningVector::new(r.genes.clone()),
                        fitness: Some(r.fitness),
                        accuracy: Some(r.accuracy),
                        compression: Some(r.compression),
                    }
                })
                .collect();
            history.extend(records);
            generation = g;
            stop = tracker.observe(&last, a0, cfg);
        }
        population = last;
        if !stop && generation + 1 < cfg.max_generations {
            generation += 1;
            population = next_population(&population, n_levels, cfg, generation);
        } else {
            stop = true;
        }
    }

    while !stop {
        evaluate_population(objective, &mut population, &mut memo, a0, cfg)?;
        for c in &population {
            let rec = HistoryRecord {
                generation,
                genes: c.genes.indices.clone(),
                accuracy: c.accuracy.expect("evaluated"),
                compression: c.compression.expect("evaluated"),
                fitness: c.fitness.expect("evaluated"),
            };
            sink(&rec)?;
            history.push(rec);
        }
        stop = tracker.observe(&population, a0, cfg);
        if stop || generation + 1 >= cfg.max_generations {
            break;
        }
        generation += 1;
        population = next_population(&population, n_levels, cfg, generation);
    }

    let feasible = tracker.best_feasible.is_some();
    let best = match tracker.best_feasible {
        Some(b) => b,
        None => {
            warn!("no chromosome met a0 = {a0:.4}; returning the fittest infeasible one");
            tracker.best.expect("at least one generation evaluated")
        }
    };
    Ok(GaOutcome {
        best,
        feasible,
        generations: tracker.trace.len(),
        best_fitness_trace: tracker.trace,
        history,
    })
}

/// Splits a history prefix into complete generations.
fn replay(records: &[HistoryRecord], population: usize) -> Result<Vec<Vec<HistoryRecord>>> {
    let mut out: Vec<Vec<HistoryRecord>> = Vec::new();
    for r in records {
        if r.generation == out.len() {
            out.push(Vec::new());
        } else if r.generation + 1 != out.len() {
            return Err(Error::Format(format!(
                "history generations out of order at generation {}",
                r.generation
            )));
        }
        out.last_mut().expect("pushed above").push(r.clone());
    }
    // A trailing partial generation is dropped and re-evaluated.
    if out.last().is_some_and(|g| g.len() != population) {
        out.pop();
    }
    if out.iter().any(|g| g.len() != population) {
        return Err(Error::Format("history generation size differs from population".into()));
    }
    Ok(out)
}

fn initial_population(n_sites: usize, n_levels: usize, cfg: &GaConfig) -> Vec<Chromosome> {
    let mut rng = seeded_rng(derive_seed(cfg.seed, &[0]));
    let n_uniform = cfg.n_uniform_seeds.min(n_levels);
    let mut pop = Vec::with_capacity(cfg.population);
    for i in 0..n_uniform {
        // Distinct levels spread over the set; all of them when n_uniform = |S|.
        let level = if n_uniform == 1 {
            0
        } else {
            (i * (n_levels - 1) + (n_uniform - 1) / 2) / (n_uniform - 1)
        };
        pop.push(Chromosome::unevaluated(vec![level; n_sites]));
    }
    while pop.len() < cfg.population {
        let genes = (0..n_sites).map(|_| rng.random_range(0..n_levels)).collect();
        pop.push(Chromosome::unevaluated(genes));
    }
    pop
}

fn evaluate_population(
    objective: &dyn PruningObjective,
    population: &mut [Chromosome],
    memo: &mut HashMap<Vec<usize>, Measurement>,
    a0: f64,
    cfg: &GaConfig,
) -> Result<()> {
    let mut pending: Vec<Vec<usize>> = Vec::new();
    for c in population.iter() {
        if !memo.contains_key(&c.genes.indices) && !pending.contains(&c.genes.indices) {
            pending.push(c.genes.indices.clone());
        }
    }
    let measured: Vec<Result<Measurement>> = pending
        .par_iter()
        .map(|g| objective.measure(&PruningVector::new(g.clone())))
        .collect();
    for (g, m) in pending.into_iter().zip(measured) {
        memo.insert(g, m?);
    }
    for c in population.iter_mut() {
        let m = memo[&c.genes.indices];
        c.accuracy = Some(m.accuracy);
        c.compression = Some(m.compression);
        c.fitness = Some(fitness_with_gain(m.compression, m.accuracy, a0, cfg.penalty_gain));
    }
    Ok(())
}

fn select<'a>(population: &'a [Chromosome], total: f64, rng: &mut SeededRng) -> &'a Chromosome {
    if total <= 0.0 || !total.is_finite() {
        return &population[rng.random_range(0..population.len())];
    }
    let mut target = rng.random::<f64>() * total;
    for c in population {
        let w = c.fit().max(0.0);
        if target < w {
            return c;
        }
        target -= w;
    }
    population
        .iter()
        .rev()
        .find(|c| c.fit() > 0.0)
        .expect("positive total implies a positive weight")
}

fn mutate(genes: &mut [usize], n_levels: usize, prob: f64, rng: &mut SeededRng) {
    for g in genes.iter_mut() {
        if rng.random::<f64>() < prob {
            if rng.random::<bool>() {
                *g = (*g + 1).min(n_levels - 1);
            } else {
                *g = g.saturating_sub(1);
            }
        }
    }
}

fn next_population(
    population: &[Chromosome],
    n_levels: usize,
    cfg: &GaConfig,
    generation: usize,
) -> Vec<Chromosome> {
    let mut rng = seeded_rng(derive_seed(cfg.seed, &[generation as u64]));
    let mut ranked: Vec<&Chromosome> = population.iter().collect();
    ranked.sort_by(|a, b| b.fit().total_cmp(&a.fit()));

    let mut next: Vec<Chromosome> = ranked
        .iter()
        .take(cfg.elitism_count)
        .map(|&c| c.clone())
        .collect();
    let total: f64 = population.iter().map(|c| c.fit().max(0.0)).sum();
    let n_sites = population[0].genes.len();

    while next.len() < cfg.population {
        let a = &select(population, total, &mut rng).genes.indices;
        let b = &select(population, total, &mut rng).genes.indices;
        let (mut c1, mut c2) = if n_sites > 1 && rng.random::<f64>() < cfg.crossover_prob {
            let cut = rng.random_range(1..n_sites);
            let mut c1 = a[..cut].to_vec();
            c1.extend_from_slice(&b[cut..]);
            let mut c2 = b[..cut].to_vec();
            c2.extend_from_slice(&a[cut..]);
            (c1, c2)
        } else {
            (a.clone(), b.clone())
        };
        mutate(&mut c1, n_levels, cfg.mutation_prob, &mut rng);
        mutate(&mut c2, n_levels, cfg.mutation_prob, &mut rng);
        next.push(Chromosome::unevaluated(c1));
        if next.len() < cfg.population {
            next.push(Chromosome::unevaluated(c2));
        }
    }
    next
}

/// Reads a JSON-lines history stream.
pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::FactorSet;

    /// Compression is the mean level index scaled to [0, 1]; accuracy is
    /// constant, so the optimum is the all-last-level vector.
    struct Easy {
        set: FactorSet,
        n: usize,
    }

    impl PruningObjective for Easy {
        fn n_sites(&self) -> usize {
            self.n
        }
        fn factor_set(&self) -> &FactorSet {
            &self.set
        }
        fn measure(&self, p: &PruningVector) -> Result<Measurement> {
            let max = (self.set.len() - 1) as f64;
            let c = p.indices.iter().map(|&i| i as f64 / max).sum::<f64>() / self.n as f64;
            Ok(Measurement {
                accuracy: 1.0,
                compression: c,
            })
        }
    }

    #[test]
    fn initial_population_has_distinct_uniform_levels() {
        let cfg = GaConfig::default();
        let pop = initial_population(8, 10, &cfg);
        assert_eq!(pop.len(), 100);
        for (i, c) in pop.iter().take(10).enumerate() {
            assert!(c.genes.indices.iter().all(|&g| g == i));
        }
        let pop = initial_population(8, 3, &cfg);
        let uniform: Vec<usize> = pop.iter().take(3).map(|c| c.genes.indices[0]).collect();
        assert_eq!(uniform, vec![0, 1, 2]);
    }

    #[test]
    fn mutation_clamps_at_ends() {
        let mut rng = seeded_rng(1);
        for _ in 0..200 {
            let mut g = vec![0, 9, 5];
            mutate(&mut g, 10, 1.0, &mut rng);
            assert!(g[0] <= 1 && g[1] >= 8 && (g[2] == 4 || g[2] == 6));
        }
    }

    #[test]
    fn unconstrained_maximum_is_found() {
        let obj = Easy {
            set: FactorSet::canonical(),
            n: 8,
        };
        let out = ga_search(&obj, 0.5, &GaConfig::default()).unwrap();
        assert!(out.feasible);
        assert_eq!(out.best.genes.indices, vec![9; 8]);
        assert!(out.best_fitness_trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn deterministic_and_resumable() {
        let obj = Easy {
            set: FactorSet::canonical(),
            n: 6,
        };
        let cfg = GaConfig {
            population: 20,
            seed: 7,
            ..Default::default()
        };
        let a = ga_search(&obj, 0.5, &cfg).unwrap();
        let b = ga_search(&obj, 0.5, &cfg).unwrap();
        assert_eq!(a, b);

        // Resume from the first three generations plus a partial fourth.
        let cut = 3 * 20 + 7;
        let mut fresh = 0;
        let resumed = ga_search_with(&obj, 0.5, &cfg, &a.history[..cut], &mut |_| {
            fresh += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(fresh, a.history.len() - 3 * 20);
        assert_eq!(resumed.best, a.best);
        assert_eq!(resumed.history, a.history);
        assert_eq!(resumed.best_fitness_trace, a.best_fitness_trace);
    }

    #[test]
    fn config_validation() {
        let mut c = GaConfig::default();
        c.n_uniform_seeds = 101;
        assert!(c.validate().is_err());
        let mut c = GaConfig::default();
        c.mutation_prob = 1.5;
        assert!(c.validate().is_err());
    }
}
