use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::HistoryRecord;

/// Chromosomes whose fitness is within this fraction of the best count as
/// top performers.
pub const TOP_FITNESS_WINDOW: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckReport {
    pub best_fitness: f64,
    pub qualifying: usize,
    /// Per flat site index: fraction of top chromosomes leaving it dense.
    pub unpruned_probability: Vec<f64>,
    /// Sites dense in every top chromosome.
    pub bottlenecks: Vec<usize>,
}

/// Over chromosomes with fitness ≥ (1 − 0.2)·best, the fraction that keep
/// each site at level index 0 (retention 1.0).
pub fn bottleneck_analysis(history: &[HistoryRecord]) -> Result<BottleneckReport> {
    let best = history
        .iter()
        .map(|r| r.fitness)
        .fold(f64::NEG_INFINITY, f64::max);
    let cutoff = (1.0 - TOP_FITNESS_WINDOW) * best;
    let top: Vec<&HistoryRecord> = history.iter().filter(|r| r.fitness >= cutoff).collect();
    if top.is_empty() {
        return Err(Error::EmptySelection);
    }
    let n_sites = top[0].genes.len();
    if top.iter().any(|r| r.genes.len() != n_sites) {
        return Err(Error::InvalidArgument("history mixes vector lengths".into()));
    }
    let mut dense = vec![0usize; n_sites];
    for r in &top {
        for (count, &g) in dense.iter_mut().zip(&r.genes) {
            if g == 0 {
                *count += 1;
            }
        }
    }
    let unpruned_probability: Vec<f64> = dense.iter().map(|&c| c as f64 / top.len() as f64).collect();
    let bottlenecks = dense
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == top.len())
        .map(|(i, _)| i)
        .collect();
    Ok(BottleneckReport {
        best_fitness: best,
        qualifying: top.len(),
        unpruned_probability,
        bottlenecks,
    })
}
