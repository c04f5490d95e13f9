use log::warn;
use serde::{Deserialize, Serialize};

use crate::calibrate::PruningVector;
use crate::error::{Error, Result};
use crate::search::PruningObjective;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformSearchOutcome {
    /// Chosen factor-set index; 0 means nothing feasible below 1.0.
    pub level: usize,
    pub factor: f64,
    pub accuracy: f64,
    pub compression: f64,
    pub evaluations: usize,
    /// `(level, accuracy)` in evaluation order.
    pub trace: Vec<(usize, f64)>,
    pub feasible: bool,
}

/// Binary search over factor-set indices `0..n_levels`, where index 0
/// (retention 1.0) is feasible by definition with accuracy `a_star`.
///
/// The feasible bound starts at 0 and the infeasible bound one past the most
/// aggressive level. Each step evaluates the midpoint and moves whichever
/// bound it satisfies; the search ends when the bounds are adjacent and
/// returns the feasible one. Accuracy need not be monotone: the result is the
/// most aggressive feasible level actually visited.
pub fn binary_search_levels(
    n_levels: usize,
    a0: f64,
    a_star: f64,
    mut eval: impl FnMut(usize) -> Result<f64>,
) -> Result<(usize, f64, Vec<(usize, f64)>)> {
    if n_levels == 0 {
        return Err(Error::InvalidArgument("empty factor set".into()));
    }
    let mut feasible = 0usize;
    let mut feasible_acc = a_star;
    let mut infeasible = n_levels;
    let mut trace = Vec::new();
    while infeasible - feasible > 1 {
        let mid = (feasible + infeasible) / 2;
        let acc = eval(mid)?;
        trace.push((mid, acc));
        if acc >= a0 {
            feasible = mid;
            feasible_acc = acc;
        } else {
            infeasible = mid;
        }
    }
    Ok((feasible, feasible_acc, trace))
}

/// Uniform pruning: one level for every site, chosen by [`binary_search_levels`].
pub fn binary_search_uniform(
    objective: &dyn PruningObjective,
    a0: f64,
    a_star: f64,
) -> Result<(PruningVector, UniformSearchOutcome)> {
    let n = objective.n_sites();
    let set = objective.factor_set();
    let mut compressions = vec![0.0; set.len()];
    let (level, accuracy, trace) = binary_search_levels(set.len(), a0, a_star, |level| {
        let m = objective.measure(&PruningVector::uniform(n, level))?;
        compressions[level] = m.compression;
        Ok(m.accuracy)
    })?;
    let feasible = level > 0;
    if !feasible {
        warn!("no uniform level below 1.0 meets a0 = {a0:.4}; keeping the dense model");
    }
    let outcome = UniformSearchOutcome {
        level,
        factor: set.levels()[level],
        accuracy,
        compression: compressions[level],
        evaluations: trace.len(),
        trace,
        feasible,
    };
    Ok((PruningVector::uniform(n, level), outcome))
}
