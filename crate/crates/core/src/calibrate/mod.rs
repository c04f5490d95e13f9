//! Calibration capture, the adapter cache, and pruned-model assembly.

mod assemble;
mod cache;
mod capture;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorize::rank_for_factor;
use crate::model::{count_params, ModelWeights, TransformerConfig};

pub use assemble::{assemble, PrunedModel, Pruner};
pub use cache::{build_cache, build_cache_levels, load_cache, save_cache, AdapterCache, AdapterEntry};
pub use capture::{capture_calibration, load_capture, save_capture, CalibrationCapture};

pub const DEFAULT_CALIBRATION_TOKENS: usize = 200_000;

/// Ordered retention levels; index 0 is always 1.0 (dense).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FactorSet {
    levels: Vec<f64>,
}

impl FactorSet {
    pub const CANONICAL: [f64; 10] = [1.0, 0.9, 0.75, 0.6, 0.5, 0.35, 0.25, 0.2, 0.1, 0.05];

    pub fn canonical() -> Self {
        Self {
            levels: Self::CANONICAL.to_vec(),
        }
    }

    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.first() != Some(&1.0) {
            return Err(Error::InvalidArgument("factor set must start at 1.0".into()));
        }
        if levels.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidArgument("factor set must be strictly descending".into()));
        }
        if levels.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidArgument("retention levels must be positive".into()));
        }
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.levels.get(index).copied()
    }
}

impl Default for FactorSet {
    fn default() -> Self {
        Self::canonical()
    }
}

impl TryFrom<Vec<f64>> for FactorSet {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FactorSet> for Vec<f64> {
    fn from(s: FactorSet) -> Self {
        s.levels
    }
}

/// One factor-set index per prunable site, in [`crate::model::SiteId::index`] order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PruningVector {
    pub indices: Vec<usize>,
}

impl PruningVector {
    pub fn new(indices: Vec<usize>) -> Self {
        Self { indices }
    }

    pub fn all_ones(n_sites: usize) -> Self {
        Self::uniform(n_sites, 0)
    }

    pub fn uniform(n_sites: usize, level: usize) -> Self {
        Self {
            indices: vec![level; n_sites],
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self, n_sites: usize, set: &FactorSet) -> Result<()> {
        if self.indices.len() != n_sites {
            return Err(Error::InvalidArgument(format!(
                "pruning vector has {} genes, model has {n_sites} sites",
                self.indices.len()
            )));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= set.len()) {
            return Err(Error::InvalidArgument(format!(
                "level index {bad} outside factor set of {}",
                set.len()
            )));
        }
        Ok(())
    }

    /// Retention level of the site at flat index `site`.
    pub fn level(&self, site: usize, set: &FactorSet) -> Result<f64> {
        let idx = *self
            .indices
            .get(site)
            .ok_or_else(|| Error::InvalidArgument(format!("no gene for site {site}")))?;
        set.get(idx)
            .ok_or_else(|| Error::InvalidArgument(format!("level index {idx} outside factor set")))
    }

    /// The retention levels themselves.
    pub fn factors(&self, set: &FactorSet) -> Result<Vec<f64>> {
        (0..self.len()).map(|s| self.level(s, set)).collect()
    }
}

/// Parameters each prunable site keeps under `p`.
pub fn retained_site_params(
    p: &PruningVector,
    config: &TransformerConfig,
    set: &FactorSet,
) -> Result<Vec<usize>> {
    p.validate(config.n_sites(), set)?;
    config
        .sites()
        .map(|site| {
            let (d_in, d_out) = config.site_dims(site.kind);
            let choice = rank_for_factor(p.level(site.index(), set)?, d_in, d_out)?;
            Ok(match choice.rank() {
                None => d_in * d_out,
                Some(r) => r * (d_in + d_out),
            })
        })
        .collect()
}

/// `c(p) = 1 − retained / dense`, over the prunable projections only.
pub fn compression_ratio(p: &PruningVector, config: &TransformerConfig, set: &FactorSet) -> Result<f64> {
    let retained: usize = retained_site_params(p, config, set)?.iter().sum();
    let dense: usize = config
        .sites()
        .map(|s| {
            let (d_in, d_out) = config.site_dims(s.kind);
            d_in * d_out
        })
        .sum();
    Ok(1.0 - retained as f64 / dense as f64)
}

/// Fraction of all model parameters removed, embeddings and norms included.
pub fn whole_model_compression(p: &PruningVector, model: &ModelWeights, set: &FactorSet) -> Result<f64> {
    let retained_sites: usize = retained_site_params(p, &model.config, set)?.iter().sum();
    let all = count_params(model, false);
    let dense_sites = count_params(model, true);
    let retained = all - dense_sites + retained_sites as u64;
    Ok(1.0 - retained as f64 / all as f64)
}
