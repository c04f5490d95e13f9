use crate::calibrate::{AdapterCache, AdapterEntry, PruningVector};
use crate::error::{Error, Result};
use crate::factorize::FactorizedMatrix;
use crate::linalg::Matrix;
use crate::model::{model_fingerprint, ModelWeights, Network, SiteId};

/// A model whose projections may be replaced by low-rank factors. Borrowed
/// views only: building one copies no weights.
#[derive(Debug, Clone)]
pub struct PrunedModel<'a> {
    base: &'a ModelWeights,
    factors: Vec<Option<&'a FactorizedMatrix>>,
}

impl<'a> PrunedModel<'a> {
    /// `factors[site.index()]` replaces that site when present.
    pub fn from_factors(base: &'a ModelWeights, factors: Vec<Option<&'a FactorizedMatrix>>) -> Result<Self> {
        if factors.len() != base.config.n_sites() {
            return Err(Error::InvalidArgument(format!(
                "{} factor slots for {} sites",
                factors.len(),
                base.config.n_sites()
            )));
        }
        for (i, f) in factors.iter().enumerate() {
            if let Some(f) = f {
                let site = SiteId::from_index(i);
                let (d_in, d_out) = base.config.site_dims(site.kind);
                if (f.d_in(), f.d_out()) != (d_in, d_out) {
                    return Err(Error::mismatch("pruned site", (d_out, d_in), (f.d_out(), f.d_in())));
                }
            }
        }
        Ok(Self { base, factors })
    }

    pub fn factor(&self, site: SiteId) -> Option<&'a FactorizedMatrix> {
        self.factors[site.index()]
    }

    /// Parameters held by the prunable projections.
    pub fn site_params(&self) -> usize {
        let cfg = &self.base.config;
        cfg.sites()
            .map(|s| match self.factors[s.index()] {
                Some(f) => f.params(),
                None => {
                    let (d_in, d_out) = cfg.site_dims(s.kind);
                    d_in * d_out
                }
            })
            .sum()
    }
}

impl Network for PrunedModel<'_> {
    fn weights(&self) -> &ModelWeights {
        self.base
    }

    fn project(&self, site: SiteId, x: &Matrix) -> Result<Matrix> {
        match self.factors[site.index()] {
            Some(f) => f.apply_rows(x),
            None => x.matmul_t(self.base.site_weight(site)),
        }
    }
}

/// A model paired with a cache built from it, checked once.
#[derive(Debug, Clone, Copy)]
pub struct Pruner<'a> {
    pub model: &'a ModelWeights,
    pub cache: &'a AdapterCache,
}

impl<'a> Pruner<'a> {
    pub fn new(model: &'a ModelWeights, cache: &'a AdapterCache) -> Result<Self> {
        let fp = model_fingerprint(model)?;
        if fp != cache.model_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: fp,
                found: cache.model_fingerprint.clone(),
            });
        }
        if cache.n_sites() != model.config.n_sites() {
            return Err(Error::InvalidArgument("cache and model disagree on site count".into()));
        }
        Ok(Self { model, cache })
    }

    /// Level-1.0 and degraded sites use the dense weights; all others compute
    /// `B·(C·x)`.
    pub fn assemble(&self, p: &PruningVector) -> Result<PrunedModel<'a>> {
        p.validate(self.model.config.n_sites(), &self.cache.factor_set)?;
        let mut factors = Vec::with_capacity(p.len());
        for (i, &level) in p.indices.iter().enumerate() {
            let site = SiteId::from_index(i);
            let entry = if level == 0 {
                None
            } else {
                match self.cache.entry(site, level) {
                    Some(AdapterEntry::Factored(f)) => Some(f),
                    Some(AdapterEntry::Unpruned | AdapterEntry::Degraded { .. }) => None,
                    None => {
                        return Err(Error::MissingEntry {
                            layer: site.layer,
                            kind: site.kind.to_string(),
                            level,
                        })
                    }
                }
            };
            factors.push(entry);
        }
        Ok(PrunedModel {
            base: self.model,
            factors,
        })
    }
}

/// Checks fingerprints and assembles in one call. Prefer [`Pruner`] when
/// assembling many vectors against one model.
pub fn assemble<'a>(model: &'a ModelWeights, p: &PruningVector, cache: &'a AdapterCache) -> Result<PrunedModel<'a>> {
    Pruner::new(model, cache)?.assemble(p)
}
