use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::calibrate::{CalibrationCapture, FactorSet};
use crate::container::{Container, VERSION_CACHE};
use crate::error::{Error, Result};
use crate::factorize::{factorize_output_aligned, rank_for_factor, FactorizeOptions, FactorizedMatrix, Method, RankChoice};
use crate::linalg::derive_seed;
use crate::model::{model_fingerprint, ModelWeights, SiteId, SiteKind};

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterEntry {
    /// Keep the dense matrix (level 1.0).
    Unpruned,
    Factored(FactorizedMatrix),
    /// Factorization failed; the site stays dense at this level.
    Degraded { rank: usize, reason: String },
}

impl AdapterEntry {
    pub fn factors(&self) -> Option<&FactorizedMatrix> {
        match self {
            AdapterEntry::Factored(f) => Some(f),
            _ => None,
        }
    }
}

/// Precomputed factorizations for every site × retention level.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCache {
    pub model_fingerprint: String,
    pub calibration_fingerprint: String,
    pub options: FactorizeOptions,
    pub factor_set: FactorSet,
    pub n_layers: usize,
    /// `entries[site][level]`; `None` where a partial build skipped the level.
    entries: Vec<Vec<Option<AdapterEntry>>>,
}

impl AdapterCache {
    pub fn entry(&self, site: SiteId, level: usize) -> Option<&AdapterEntry> {
        self.entries.get(site.index())?.get(level)?.as_ref()
    }

    pub fn n_sites(&self) -> usize {
        self.entries.len()
    }

    pub fn is_complete(&self) -> bool {
        self.entries.iter().flatten().all(Option::is_some)
    }

    /// Number of factorizations attempted (every non-dense entry present).
    pub fn built_count(&self) -> usize {
        self.entries
            .iter()
            .flatten()
            .flatten()
            .filter(|e| !matches!(e, AdapterEntry::Unpruned))
            .count()
    }

    pub fn degraded_count(&self) -> usize {
        self.entries
            .iter()
            .flatten()
            .flatten()
            .filter(|e| matches!(e, AdapterEntry::Degraded { .. }))
            .count()
    }

    /// SHA-256 of the serialized cache.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_container().to_bytes()?)))
    }

    pub fn to_container(&self) -> Container {
        let mut meta = Map::new();
        meta.insert("kind".into(), Value::from("adapter_cache"));
        meta.insert("model_fingerprint".into(), Value::from(self.model_fingerprint.clone()));
        meta.insert(
            "calibration_fingerprint".into(),
            Value::from(self.calibration_fingerprint.clone()),
        );
        meta.insert("options".into(), serde_json::to_value(self.options).expect("options"));
        meta.insert(
            "factor_set".into(),
            serde_json::to_value(&self.factor_set).expect("factor set"),
        );
        meta.insert("n_layers".into(), Value::from(self.n_layers));
        let mut manifest = Vec::new();
        let mut tensors = Vec::new();
        for (s, levels) in self.entries.iter().enumerate() {
            let site = SiteId::from_index(s);
            for (level, entry) in levels.iter().enumerate() {
                let mut rec = EntryRecord {
                    layer: site.layer,
                    kind: site.kind,
                    factor_index: level,
                    factor: self.factor_set.levels()[level],
                    status: EntryStatus::Missing,
                    rank: None,
                    method: None,
                    calib_error: None,
                    reason: None,
                };
                match entry {
                    None => {}
                    Some(AdapterEntry::Unpruned) => rec.status = EntryStatus::Unpruned,
                    Some(AdapterEntry::Degraded { rank, reason }) => {
                        rec.status = EntryStatus::Degraded;
                        rec.rank = Some(*rank);
                        rec.reason = Some(reason.clone());
                    }
                    Some(AdapterEntry::Factored(f)) => {
                        rec.status = EntryStatus::Factored;
                        rec.rank = Some(f.rank);
                        rec.method = Some(f.method);
                        rec.calib_error = Some(f.calib_error);
                        let base = format!("L{}.{}.{level}", site.layer, site.kind);
                        tensors.push((format!("{base}.B"), f.b.clone()));
                        tensors.push((format!("{base}.C"), f.c.clone()));
                    }
                }
                manifest.push(rec);
            }
        }
        meta.insert("entries".into(), serde_json::to_value(manifest).expect("manifest"));
        let mut c = Container::new(VERSION_CACHE, meta);
        for (name, m) in tensors {
            c.push(name, m);
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let model_fingerprint: String = c.meta("model_fingerprint")?;
        let calibration_fingerprint: String = c.meta("calibration_fingerprint")?;
        let options: FactorizeOptions = c.meta("options")?;
        let factor_set: FactorSet = c.meta("factor_set")?;
        let n_layers: usize = c.meta("n_layers")?;
        let manifest: Vec<EntryRecord> = c.meta("entries")?;
        if manifest.len() != 4 * n_layers * factor_set.len() {
            return Err(Error::Format("cache manifest does not cover every site and level".into()));
        }
        let mut entries = vec![vec![None; factor_set.len()]; 4 * n_layers];
        let mut tensors = c.tensors.into_iter();
        for rec in manifest {
            let site = SiteId::new(rec.layer, rec.kind);
            if rec.layer >= n_layers || rec.factor_index >= factor_set.len() {
                return Err(Error::Format("cache manifest entry out of range".into()));
            }
            let entry = match rec.status {
                EntryStatus::Missing => None,
                EntryStatus::Unpruned => Some(AdapterEntry::Unpruned),
                EntryStatus::Degraded => Some(AdapterEntry::Degraded {
                    rank: rec.rank.unwrap_or(0),
                    reason: rec.reason.unwrap_or_default(),
                }),
                EntryStatus::Factored => {
                    let base = format!("L{}.{}.{}", rec.layer, rec.kind, rec.factor_index);
                    let mut take = |suffix: &str| -> Result<crate::linalg::Matrix> {
                        let (name, m) = tensors
                            .next()
                            .ok_or_else(|| Error::Format(format!("missing tensor {base}.{suffix}")))?;
                        if name != format!("{base}.{suffix}") {
                            return Err(Error::Format(format!("expected {base}.{suffix}, found {name}")));
                        }
                        Ok(m)
                    };
                    let b = take("B")?;
                    let cm = take("C")?;
                    let method = rec
                        .method
                        .ok_or_else(|| Error::Format(format!("{base} lacks a method")))?;
                    let calib = rec
                        .calib_error
                        .ok_or_else(|| Error::Format(format!("{base} lacks calib_error")))?;
                    let f = FactorizedMatrix::new(b, cm, method, calib)?;
                    if Some(f.rank) != rec.rank {
                        return Err(Error::Format(format!("{base} rank disagrees with manifest")));
                    }
                    Some(AdapterEntry::Factored(f))
                }
            };
            entries[site.index()][rec.factor_index] = entry;
        }
        if let Some((name, _)) = tensors.next() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        Ok(Self {
            model_fingerprint,
            calibration_fingerprint,
            options,
            factor_set,
            n_layers,
            entries,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryStatus {
    Missing,
    Unpruned,
    Factored,
    Degraded,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryRecord {
    layer: usize,
    kind: SiteKind,
    factor_index: usize,
    factor: f64,
    status: EntryStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    method: Option<Method>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    calib_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    reason: Option<String>,
}

/// Builds every site × level entry: `4·n_layers·(|S| − 1)` factorizations.
pub fn build_cache(
    model: &ModelWeights,
    capture: &CalibrationCapture,
    factor_set: &FactorSet,
    opts: &FactorizeOptions,
) -> Result<AdapterCache> {
    let levels: Vec<usize> = (0..factor_set.len()).collect();
    build_cache_levels(model, capture, factor_set, &levels, opts)
}

/// Builds only the listed levels; other entries stay missing.
pub fn build_cache_levels(
    model: &ModelWeights,
    capture: &CalibrationCapture,
    factor_set: &FactorSet,
    levels: &[usize],
    opts: &FactorizeOptions,
) -> Result<AdapterCache> {
    opts.validate()?;
    let model_fp = model_fingerprint(model)?;
    if capture.model_fingerprint != model_fp {
        return Err(Error::FingerprintMismatch {
            expected: model_fp,
            found: capture.model_fingerprint.clone(),
        });
    }
    if let Some(&bad) = levels.iter().find(|&&l| l >= factor_set.len()) {
        return Err(Error::InvalidArgument(format!("level {bad} outside factor set")));
    }
    let config = &model.config;
    let tasks: Vec<(SiteId, usize)> = config
        .sites()
        .flat_map(|s| levels.iter().map(move |&l| (s, l)))
        .collect();

    let built: Vec<Result<AdapterEntry>> = tasks
        .par_iter()
        .map(|&(site, level)| {
            let (d_in, d_out) = config.site_dims(site.kind);
            let rank = match rank_for_factor(factor_set.levels()[level], d_in, d_out)? {
                RankChoice::Unpruned => return Ok(AdapterEntry::Unpruned),
                RankChoice::Rank { rank, .. } => rank,
            };
            let pair = capture.capture.sites.get(&site).ok_or_else(|| {
                Error::InvalidArgument(format!("capture lacks site {site}"))
            })?;
            let site_opts = FactorizeOptions {
                seed: derive_seed(opts.seed, &[site.index() as u64, level as u64]),
                ..*opts
            };
            match factorize_output_aligned(model.site_weight(site), &pair.x, &pair.y, rank, &site_opts) {
                Ok(f) => Ok(AdapterEntry::Factored(f)),
                Err(e @ (Error::Diverged { .. } | Error::NonFinite(_) | Error::ZeroNorm)) => {
                    warn!("{site} at level {level}: {e}; keeping dense");
                    Ok(AdapterEntry::Degraded {
                        rank,
                        reason: e.to_string(),
                    })
                }
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut entries = vec![vec![None; factor_set.len()]; config.n_sites()];
    for ((site, level), entry) in tasks.into_iter().zip(built) {
        entries[site.index()][level] = Some(entry?);
    }
    Ok(AdapterCache {
        model_fingerprint: model_fp,
        calibration_fingerprint: capture.calibration_fingerprint.clone(),
        options: *opts,
        factor_set: factor_set.clone(),
        n_layers: config.n_layers,
        entries,
    })
}

pub fn save_cache(cache: &AdapterCache, path: &Path) -> Result<()> {
    cache.to_container().write(path)
}

pub fn load_cache(path: &Path) -> Result<AdapterCache> {
    AdapterCache::from_container(Container::read(path, VERSION_CACHE)?)
}
