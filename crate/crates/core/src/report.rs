//! Run artifacts and the data behind the analysis figures: accuracy versus
//! pruning curves, retention per site, layer and matrix kind, bottleneck
//! probabilities, and FLOP accounting. Output is JSON and CSV only.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::{
    build_cache_levels, capture_calibration, compression_ratio, whole_model_compression, AdapterCache,
    FactorSet, PruningVector,
};
use crate::error::{Error, Result};
use crate::factorize::{rank_for_factor, FactorizeOptions};
use crate::model::{estimate_flops_per_token, ModelWeights, SiteId, SiteKind, TransformerConfig};
use crate::search::{
    binary_search_uniform, bottleneck_analysis, ga_search_with, BottleneckReport, GaConfig, HistoryRecord,
    PruningObjective, TaskObjective, TaskSpec, UniformSearchOutcome,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SearchMode {
    Up,
    Ga,
}

/// What a search writes to its run directory as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub mode: SearchMode,
    pub config: TransformerConfig,
    pub factor_set: FactorSet,
    pub model_fingerprint: String,
    pub calibration_fingerprint: String,
    pub cache_fingerprint: String,
    pub a_star: f64,
    pub a0: f64,
    pub epsilon: f64,
    pub best: PruningVector,
    pub accuracy: f64,
    pub compression: f64,
    pub whole_model_compression: f64,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform: Option<UniformSearchOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ga: Option<GaRunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaRunSummary {
    pub config: GaConfig,
    pub generations: usize,
    pub best_fitness: f64,
    pub best_fitness_trace: Vec<f64>,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn base_record(
    mode: SearchMode,
    model: &ModelWeights,
    cache: &AdapterCache,
    objective: &TaskObjective<'_>,
    best: PruningVector,
    accuracy: f64,
    feasible: bool,
) -> Result<RunRecord> {
    let set = &cache.factor_set;
    Ok(RunRecord {
        schema_version: REPORT_SCHEMA_VERSION,
        mode,
        config: model.config,
        factor_set: set.clone(),
        model_fingerprint: cache.model_fingerprint.clone(),
        calibration_fingerprint: cache.calibration_fingerprint.clone(),
        cache_fingerprint: cache.fingerprint()?,
        a_star: objective.a_star(),
        a0: objective.a0(),
        epsilon: objective.task().epsilon,
        compression: compression_ratio(&best, &model.config, set)?,
        whole_model_compression: whole_model_compression(&best, model, set)?,
        best,
        accuracy,
        feasible,
        uniform: None,
        ga: None,
    })
}

/// Uniform binary search, packaged as a run record.
pub fn uniform_run(model: &ModelWeights, cache: &AdapterCache, objective: &TaskObjective<'_>) -> Result<RunRecord> {
    let (best, outcome) = binary_search_uniform(objective, objective.a0(), objective.a_star())?;
    let mut run = base_record(SearchMode::Up, model, cache, objective, best, outcome.accuracy, outcome.feasible)?;
    run.uniform = Some(outcome);
    Ok(run)
}

/// GA search resumed from `resume`, streaming new history records to `sink`.
pub fn ga_run(
    model: &ModelWeights,
    cache: &AdapterCache,
    objective: &TaskObjective<'_>,
    cfg: &GaConfig,
    resume: &[HistoryRecord],
    sink: &mut dyn FnMut(&HistoryRecord) -> Result<()>,
) -> Result<(RunRecord, Vec<HistoryRecord>)> {
    let out = ga_search_with(objective, objective.a0(), cfg, resume, sink)?;
    let accuracy = out.best.accuracy.unwrap_or(0.0);
    let best_fitness = out.best.fitness.unwrap_or(f64::NEG_INFINITY);
    let mut run = base_record(SearchMode::Ga, model, cache, objective, out.best.genes, accuracy, out.feasible)?;
    run.ga = Some(GaRunSummary {
        config: *cfg,
        generations: out.generations,
        best_fitness,
        best_fitness_trace: out.best_fitness_trace,
    });
    Ok((run, out.history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRetention {
    pub layer: usize,
    pub kind: SiteKind,
    pub factor_index: usize,
    pub requested: f64,
    pub rank: Option<usize>,
    pub achieved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionTables {
    pub sites: Vec<SiteRetention>,
    /// Mean achieved retention per layer.
    pub per_layer: Vec<f64>,
    /// Mean achieved retention per kind, in `SiteKind::ALL` order.
    pub per_kind: Vec<(SiteKind, f64)>,
    /// Parameter-weighted retention over all prunable sites, `1 − c(p)`.
    pub overall: f64,
}

/// Achieved retention of each site under `p`, with per-layer and per-kind
/// means over those values.
pub fn retention_tables(p: &PruningVector, config: &TransformerConfig, set: &FactorSet) -> Result<RetentionTables> {
    p.validate(config.n_sites(), set)?;
    let mut sites = Vec::with_capacity(config.n_sites());
    for site in config.sites() {
        let (d_in, d_out) = config.site_dims(site.kind);
        let requested = p.level(site.index(), set)?;
        let choice = rank_for_factor(requested, d_in, d_out)?;
        sites.push(SiteRetention {
            layer: site.layer,
            kind: site.kind,
            factor_index: p.indices[site.index()],
            requested,
            rank: choice.rank(),
            achieved: choice.factor(),
        });
    }
    let mean = |vals: Vec<f64>| vals.iter().sum::<f64>() / vals.len() as f64;
    let per_layer = (0..config.n_layers)
        .map(|l| mean(sites.iter().filter(|s| s.layer == l).map(|s| s.achieved).collect()))
        .collect();
    let per_kind = SiteKind::ALL
        .iter()
        .map(|&k| (k, mean(sites.iter().filter(|s| s.kind == k).map(|s| s.achieved).collect())))
        .collect();
    Ok(RetentionTables {
        sites,
        per_layer,
        per_kind,
        overall: 1.0 - compression_ratio(p, config, set)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub schema_version: u32,
    pub mode: SearchMode,
    pub model_fingerprint: String,
    pub calibration_fingerprint: String,
    pub a_star: f64,
    pub a0: f64,
    pub epsilon: f64,
    pub best: PruningVector,
    pub accuracy: f64,
    pub compression: f64,
    pub whole_model_compression: f64,
    pub feasible: bool,
    pub retention: RetentionTables,
    pub bottlenecks: Option<BottleneckReport>,
    pub flops_dense: u64,
    pub flops_pruned: u64,
    pub history_records: usize,
}

/// Assembles the report from a run record and its GA history (empty for
/// uniform runs).
pub fn build_report(run: &RunRecord, history: &[HistoryRecord]) -> Result<SearchReport> {
    let retention = retention_tables(&run.best, &run.config, &run.factor_set)?;
    let bottlenecks = if history.is_empty() {
        None
    } else {
        Some(bottleneck_analysis(history)?)
    };
    Ok(SearchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: run.mode,
        model_fingerprint: run.model_fingerprint.clone(),
        calibration_fingerprint: run.calibration_fingerprint.clone(),
        a_star: run.a_star,
        a0: run.a0,
        epsilon: run.epsilon,
        best: run.best.clone(),
        accuracy: run.accuracy,
        compression: compression_ratio(&run.best, &run.config, &run.factor_set)?,
        whole_model_compression: run.whole_model_compression,
        feasible: run.feasible,
        retention,
        bottlenecks,
        flops_dense: estimate_flops_per_token(&run.config, None)?,
        flops_pruned: estimate_flops_per_token(&run.config, Some((&run.best, &run.factor_set)))?,
        history_records: history.len(),
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes `report.json` plus one CSV per figure's data into `dir`.
pub fn emit_report(report: &SearchReport, history: &[HistoryRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let mut w = csv_writer(&dir.join("retention_sites.csv"))?;
    w.write_record(["layer", "kind", "factor_index", "requested", "rank", "achieved", "unpruned_probability"])?;
    for (i, s) in report.retention.sites.iter().enumerate() {
        let prob = report
            .bottlenecks
            .as_ref()
            .map(|b| b.unpruned_probability[i].to_string())
            .unwrap_or_default();
        w.write_record([
            s.layer.to_string(),
            s.kind.to_string(),
            s.factor_index.to_string(),
            s.requested.to_string(),
            s.rank.map(|r| r.to_string()).unwrap_or_default(),
            s.achieved.to_string(),
            prob,
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let mut w = csv_writer(&dir.join("retention_layers.csv"))?;
    w.write_record(["layer", "mean_retention"])?;
    for (l, v) in report.retention.per_layer.iter().enumerate() {
        w.write_record([l.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let mut w = csv_writer(&dir.join("retention_kinds.csv"))?;
    w.write_record(["kind", "mean_retention"])?;
    for (k, v) in &report.retention.per_kind {
        w.write_record([k.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    if let Some(b) = &report.bottlenecks {
        let n_layers = report.retention.per_layer.len();
        let mut w = csv_writer(&dir.join("bottleneck_heatmap.csv"))?;
        let mut header = vec!["layer".to_string()];
        header.extend(SiteKind::ALL.iter().map(|k| k.to_string()));
        w.write_record(&header)?;
        for l in 0..n_layers {
            let mut row = vec![l.to_string()];
            row.extend(
                SiteKind::ALL
                    .iter()
                    .map(|&k| b.unpruned_probability[SiteId::new(l, k).index()].to_string()),
            );
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
    }

    if !history.is_empty() {
        let mut w = csv_writer(&dir.join("generations.csv"))?;
        w.write_record(["generation", "best_fitness", "best_compression", "best_accuracy", "mean_fitness"])?;
        let last_gen = history.iter().map(|r| r.generation).max().unwrap_or(0);
        for g in 0..=last_gen {
            let gen: Vec<&HistoryRecord> = history.iter().filter(|r| r.generation == g).collect();
            if gen.is_empty() {
                continue;
            }
            let best = gen
                .iter()
                .copied()
                .reduce(|a, b| if b.fitness > a.fitness { b } else { a })
                .expect("nonempty");
            let mean = gen.iter().map(|r| r.fitness).sum::<f64>() / gen.len() as f64;
            w.write_record([
                g.to_string(),
                best.fitness.to_string(),
                best.compression.to_string(),
                best.accuracy.to_string(),
                mean.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub level: usize,
    pub factor: f64,
    /// `c(p)` of the uniform vector: the pruned fraction.
    pub compression: f64,
    pub accuracy: f64,
}

/// Accuracy of each uniform level.
pub fn sweep_uniform(objective: &TaskObjective<'_>, levels: &[usize]) -> Result<Vec<SweepPoint>> {
    let set = objective.factor_set();
    let n = objective.n_sites();
    levels
        .iter()
        .map(|&level| {
            let factor = set
                .get(level)
                .ok_or_else(|| Error::InvalidArgument(format!("level {level} outside factor set")))?;
            let m = objective.measure(&PruningVector::uniform(n, level))?;
            Ok(SweepPoint {
                level,
                factor,
                compression: m.compression,
                accuracy: m.accuracy,
            })
        })
        .collect()
}

pub fn write_sweep_csv(points: &[SweepPoint], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["level", "factor", "compression", "accuracy"])?;
    for p in points {
        w.write_record([
            p.level.to_string(),
            p.factor.to_string(),
            p.compression.to_string(),
            p.accuracy.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let field = |i: usize| -> Result<&str> {
            row.get(i).ok_or_else(|| Error::Format("short sweep row".into()))
        };
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("bad number {s}")))
        };
        out.push(SweepPoint {
            level: field(0)?.parse().map_err(|_| Error::Format("bad level".into()))?,
            factor: parse(field(1)?)?,
            compression: parse(field(2)?)?,
            accuracy: parse(field(3)?)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub tokens: usize,
    pub accuracy: f64,
}

/// Rebuilds the cache at one uniform `level` from each calibration size and
/// measures the task accuracy of the resulting model.
pub fn calibration_sweep(
    model: &ModelWeights,
    corpus: &[u32],
    sizes: &[usize],
    task: &TaskSpec,
    factor_set: &FactorSet,
    level: usize,
    opts: &FactorizeOptions,
) -> Result<Vec<CalibrationPoint>> {
    sizes
        .iter()
        .map(|&tokens| {
            let capture = capture_calibration(model, corpus, tokens)?;
            let cache = build_cache_levels(model, &capture, factor_set, &[level], opts)?;
            let objective = TaskObjective::new(model, &cache, task)?;
            let p = PruningVector::uniform(model.config.n_sites(), level);
            Ok(CalibrationPoint {
                tokens,
                accuracy: objective.evaluate(&p)?.accuracy,
            })
        })
        .collect()
}

pub fn write_calibration_csv(points: &[CalibrationPoint], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["tokens", "accuracy"])?;
    for p in points {
        w.write_record([p.tokens.to_string(), p.accuracy.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the history as JSON lines.
pub fn write_history(history: &[HistoryRecord], path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for r in history {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
