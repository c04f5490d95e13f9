use std::path::Path;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::container::{Container, VERSION_CAPTURE};
use crate::error::{Error, Result};
use crate::model::{model_fingerprint, ActivationCapture, CaptureRecorder, ModelWeights, SiteCapture, SiteId, SiteKind};

/// Activation capture of every prunable site, tagged with the model and
/// calibration-data fingerprints it was produced from.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCapture {
    pub model_fingerprint: String,
    pub calibration_fingerprint: String,
    pub capture: ActivationCapture,
}

/// Runs the first `min_tokens` corpus tokens through the model in
/// context-length chunks and records `(X, Y)` for every site.
pub fn capture_calibration(
    model: &ModelWeights,
    corpus: &[u32],
    min_tokens: usize,
) -> Result<CalibrationCapture> {
    if min_tokens == 0 {
        return Err(Error::InvalidArgument("calibration needs at least one token".into()));
    }
    if corpus.len() < min_tokens {
        return Err(Error::CorpusTooSmall {
            available: corpus.len(),
            required: min_tokens,
        });
    }
    let tokens = &corpus[..min_tokens];
    let taps: Vec<SiteId> = model.config.sites().collect();
    let mut rec = CaptureRecorder::new(&model.config, &taps);
    for chunk in tokens.chunks(model.config.max_seq_len) {
        rec.run(model, chunk)?;
    }

    let model_fp = model_fingerprint(model)?;
    let mut h = Sha256::new();
    h.update(model_fp.as_bytes());
    h.update((min_tokens as u64).to_le_bytes());
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    Ok(CalibrationCapture {
        model_fingerprint: model_fp,
        calibration_fingerprint: hex::encode(h.finalize()),
        capture: rec.finish(),
    })
}

pub fn save_capture(capture: &CalibrationCapture, path: &Path) -> Result<()> {
    let mut meta = Map::new();
    meta.insert("kind".into(), Value::from("capture"));
    meta.insert("model_fingerprint".into(), Value::from(capture.model_fingerprint.clone()));
    meta.insert(
        "calibration_fingerprint".into(),
        Value::from(capture.calibration_fingerprint.clone()),
    );
    meta.insert("tokens".into(), Value::from(capture.capture.tokens));
    let mut c = Container::new(VERSION_CAPTURE, meta);
    for (site, pair) in &capture.capture.sites {
        c.push(format!("L{}.{}.X", site.layer, site.kind), pair.x.clone());
        c.push(format!("L{}.{}.Y", site.layer, site.kind), pair.y.clone());
    }
    c.write(path)
}

pub fn load_capture(path: &Path) -> Result<CalibrationCapture> {
    let c = Container::read(path, VERSION_CAPTURE)?;
    let model_fingerprint: String = c.meta("model_fingerprint")?;
    let calibration_fingerprint: String = c.meta("calibration_fingerprint")?;
    let tokens: usize = c.meta("tokens")?;
    let mut sites = std::collections::BTreeMap::new();
    let mut iter = c.tensors.into_iter();
    while let Some((xname, x)) = iter.next() {
        let (yname, y) = iter
            .next()
            .ok_or_else(|| Error::Format(format!("{xname} has no matching output tensor")))?;
        let site = parse_site(&xname, "X")?;
        if parse_site(&yname, "Y")? != site {
            return Err(Error::Format(format!("tensor {yname} does not pair with {xname}")));
        }
        if x.cols() != tokens || y.cols() != tokens {
            return Err(Error::Format(format!("capture for {site} does not span {tokens} tokens")));
        }
        sites.insert(site, SiteCapture { x, y });
    }
    Ok(CalibrationCapture {
        model_fingerprint,
        calibration_fingerprint,
        capture: ActivationCapture { sites, tokens },
    })
}

pub(crate) fn parse_site(name: &str, suffix: &str) -> Result<SiteId> {
    let bad = || Error::Format(format!("unrecognized tensor name {name}"));
    let mut parts = name.split('.');
    let layer = parts
        .next()
        .and_then(|p| p.strip_prefix('L'))
        .and_then(|p| p.parse().ok())
        .ok_or_else(bad)?;
    let kind = parts.next().and_then(SiteKind::parse).ok_or_else(bad)?;
    if parts.next() != Some(suffix) || parts.next().is_some() {
        return Err(bad());
    }
    Ok(SiteId { layer, kind })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerConfig;

    fn model() -> ModelWeights {
        let cfg = TransformerConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 256,
            max_seq_len: 6,
        };
        ModelWeights::random(cfg, 2).unwrap()
    }

    #[test]
    fn captures_exactly_min_tokens() {
        let m = model();
        let corpus: Vec<u32> = (0..40).map(|i| (i * 7 % 256) as u32).collect();
        let cap = capture_calibration(&m, &corpus, 17).unwrap();
        assert_eq!(cap.capture.tokens, 17);
        for pair in cap.capture.sites.values() {
            assert_eq!(pair.x.cols(), 17);
            assert_eq!(pair.y.cols(), 17);
        }
        assert_eq!(cap.capture.sites.len(), 4);
    }

    #[test]
    fn corpus_too_small() {
        let m = model();
        assert!(matches!(
            capture_calibration(&m, &[1, 2, 3], 4),
            Err(Error::CorpusTooSmall { available: 3, required: 4 })
        ));
    }

    #[test]
    fn capture_file_round_trip() {
        let m = model();
        let corpus: Vec<u32> = (0..20).collect();
        let cap = capture_calibration(&m, &corpus, 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cap.siev");
        save_capture(&cap, &path).unwrap();
        assert_eq!(load_capture(&path).unwrap(), cap);
    }
}
