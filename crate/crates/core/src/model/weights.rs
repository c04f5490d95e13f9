use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::container::{Container, VERSION_MODEL};
use crate::error::{Error, Result};
use crate::linalg::{seeded_rng, svd, Matrix, SeededRng};
use crate::model::{SiteId, SiteKind, TransformerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `3·d_model × d_model`; rows are the Q, K and V projections stacked.
    pub w_qkv: Matrix,
    pub w_o: Matrix,
    /// `d_ff × d_model`.
    pub w_1: Matrix,
    pub b_1: Vec<f64>,
    /// `d_model × d_ff`.
    pub w_2: Matrix,
    pub b_2: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: TransformerConfig,
    /// `vocab × d_model`.
    pub tok_emb: Matrix,
    /// `max_seq_len × d_model`.
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Vec<f64>,
    pub lnf_bias: Vec<f64>,
    /// `vocab × d_model`, untied from the token embedding.
    pub unembed: Matrix,
}

/// Controls the seeded random initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    /// Singular value `i` of each projection is scaled by
    /// `exp(-spectral_decay · i / min(d_in, d_out))` before the matrix is
    /// renormalized. Zero gives plain Gaussian matrices.
    pub spectral_decay: f64,
    pub embedding_std: f64,
    pub bias_std: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            spectral_decay: 10.0,
            embedding_std: 1.0,
            bias_std: 0.1,
        }
    }
}

impl ModelWeights {
    pub fn random(config: TransformerConfig, seed: u64) -> Result<Self> {
        Self::random_with(config, seed, &InitOptions::default())
    }

    pub fn random_with(config: TransformerConfig, seed: u64, init: &InitOptions) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let d = config.d_model;
        let tok_emb = Matrix::random_normal(config.vocab_size, d, init.embedding_std, &mut rng);
        let pos_emb = Matrix::random_normal(config.max_seq_len, d, init.embedding_std * 0.5, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut site = |kind| {
                let (d_in, d_out) = config.site_dims(kind);
                projection(d_in, d_out, init.spectral_decay, &mut rng)
            };
            let w_qkv = site(SiteKind::Qkv)?;
            let w_o = site(SiteKind::Out)?;
            let w_1 = site(SiteKind::Ffn1)?;
            let w_2 = site(SiteKind::Ffn2)?;
            let b_1 = Matrix::random_normal(1, config.d_ff, init.bias_std, &mut rng).into_vec();
            let b_2 = Matrix::random_normal(1, d, init.bias_std, &mut rng).into_vec();
            layers.push(LayerWeights {
                w_qkv,
                w_o,
                w_1,
                b_1,
                w_2,
                b_2,
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
            });
        }
        let unembed = Matrix::random_normal(config.vocab_size, d, 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: vec![1.0; d],
            lnf_bias: vec![0.0; d],
            unembed,
        })
    }

    pub fn site_weight(&self, site: SiteId) -> &Matrix {
        let l = &self.layers[site.layer];
        match site.kind {
            SiteKind::Qkv => &l.w_qkv,
            SiteKind::Out => &l.w_o,
            SiteKind::Ffn1 => &l.w_1,
            SiteKind::Ffn2 => &l.w_2,
        }
    }

    pub fn site_weight_mut(&mut self, site: SiteId) -> &mut Matrix {
        let l = &mut self.layers[site.layer];
        match site.kind {
            SiteKind::Qkv => &mut l.w_qkv,
            SiteKind::Out => &mut l.w_o,
            SiteKind::Ffn1 => &mut l.w_1,
            SiteKind::Ffn2 => &mut l.w_2,
        }
    }

    /// Every tensor in container order.
    pub fn tensors(&self) -> Vec<(String, Matrix)> {
        let row = |v: &[f64]| Matrix::from_vec(1, v.len(), v.to_vec()).expect("row vector");
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("w_qkv"), l.w_qkv.clone()),
                (p("w_o"), l.w_o.clone()),
                (p("w_1"), l.w_1.clone()),
                (p("b_1"), row(&l.b_1)),
                (p("w_2"), l.w_2.clone()),
                (p("b_2"), row(&l.b_2)),
                (p("ln1_gain"), row(&l.ln1_gain)),
                (p("ln1_bias"), row(&l.ln1_bias)),
                (p("ln2_gain"), row(&l.ln2_gain)),
                (p("ln2_bias"), row(&l.ln2_bias)),
            ]);
        }
        out.extend([
            ("lnf_gain".to_string(), row(&self.lnf_gain)),
            ("lnf_bias".to_string(), row(&self.lnf_bias)),
            ("unembed".to_string(), self.unembed.clone()),
        ]);
        out
    }

    pub fn to_container(&self) -> Container {
        let mut meta = Map::new();
        meta.insert("kind".into(), Value::from("model"));
        meta.insert(
            "config".into(),
            serde_json::to_value(self.config).expect("config serializes"),
        );
        let mut c = Container::new(VERSION_MODEL, meta);
        for (name, m) in self.tensors() {
            c.push(name, m);
        }
        c
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes, VERSION_MODEL)?)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let config: TransformerConfig = c.meta("config")?;
        config
            .validate()
            .map_err(|e| Error::Format(format!("stored config invalid: {e}")))?;
        let (v, d, f, t) = (config.vocab_size, config.d_model, config.d_ff, config.max_seq_len);
        let mut r = c.into_reader();
        let tok_emb = r.next("tok_emb", (v, d))?;
        let pos_emb = r.next("pos_emb", (t, d))?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |n: &str| format!("layers.{i}.{n}");
            let w_qkv = r.next(&p("w_qkv"), (3 * d, d))?;
            let w_o = r.next(&p("w_o"), (d, d))?;
            let w_1 = r.next(&p("w_1"), (f, d))?;
            let b_1 = r.next(&p("b_1"), (1, f))?.into_vec();
            let w_2 = r.next(&p("w_2"), (d, f))?;
            let b_2 = r.next(&p("b_2"), (1, d))?.into_vec();
            let ln1_gain = r.next(&p("ln1_gain"), (1, d))?.into_vec();
            let ln1_bias = r.next(&p("ln1_bias"), (1, d))?.into_vec();
            let ln2_gain = r.next(&p("ln2_gain"), (1, d))?.into_vec();
            let ln2_bias = r.next(&p("ln2_bias"), (1, d))?.into_vec();
            layers.push(LayerWeights {
                w_qkv,
                w_o,
                w_1,
                b_1,
                w_2,
                b_2,
                ln1_gain,
                ln1_bias,
                ln2_gain,
                ln2_bias,
            });
        }
        let lnf_gain = r.next("lnf_gain", (1, d))?.into_vec();
        let lnf_bias = r.next("lnf_bias", (1, d))?.into_vec();
        let unembed = r.next("unembed", (v, d))?;
        r.finish()?;
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_gain,
            lnf_bias,
            unembed,
        })
    }
}

fn projection(d_in: usize, d_out: usize, decay: f64, rng: &mut SeededRng) -> Result<Matrix> {
    let g = Matrix::random_normal(d_out, d_in, 1.0 / (d_in as f64).sqrt(), rng);
    if decay == 0.0 {
        return Ok(g);
    }
    let mut s = svd(&g)?;
    let k = s.sigma.len() as f64;
    for (i, sigma) in s.sigma.iter_mut().enumerate() {
        *sigma *= (-decay * i as f64 / k).exp();
    }
    let shaped = s.reconstruct();
    Ok(shaped.scale(g.frobenius_norm() / shaped.frobenius_norm()))
}

pub fn save_model(model: &ModelWeights, path: &Path) -> Result<()> {
    model.to_container().write(path)
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    ModelWeights::from_container(Container::read(path, VERSION_MODEL)?)
}

/// SHA-256 of the serialized container, hex encoded.
pub fn model_fingerprint(model: &ModelWeights) -> Result<String> {
    Ok(hex::encode(Sha256::digest(model.to_bytes()?)))
}
