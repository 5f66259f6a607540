//! Named parameter tensors and the on-disk weight manifest.
//!
//! A model is stored as two files:
//!
//! * `<stem>.json` – the manifest: format tag, [`ModelConfig`], blob file
//!   name and one entry per tensor `{name, shape, offset, hash}`. `offset` is
//!   a byte offset into the blob; `hash` is the 64-bit content hash of the
//!   tensor's bytes (16 hex digits).
//! * `<stem>.bin` – every tensor as little-endian `f32`, row-major.
//!
//! Tensor names follow `stream.layer.block.tensor`, e.g.
//! `cross.3.lv.q.weight`. Linear weights are stored `[out, in]`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, APPEARANCE_DIM, BOX_DIM};
use crate::hash::{content_hash64, ContentHasher};
use crate::{Error, Result};

pub const MANIFEST_FORMAT: &str = "vlscope-weights/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    blob: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    hash: String,
}

fn linear(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, n_out: usize, n_in: usize) {
    out.push((format!("{prefix}.weight"), vec![n_out, n_in]));
    out.push((format!("{prefix}.bias"), vec![n_out]));
}

fn norm(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gain"), vec![d]));
    out.push((format!("{prefix}.bias"), vec![d]));
}

fn attention(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        linear(out, &format!("{prefix}.{p}"), d, d);
    }
    norm(out, &format!("{prefix}.norm"), d);
}

fn ffn(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize, f: usize) {
    linear(out, &format!("{prefix}.up"), f, d);
    linear(out, &format!("{prefix}.down"), d, f);
    norm(out, &format!("{prefix}.norm"), d);
}

/// Every tensor a model with this configuration needs, in storage order.
pub fn required_tensors(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d;
    let mut out = Vec::new();
    out.push(("embed.word.weight".into(), vec![cfg.vocab_size, d]));
    out.push(("embed.position.weight".into(), vec![cfg.max_len, d]));
    norm(&mut out, "embed.word_norm", d);
    linear(&mut out, "embed.visual", d, APPEARANCE_DIM + BOX_DIM);
    norm(&mut out, "embed.visual_norm", d);
    for (stream, n) in [("lang", cfg.n_lang), ("vis", cfg.n_vis)] {
        for i in 0..n {
            attention(&mut out, &format!("{stream}.{i}.attn"), d);
            ffn(&mut out, &format!("{stream}.{i}.ffn"), d, cfg.ffn_dim);
        }
    }
    for i in 0..cfg.n_cross {
        for block in ["lv", "vl", "ll", "vv"] {
            attention(&mut out, &format!("cross.{i}.{block}"), d);
        }
        ffn(&mut out, &format!("cross.{i}.ffn_lang"), d, cfg.ffn_dim);
        ffn(&mut out, &format!("cross.{i}.ffn_vis"), d, cfg.ffn_dim);
    }
    linear(&mut out, "answer.dense", d, d);
    norm(&mut out, "answer.norm", d);
    linear(&mut out, "answer.out", cfg.answer_vocab_size, d);
    out
}

/// A complete, named parameter set for one [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct WeightSet {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    hash: String,
}

impl WeightSet {
    /// All weights and biases zero, norm gains one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut ws = Self::unhashed_zeros(config)?;
        ws.rehash();
        Ok(ws)
    }

    fn unhashed_zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = required_tensors(&config)
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::zeros(shape);
                if name.ends_with(".gain") {
                    t.data.fill(1.0);
                }
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            tensors,
            hash: String::new(),
        })
    }

    /// Seeded random weights. Linear weights are uniform with unit-variance
    /// fan-in scaling times `scale`; biases and norm parameters get small
    /// perturbations so no block is degenerate.
    pub fn random(config: ModelConfig, seed: u64, scale: f32) -> Result<Self> {
        let mut ws = Self::unhashed_zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in ws.tensors.iter_mut() {
            let fan_in = *t.shape.last().unwrap_or(&1) as f32;
            let bound = if name.starts_with("embed.word.") || name.starts_with("embed.position.") {
                1.0
            } else if name.ends_with(".weight") {
                scale * (3.0 / fan_in).sqrt()
            } else {
                0.1
            };
            let centre = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            for v in t.data.iter_mut() {
                *v = centre + rng.random_range(-bound..=bound);
            }
        }
        ws.rehash();
        Ok(ws)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Content hash over configuration and every tensor.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))?;
        if t.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.to_owned(),
                expected: shape.to_vec(),
                actual: t.shape.clone(),
            });
        }
        Ok(t)
    }

    /// Mutable access for hand-set weights; keeps the content hash current.
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut Tensor)) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))?;
        let mut t = slot.clone();
        f(&mut t);
        if t.shape != slot.shape || t.data.len() != slot.data.len() {
            return Err(Error::invalid(format!("update changed the shape of `{name}`")));
        }
        *slot = t;
        self.rehash();
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    fn rehash(&mut self) {
        let mut h = ContentHasher::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        self.hash = h.finish();
    }

    /// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`; returns the
    /// manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob_name = format!("{stem}.bin");
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, _) in required_tensors(&self.config) {
            let t = &self.tensors[&name];
            let bytes = t.to_le_bytes();
            entries.push(ManifestEntry {
                name,
                shape: t.shape.clone(),
                offset: blob.len() as u64,
                hash: content_hash64(&bytes),
            });
            blob.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.to_owned(),
            config: self.config,
            blob: blob_name.clone(),
            tensors: entries,
        };
        let blob_path = dir.join(&blob_name);
        std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let manifest_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
        std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    /// Loads and verifies a manifest and its blob.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let raw = std::fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&raw)
            .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::config(format!(
                "unsupported manifest format `{}`, expected `{MANIFEST_FORMAT}`",
                manifest.format
            )));
        }
        manifest.config.validate()?;
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

        let by_name: BTreeMap<&str, &ManifestEntry> =
            manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut tensors = BTreeMap::new();
        for (name, shape) in required_tensors(&manifest.config) {
            let entry = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if entry.shape != shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    actual: entry.shape.clone(),
                });
            }
            let len = shape.iter().product::<usize>() * 4;
            let start = usize::try_from(entry.offset)
                .map_err(|_| Error::Integrity(format!("offset of `{name}` overflows")))?;
            let bytes = start
                .checked_add(len)
                .and_then(|end| blob.get(start..end))
                .ok_or_else(|| {
                    Error::Integrity(format!("tensor `{name}` extends past the end of the blob"))
                })?;
            if content_hash64(bytes) != entry.hash {
                return Err(Error::Integrity(format!("checksum mismatch for tensor `{name}`")));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!("tensor `{name}` holds non-finite values")));
            }
            tensors.insert(name, Tensor { shape, data });
        }
        let mut ws = Self {
            config: manifest.config,
            tensors,
            hash: String::new(),
        };
        ws.rehash();
        Ok(ws)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig::toy(12, 5)
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ws = WeightSet::random(toy(), 3, 1.0).unwrap();
        let path = ws.save(dir.path(), "model").unwrap();
        let back = WeightSet::load(&path).unwrap();
        assert_eq!(back.hash(), ws.hash());
        for name in ws.names() {
            assert_eq!(ws.get(name), back.get(name), "{name}");
        }
    }

    #[test]
    fn missing_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            n_cross: 3,
            ..toy()
        };
        let path = WeightSet::zeros(cfg).unwrap().save(dir.path(), "m").unwrap();
        let mut manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        manifest["tensors"]
            .as_array_mut()
            .unwrap()
            .retain(|t| t["name"] != "cross.2.lv.q.weight");
        std::fs::write(&path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        let err = WeightSet::load(&path).unwrap_err();
        assert!(matches!(err, Error::MissingTensor(ref n) if n == "cross.2.lv.q.weight"), "{err}");
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = WeightSet::zeros(toy()).unwrap().save(dir.path(), "m").unwrap();
        let mut manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        for t in manifest["tensors"].as_array_mut().unwrap() {
            if t["name"] == "answer.out.weight" {
                t["shape"] = serde_json::json!([4, 8]);
            }
        }
        std::fs::write(&path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        match WeightSet::load(&path).unwrap_err() {
            Error::ShapeMismatch {
                name,
                expected,
                actual,
            } => {
                assert_eq!(name, "answer.out.weight");
                assert_eq!(expected, vec![5, 8]);
                assert_eq!(actual, vec![4, 8]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn corrupted_blob_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let path = WeightSet::random(toy(), 1, 1.0).unwrap().save(dir.path(), "m").unwrap();
        let blob = dir.path().join("m.bin");
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[100] ^= 0xff;
        std::fs::write(&blob, &bytes).unwrap();
        assert!(matches!(WeightSet::load(&path), Err(Error::Integrity(_))));

        bytes.truncate(bytes.len() / 2);
        std::fs::write(&blob, &bytes).unwrap();
        assert!(matches!(WeightSet::load(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn random_is_seed_deterministic() {
        let a = WeightSet::random(toy(), 9, 1.0).unwrap();
        let b = WeightSet::random(toy(), 9, 1.0).unwrap();
        let c = WeightSet::random(toy(), 10, 1.0).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn update_refreshes_hash_and_guards_shape() {
        let mut ws = WeightSet::zeros(toy()).unwrap();
        let before = ws.hash().to_owned();
        ws.update("answer.out.bias", |t| t.data[0] = 1.0).unwrap();
        assert_ne!(ws.hash(), before);
        assert!(ws.update("answer.out.bias", |t| t.data.push(0.0)).is_err());
        assert!(matches!(
            ws.update("nope", |_| {}),
            Err(Error::MissingTensor(_))
        ));
    }
}
