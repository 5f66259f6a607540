//! Per-head k-number distributions over a whole corpus.
//!
//! Every instance is run once through the unpruned model; each head keeps
//! one aggregate k per instance and a bucket histogram per question
//! operation. Results are persisted as JSON so the CLI and the server share
//! them:
//!
//! ```json
//! {
//!   "format": "vlscope-stats/1",
//!   "model_hash": "…", "corpus_hash": "…", "agg": "median",
//!   "thresholds": [0.12, 0.3, 0.6],
//!   "question_ids": ["q1", "q2"],
//!   "skipped": ["q3"],
//!   "heads": [
//!     { "head": "lang_0_0", "k_values": [0.25, 0.5],
//!       "by_operation": { "query": [1, 0, 1, 0] } }
//!   ]
//! }
//! ```
//!
//! `k_values[i]` belongs to `question_ids[i]`; instances whose image has no
//! features are listed in `skipped` instead.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{summarize_head, AggKind, BucketThresholds};
use crate::bias::Corpus;
use crate::model::{FeatureSource, HeadId, Model, PruneConfig};
use crate::tokenizer::{tokenize, Vocab};
use crate::{Error, Result, Scalar};

pub const STATS_FORMAT: &str = "vlscope-stats/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDatasetStats {
    pub head: HeadId,
    pub k_values: Vec<f64>,
    /// Operation → instance count per bucket.
    pub by_operation: BTreeMap<String, [usize; 4]>,
}

impl HeadDatasetStats {
    pub fn total(&self) -> usize {
        self.by_operation.values().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub format: String,
    pub model_hash: String,
    pub corpus_hash: String,
    pub agg: AggKind,
    pub thresholds: BucketThresholds,
    pub question_ids: Vec<String>,
    pub skipped: Vec<String>,
    pub heads: Vec<HeadDatasetStats>,
}

/// Aggregate k and bucket of every head on one instance.
type InstanceRow = (String, String, Vec<(f64, u8)>);

impl DatasetStats {
    pub fn head(&self, head: &HeadId) -> Option<&HeadDatasetStats> {
        self.heads.iter().find(|h| h.head == *head)
    }

    /// Whether this cache entry answers a request for the given key.
    pub fn matches(
        &self,
        model_hash: &str,
        corpus_hash: &str,
        agg: AggKind,
        thresholds: &BucketThresholds,
    ) -> bool {
        self.format == STATS_FORMAT
            && self.model_hash == model_hash
            && self.corpus_hash == corpus_hash
            && self.agg == agg
            && self.thresholds == *thresholds
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::json("stats cache", e))?;
        // write-then-rename so readers never see a partial file
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        if stats.format != STATS_FORMAT {
            return Err(Error::Integrity(format!(
                "{}: unsupported stats format `{}`",
                path.display(),
                stats.format
            )));
        }
        let n = stats.question_ids.len();
        if stats.heads.iter().any(|h| h.k_values.len() != n || h.total() != n) {
            return Err(Error::Integrity(format!(
                "{}: per-head counts disagree with the instance list",
                path.display()
            )));
        }
        Ok(stats)
    }
}

pub fn cache_file_name(model_hash: &str, corpus_hash: &str, agg: AggKind) -> String {
    format!("stats-{model_hash}-{corpus_hash}-{agg}.json")
}

/// Runs every corpus instance through `model` without pruning and collects
/// per-head aggregate k-numbers. Instances whose features are missing are
/// skipped; any other failure aborts.
pub fn build_dataset_stats<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    corpus: &Corpus,
    features: &dyn FeatureSource,
    agg: AggKind,
    thresholds: &BucketThresholds,
) -> Result<DatasetStats> {
    thresholds.validate()?;
    let prune = PruneConfig::new();
    let rows: Vec<Option<InstanceRow>> = corpus
        .instances()
        .par_iter()
        .map(|inst| {
            let vf = match features.features(&inst.image_id) {
                Ok(vf) => vf,
                Err(Error::NotFound(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let seq = tokenize(&inst.question, vocab);
            let result = model.forward(&seq, &vf, &prune)?;
            let per_head = result
                .maps
                .iter()
                .map(|m| {
                    let s = summarize_head(m, agg, thresholds);
                    (s.aggregate, s.bucket)
                })
                .collect();
            Ok(Some((inst.question_id.clone(), inst.operation.clone(), per_head)))
        })
        .collect::<Result<_>>()?;

    let heads = model.heads();
    let mut stats: Vec<HeadDatasetStats> = heads
        .iter()
        .map(|&head| HeadDatasetStats {
            head,
            k_values: Vec::new(),
            by_operation: BTreeMap::new(),
        })
        .collect();
    let mut question_ids = Vec::new();
    let mut skipped = Vec::new();
    for (inst, row) in corpus.instances().iter().zip(rows) {
        let Some((qid, operation, per_head)) = row else {
            skipped.push(inst.question_id.clone());
            continue;
        };
        question_ids.push(qid);
        for (s, (k, bucket)) in stats.iter_mut().zip(per_head) {
            s.k_values.push(k);
            s.by_operation.entry(operation.clone()).or_insert([0; 4])[bucket as usize] += 1;
        }
    }
    Ok(DatasetStats {
        format: STATS_FORMAT.to_owned(),
        model_hash: model.hash().to_owned(),
        corpus_hash: corpus.hash().to_owned(),
        agg,
        thresholds: *thresholds,
        question_ids,
        skipped,
        heads: stats,
    })
}

/// Statistics of a single head (computes the whole corpus pass).
pub fn head_dataset_stats<T: Scalar>(
    head: HeadId,
    model: &Model<T>,
    vocab: &Vocab,
    corpus: &Corpus,
    features: &dyn FeatureSource,
    agg: AggKind,
    thresholds: &BucketThresholds,
) -> Result<HeadDatasetStats> {
    if !head.is_valid_for(model.config()) {
        return Err(Error::NotFound(format!("head {head}")));
    }
    let all = build_dataset_stats(model, vocab, corpus, features, agg, thresholds)?;
    all.heads
        .into_iter()
        .find(|h| h.head == head)
        .ok_or_else(|| Error::NotFound(format!("head {head}")))
}

/// Reads the cache file for this key from `dir`, or builds and writes it.
/// Returns the stats and whether they were freshly built.
pub fn load_or_build<T: Scalar>(
    dir: impl AsRef<Path>,
    model: &Model<T>,
    vocab: &Vocab,
    corpus: &Corpus,
    features: &dyn FeatureSource,
    agg: AggKind,
    thresholds: &BucketThresholds,
) -> Result<(DatasetStats, bool)> {
    let path: PathBuf = dir
        .as_ref()
        .join(cache_file_name(model.hash(), corpus.hash(), agg));
    if path.exists() {
        if let Ok(stats) = DatasetStats::load(&path) {
            if stats.matches(model.hash(), corpus.hash(), agg, thresholds) {
                return Ok((stats, false));
            }
        }
    }
    let stats = build_dataset_stats(model, vocab, corpus, features, agg, thresholds)?;
    stats.save(&path)?;
    Ok((stats, true))
}
