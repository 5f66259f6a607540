//! Batch head pruning: accuracy of a model on a corpus before and after
//! replacing a set of heads with uniform attention, broken down by question
//! operation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{summarize_head, AggKind, BucketThresholds};
use crate::bias::{Corpus, Instance};
use crate::model::{AnswerVocab, FeatureSource, Model, PruneConfig, VisualFeatureSet};
use crate::tokenizer::{tokenize, Vocab};
use crate::{Error, Result, Scalar};

/// Which heads to prune for each instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PruneSelector {
    /// A fixed list (possibly empty).
    Heads(PruneConfig),
    /// Heads whose aggregate k on the instance's unpruned forward falls in
    /// this bucket.
    Bucket(u8),
    All,
}

impl FromStr for PruneSelector {
    type Err = Error;

    /// `all`, `bucket:N` (N in 0..=3), or a comma separated head list.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::All);
        }
        if let Some(n) = s.strip_prefix("bucket:") {
            return match n.trim().parse::<u8>() {
                Ok(b) if b <= 3 => Ok(Self::Bucket(b)),
                _ => Err(Error::invalid(format!("bucket selector `{s}` needs a bucket 0..=3"))),
            };
        }
        PruneConfig::parse_list(s).map(Self::Heads)
    }
}

impl fmt::Display for PruneSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Bucket(b) => write!(f, "bucket:{b}"),
            Self::Heads(p) => {
                let names: Vec<String> = p.iter().map(ToString::to_string).collect();
                f.write_str(&names.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub operation: String,
    pub total: usize,
    pub correct_before: usize,
    pub correct_after: usize,
}

impl AccuracyRow {
    pub fn accuracy_before(&self) -> f64 {
        ratio(self.correct_before, self.total)
    }

    pub fn accuracy_after(&self) -> f64 {
        ratio(self.correct_after, self.total)
    }

    pub fn delta(&self) -> f64 {
        self.accuracy_after() - self.accuracy_before()
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub selector: String,
    /// One row per operation, sorted by name.
    pub by_operation: Vec<AccuracyRow>,
    pub overall: AccuracyRow,
    /// Question ids whose image has no features.
    pub skipped: Vec<String>,
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "prune: {}", self.selector)?;
        writeln!(
            f,
            "{:<16} {:>7} {:>9} {:>9} {:>9}",
            "operation", "n", "before", "after", "delta"
        )?;
        for row in self.by_operation.iter().chain(std::iter::once(&self.overall)) {
            writeln!(
                f,
                "{:<16} {:>7} {:>8.2}% {:>8.2}% {:>+8.2}%",
                row.operation,
                row.total,
                100.0 * row.accuracy_before(),
                100.0 * row.accuracy_after(),
                100.0 * row.delta()
            )?;
        }
        if !self.skipped.is_empty() {
            writeln!(f, "skipped {} instances without features", self.skipped.len())?;
        }
        Ok(())
    }
}

/// Prediction of `model` for one instance under `prune`, as an answer string.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    answers: &AnswerVocab,
    inst: &Instance,
    features: &VisualFeatureSet,
    prune: &PruneConfig,
) -> Result<String> {
    let seq = tokenize(&inst.question, vocab);
    let result = model.forward(&seq, features, prune)?;
    let idx = result.answer.argmax();
    answers
        .answer(idx)
        .map(str::to_owned)
        .ok_or_else(|| Error::config(format!("answer index {idx} outside the answer vocabulary")))
}

/// Accuracy before and after pruning, per operation and overall.
#[allow(clippy::too_many_arguments)]
pub fn ablate<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    answers: &AnswerVocab,
    corpus: &Corpus,
    features: &dyn FeatureSource,
    selector: &PruneSelector,
    agg: AggKind,
    thresholds: &BucketThresholds,
) -> Result<AblationReport> {
    if answers.len() != model.config().answer_vocab_size {
        return Err(Error::config(format!(
            "answer vocabulary has {} entries, model expects {}",
            answers.len(),
            model.config().answer_vocab_size
        )));
    }
    if let PruneSelector::Heads(p) = selector {
        p.validate(model.config())?;
    }
    let all = PruneConfig::all(model.config());
    let outcomes: Vec<Option<(bool, bool)>> = corpus
        .instances()
        .par_iter()
        .map(|inst| {
            let vf = match features.features(&inst.image_id) {
                Ok(vf) => vf,
                Err(Error::NotFound(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let seq = tokenize(&inst.question, vocab);
            let base = model.forward(&seq, &vf, &PruneConfig::new())?;
            let before = answers.answer(base.answer.argmax()) == Some(inst.gt_answer.as_str());
            let prune = match selector {
                PruneSelector::Heads(p) => p.clone(),
                PruneSelector::All => all.clone(),
                PruneSelector::Bucket(b) => base
                    .maps
                    .iter()
                    .filter(|m| summarize_head(m, agg, thresholds).bucket == *b)
                    .map(|m| m.head())
                    .collect(),
            };
            let after = if prune.is_empty() {
                before
            } else {
                let pruned = model.forward(&seq, &vf, &prune)?;
                answers.answer(pruned.answer.argmax()) == Some(inst.gt_answer.as_str())
            };
            Ok(Some((before, after)))
        })
        .collect::<Result<_>>()?;

    let mut rows: BTreeMap<&str, AccuracyRow> = BTreeMap::new();
    let mut overall = AccuracyRow {
        operation: "overall".into(),
        ..Default::default()
    };
    let mut skipped = Vec::new();
    for (inst, outcome) in corpus.instances().iter().zip(outcomes) {
        let Some((before, after)) = outcome else {
            skipped.push(inst.question_id.clone());
            continue;
        };
        let row = rows.entry(&inst.operation).or_insert_with(|| AccuracyRow {
            operation: inst.operation.clone(),
            ..Default::default()
        });
        for r in [row, &mut overall] {
            r.total += 1;
            r.correct_before += before as usize;
            r.correct_after += after as usize;
        }
    }
    Ok(AblationReport {
        selector: selector.to_string(),
        by_operation: rows.into_values().collect(),
        overall,
        skipped,
    })
}
