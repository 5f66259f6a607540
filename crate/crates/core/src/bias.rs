//! Corpus ingestion and answer-frequency bias diagnostics.
//!
//! Questions are grouped by `topic/operation`. Within a group the distinct
//! answers are ranked by count (ties lexicographic); the first fifth of the
//! ranking is the Head set, the last fifth the Tail set. A prediction
//! exploits bias when it is wrong, in the Head, and the truth is in the Tail.
//! Images are ranked by how many Tail questions they carry relative to Head
//! questions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::hash::ContentHasher;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub question_id: String,
    pub image_id: String,
    pub question: String,
    pub gt_answer: String,
    pub operation: String,
    pub topic: String,
}

impl Instance {
    pub fn group_key(&self) -> String {
        format!("{}/{}", self.topic, self.operation)
    }
}

/// Validated list of instances with unique question ids.
#[derive(Debug, Clone)]
pub struct Corpus {
    instances: Vec<Instance>,
    hash: String,
}

fn field<'a>(record: &'a Value, path: &[&str], at: &str) -> Result<&'a Value> {
    let mut v = record;
    for key in path {
        v = v
            .get(key)
            .filter(|x| !x.is_null())
            .ok_or_else(|| Error::config(format!("{at}: missing field `{}`", path.join("."))))?;
    }
    Ok(v)
}

fn string_field(record: &Value, path: &[&str], at: &str) -> Result<String> {
    let s = match field(record, path, at)? {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => {
            return Err(Error::config(format!(
                "{at}: field `{}` must be a string",
                path.join(".")
            )))
        }
    };
    if s.trim().is_empty() {
        return Err(Error::config(format!("{at}: field `{}` is empty", path.join("."))));
    }
    Ok(s)
}

impl Corpus {
    pub fn from_instances(instances: Vec<Instance>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(instances.len());
        let mut hasher = ContentHasher::new();
        for inst in &instances {
            if !seen.insert(inst.question_id.as_str()) {
                return Err(Error::config(format!(
                    "duplicate question_id `{}`",
                    inst.question_id
                )));
            }
            if inst.gt_answer.is_empty() {
                return Err(Error::config(format!(
                    "question `{}` has an empty answer",
                    inst.question_id
                )));
            }
            for part in [
                &inst.question_id,
                &inst.image_id,
                &inst.question,
                &inst.gt_answer,
                &inst.operation,
                &inst.topic,
            ] {
                hasher.update(part.as_bytes());
                hasher.update([0u8]);
            }
            hasher.update([0xffu8]);
        }
        Ok(Self {
            instances,
            hash: hasher.finish(),
        })
    }

    /// One JSON record per line:
    /// `{question_id, image_id, question, answer, group: {operation, topic}}`.
    /// Ids may be strings or numbers; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut instances = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let at = format!("record at line {}", n + 1);
            let record: Value =
                serde_json::from_str(line).map_err(|e| Error::json(at.clone(), e))?;
            let question_id = string_field(&record, &["question_id"], &at)?;
            let at = format!("{at} (question_id {question_id})");
            instances.push(Instance {
                image_id: string_field(&record, &["image_id"], &at)?,
                question: string_field(&record, &["question"], &at)?,
                gt_answer: string_field(&record, &["answer"], &at)?,
                operation: string_field(&record, &["group", "operation"], &at)?,
                topic: string_field(&record, &["group", "topic"], &at)?,
                question_id,
            });
        }
        Self::from_instances(instances)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// JSON lines in the format accepted by [`Corpus::parse`].
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for i in &self.instances {
            let record = serde_json::json!({
                "question_id": i.question_id,
                "image_id": i.image_id,
                "question": i.question,
                "answer": i.gt_answer,
                "group": { "operation": i.operation, "topic": i.topic },
            });
            out.push_str(&record.to_string());
            out.push('\n');
        }
        out
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, question_id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.question_id == question_id)
    }

    /// Content hash over all records, in order.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerClass {
    Head,
    Tail,
    Mid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupFrequencyTable {
    pub group_key: String,
    pub counts: BTreeMap<String, usize>,
    /// Distinct answers, most frequent first, ties lexicographic.
    pub ranked: Vec<String>,
    pub head_set: BTreeSet<String>,
    pub tail_set: BTreeSet<String>,
}

impl GroupFrequencyTable {
    pub fn from_counts(group_key: impl Into<String>, counts: BTreeMap<String, usize>) -> Self {
        let mut ranked: Vec<String> = counts.keys().cloned().collect();
        ranked.sort_by(|a, b| counts[b].cmp(&counts[a]).then_with(|| a.cmp(b)));
        let (head_set, tail_set) = partition(&ranked);
        Self {
            group_key: group_key.into(),
            counts,
            ranked,
            head_set,
            tail_set,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn classify(&self, answer: &str) -> AnswerClass {
        if self.head_set.contains(answer) {
            AnswerClass::Head
        } else if self.tail_set.contains(answer) {
            AnswerClass::Tail
        } else {
            AnswerClass::Mid
        }
    }
}

/// Head = first `ceil(A/5)` ranked answers, tail = last `ceil(A/5)`; with
/// fewer than three answers, the top and (if different) the bottom one.
fn partition(ranked: &[String]) -> (BTreeSet<String>, BTreeSet<String>) {
    let a = ranked.len();
    if a == 0 {
        return Default::default();
    }
    if a < 3 {
        let head = BTreeSet::from([ranked[0].clone()]);
        let tail = if a == 2 {
            BTreeSet::from([ranked[1].clone()])
        } else {
            BTreeSet::new()
        };
        return (head, tail);
    }
    let n = a.div_ceil(5);
    (
        ranked[..n].iter().cloned().collect(),
        ranked[a - n..].iter().cloned().collect(),
    )
}

/// Frequency tables of every group in a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTables {
    groups: BTreeMap<String, GroupFrequencyTable>,
}

impl FrequencyTables {
    pub fn get(&self, group_key: &str) -> Option<&GroupFrequencyTable> {
        self.groups.get(group_key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &GroupFrequencyTable> {
        self.groups.values()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    fn table_for(&self, inst: &Instance) -> Result<&GroupFrequencyTable> {
        let key = inst.group_key();
        self.groups
            .get(&key)
            .ok_or_else(|| Error::invalid(format!("unknown question group `{key}`")))
    }
}

pub fn answer_frequencies(corpus: &Corpus) -> FrequencyTables {
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for inst in corpus.instances() {
        *counts
            .entry(inst.group_key())
            .or_default()
            .entry(inst.gt_answer.clone())
            .or_default() += 1;
    }
    FrequencyTables {
        groups: counts
            .into_iter()
            .map(|(k, c)| (k.clone(), GroupFrequencyTable::from_counts(k, c)))
            .collect(),
    }
}

pub fn classify_question(inst: &Instance, tables: &FrequencyTables) -> Result<AnswerClass> {
    Ok(tables.table_for(inst)?.classify(&inst.gt_answer))
}

/// Wrong prediction from the Head set on a question whose truth is in the
/// Tail set.
pub fn bias_flag(predicted: &str, inst: &Instance, tables: &FrequencyTables) -> Result<bool> {
    let table = tables.table_for(inst)?;
    Ok(predicted != inst.gt_answer
        && table.head_set.contains(predicted)
        && table.tail_set.contains(&inst.gt_answer))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub n_head: usize,
    pub n_tail: usize,
    /// `(n_tail + 1) / (n_head + 1)`.
    pub score: f64,
}

/// Exact ordering of `(t1+1)/(h1+1)` against `(t2+1)/(h2+1)`.
fn cmp_score(a: &ImageScore, b: &ImageScore) -> Ordering {
    let lhs = (a.n_tail as u128 + 1) * (b.n_head as u128 + 1);
    let rhs = (b.n_tail as u128 + 1) * (a.n_head as u128 + 1);
    lhs.cmp(&rhs)
}

/// Every distinct image of the corpus, most Tail-heavy first, ties by id.
pub fn rank_images(corpus: &Corpus, tables: &FrequencyTables) -> Result<Vec<ImageScore>> {
    let mut per_image: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for inst in corpus.instances() {
        let entry = per_image.entry(inst.image_id.as_str()).or_default();
        match classify_question(inst, tables)? {
            AnswerClass::Head => entry.0 += 1,
            AnswerClass::Tail => entry.1 += 1,
            AnswerClass::Mid => {}
        }
    }
    let mut scores: Vec<ImageScore> = per_image
        .into_iter()
        .map(|(id, (n_head, n_tail))| ImageScore {
            image_id: id.to_owned(),
            n_head,
            n_tail,
            score: (n_tail as f64 + 1.0) / (n_head as f64 + 1.0),
        })
        .collect();
    scores.sort_by(|a, b| cmp_score(b, a).then_with(|| a.image_id.cmp(&b.image_id)));
    Ok(scores)
}
