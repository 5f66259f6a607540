//! The two-stream vision-language transformer.
//!
//! Questions run through `n_lang` language self-attention layers and image
//! objects through `n_vis` vision layers. The two streams then meet in
//! `n_cross` cross-modal layers, each holding four attention blocks named by
//! their data flow:
//!
//! | kind | queries | keys / values |
//! |------|---------|---------------|
//! | `lang`, `ll` | words | words |
//! | `vis`, `vv` | objects | objects |
//! | `lv` | objects | words |
//! | `vl` | words | objects |
//!
//! Every head of every block is addressed by a [`HeadId`] such as `lv_0_1`
//! (kind, layer, head) and its attention map is captured on each forward.

mod answers;
mod engine;
mod features;
mod weights;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use answers::AnswerVocab;
pub use engine::{AnswerDistribution, ForwardResult, Model};
pub use features::{
    FeatureSource, FeatureStore, VisualFeatureSet, VisualObject, APPEARANCE_DIM, BOX_DIM,
};
pub use weights::{Tensor, WeightSet, MANIFEST_FORMAT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Heads per attention block.
    pub heads: usize,
    pub n_lang: usize,
    pub n_vis: usize,
    pub n_cross: usize,
    pub ffn_dim: usize,
    pub answer_vocab_size: usize,
    pub max_objects: usize,
    /// Word vocabulary size (rows of the token embedding table).
    pub vocab_size: usize,
    /// Positions in the position embedding table.
    pub max_len: usize,
}

impl ModelConfig {
    /// d = 128, 4 heads, 9 language / 5 vision / 5 cross layers, FFN 512,
    /// up to 36 objects and 32 tokens.
    pub fn standard(vocab_size: usize, answer_vocab_size: usize) -> Self {
        Self {
            d: 128,
            heads: 4,
            n_lang: 9,
            n_vis: 5,
            n_cross: 5,
            ffn_dim: 512,
            answer_vocab_size,
            max_objects: 36,
            vocab_size,
            max_len: crate::tokenizer::MAX_LEN,
        }
    }

    /// Small configuration used for reference checks (d = 8, two heads).
    pub fn toy(vocab_size: usize, answer_vocab_size: usize) -> Self {
        Self {
            d: 8,
            heads: 2,
            n_lang: 2,
            n_vis: 1,
            n_cross: 1,
            ffn_dim: 32,
            answer_vocab_size,
            max_objects: 36,
            vocab_size,
            max_len: crate::tokenizer::MAX_LEN,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// `n_lang·h + n_vis·h + 4·n_cross·h`.
    pub fn head_count(&self) -> usize {
        (self.n_lang + self.n_vis + 4 * self.n_cross) * self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("answer_vocab_size", self.answer_vocab_size),
            ("max_objects", self.max_objects),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model config `{name}` must be positive")));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embedding dim {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must allow [CLS] and [SEP]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Word,
    Object,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadKind {
    Lang,
    Vis,
    Lv,
    Vl,
    Ll,
    Vv,
}

impl HeadKind {
    pub const ALL: [HeadKind; 6] = [
        HeadKind::Lang,
        HeadKind::Vis,
        HeadKind::Lv,
        HeadKind::Vl,
        HeadKind::Ll,
        HeadKind::Vv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Lang => "lang",
            HeadKind::Vis => "vis",
            HeadKind::Lv => "lv",
            HeadKind::Vl => "vl",
            HeadKind::Ll => "ll",
            HeadKind::Vv => "vv",
        }
    }

    /// Modality of the map's rows (queries).
    pub fn query_modality(self) -> Modality {
        match self {
            HeadKind::Lang | HeadKind::Vl | HeadKind::Ll => Modality::Word,
            HeadKind::Vis | HeadKind::Lv | HeadKind::Vv => Modality::Object,
        }
    }

    /// Modality of the map's columns (keys).
    pub fn key_modality(self) -> Modality {
        match self {
            HeadKind::Lang | HeadKind::Lv | HeadKind::Ll => Modality::Word,
            HeadKind::Vis | HeadKind::Vl | HeadKind::Vv => Modality::Object,
        }
    }

    pub fn is_cross_modal(self) -> bool {
        matches!(self, HeadKind::Lv | HeadKind::Vl)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown head kind `{s}`")))
    }
}

/// Coordinates of one attention head, rendered as `kind_layer_head`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HeadId {
    pub kind: HeadKind,
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(kind: HeadKind, layer: usize, head: usize) -> Self {
        Self { kind, layer, head }
    }

    pub fn is_valid_for(&self, cfg: &ModelConfig) -> bool {
        let layers = match self.kind {
            HeadKind::Lang => cfg.n_lang,
            HeadKind::Vis => cfg.n_vis,
            _ => cfg.n_cross,
        };
        self.layer < layers && self.head < cfg.heads
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}", self.kind, self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed head id `{s}`, expected kind_layer_head"));
        let mut parts = s.trim().split('_');
        let (Some(kind), Some(layer), Some(head), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        Ok(HeadId {
            kind: kind.parse()?,
            layer: layer.parse().map_err(|_| bad())?,
            head: head.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for HeadId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeadId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All heads in capture order: language layers, vision layers, then per
/// cross layer the `lv`, `vl`, `ll`, `vv` blocks; heads ascending within a
/// block.
pub fn enumerate_heads(cfg: &ModelConfig) -> Vec<HeadId> {
    let mut out = Vec::with_capacity(cfg.head_count());
    let block = |kind, layer, out: &mut Vec<HeadId>| {
        out.extend((0..cfg.heads).map(|h| HeadId::new(kind, layer, h)));
    };
    for i in 0..cfg.n_lang {
        block(HeadKind::Lang, i, &mut out);
    }
    for i in 0..cfg.n_vis {
        block(HeadKind::Vis, i, &mut out);
    }
    for i in 0..cfg.n_cross {
        for kind in [HeadKind::Lv, HeadKind::Vl, HeadKind::Ll, HeadKind::Vv] {
            block(kind, i, &mut out);
        }
    }
    out
}

/// Heads whose attention is replaced by the uniform distribution.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PruneConfig {
    heads: BTreeSet<HeadId>,
}

impl PruneConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every head of the model.
    pub fn all(cfg: &ModelConfig) -> Self {
        enumerate_heads(cfg).into_iter().collect()
    }

    /// Parses a comma separated list such as `lv_0_1,vl_2_3`.
    pub fn parse_list(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }

    pub fn insert(&mut self, head: HeadId) -> bool {
        self.heads.insert(head)
    }

    pub fn remove(&mut self, head: &HeadId) -> bool {
        self.heads.remove(head)
    }

    pub fn contains(&self, head: &HeadId) -> bool {
        self.heads.contains(head)
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &HeadId> {
        self.heads.iter()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        match self.heads.iter().find(|h| !h.is_valid_for(cfg)) {
            Some(h) => Err(Error::invalid(format!("head {h} does not exist in this model"))),
            None => Ok(()),
        }
    }
}

impl FromIterator<HeadId> for PruneConfig {
    fn from_iter<I: IntoIterator<Item = HeadId>>(iter: I) -> Self {
        Self {
            heads: iter.into_iter().collect(),
        }
    }
}
