//! Attention-capturing forward pass.
//!
//! Blocks are post-norm: `x ← LN(x + Attn(x, ctx))`, then
//! `x ← LN(x + W_down · gelu(W_up · x))`. In a cross layer the `lv` and `vl`
//! blocks both read the layer's input streams; `ll` and `vv` self-attention
//! and the per-stream feed-forward blocks follow. The answer is decoded from
//! the final `[CLS]` row by `dense → gelu → LN → dense → softmax`.

use crate::analytics::AttentionMap;
use crate::gemm::PackedBt;
use crate::math::{
    gelu, gemm_bt, layer_norm_rows, matmul_transposed, scaled_dot_attention, softmax_rows, Matrix,
    LAYER_NORM_EPS, WIDE_DOT_THRESHOLD,
};
use crate::tokenizer::TokenSequence;
use crate::{Error, Result, Scalar};

use super::weights::WeightSet;
use super::{
    enumerate_heads, HeadId, HeadKind, Modality, ModelConfig, PruneConfig, VisualFeatureSet,
    APPEARANCE_DIM, BOX_DIM,
};

/// Number of ranked answers exposed in [`AnswerDistribution::top5`].
pub const TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution<T> {
    /// Probability per answer-vocabulary entry.
    pub scores: Vec<T>,
    /// `(answer index, probability)`, probability descending, ties by index.
    pub top5: Vec<(usize, T)>,
}

impl<T: Scalar> AnswerDistribution<T> {
    pub fn from_scores(scores: Vec<T>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let top5 = order.into_iter().take(TOP_K).map(|i| (i, scores[i])).collect();
        Self { scores, top5 }
    }

    /// Index of the highest-probability answer.
    pub fn argmax(&self) -> usize {
        self.top5[0].0
    }
}

/// Everything one forward pass produced.
#[derive(Debug, Clone)]
pub struct ForwardResult<T> {
    pub logits: Vec<T>,
    pub answer: AnswerDistribution<T>,
    /// One map per head, in [`enumerate_heads`] order.
    pub maps: Vec<AttentionMap<T>>,
    /// Token strings of the question, `[CLS]` … `[SEP]`.
    pub words: Vec<String>,
    /// Object labels, one per detection.
    pub objects: Vec<String>,
}

impl<T: Scalar> ForwardResult<T> {
    pub fn map(&self, head: &HeadId) -> Option<&AttentionMap<T>> {
        self.maps.iter().find(|m| m.head() == *head)
    }

    pub fn labels(&self, modality: Modality) -> &[String] {
        match modality {
            Modality::Word => &self.words,
            Modality::Object => &self.objects,
        }
    }
}

#[derive(Debug, Clone)]
struct Linear<T> {
    /// `[out, in]`
    weight: Matrix<T>,
    /// `weight` packed once, for layers whose products accumulate in `f64`.
    wide: Option<PackedBt>,
    bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    fn load(ws: &WeightSet, prefix: &str, n_out: usize, n_in: usize) -> Result<Self> {
        let w = ws.expect(&format!("{prefix}.weight"), &[n_out, n_in])?;
        let b = ws.expect(&format!("{prefix}.bias"), &[n_out])?;
        let weight = Matrix::new(n_out, n_in, cast(&w.data))?;
        let wide = (n_in > WIDE_DOT_THRESHOLD)
            .then(|| PackedBt::new(weight.data(), n_out, n_in));
        Ok(Self {
            weight,
            wide,
            bias: cast(&b.data),
        })
    }

    fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = match &self.wide {
            Some(w) if x.cols() == self.weight.cols() => gemm_bt(x, w),
            _ => matmul_transposed(x, &self.weight)?,
        };
        y.add_row_bias(&self.bias)?;
        Ok(y)
    }
}

#[derive(Debug, Clone)]
struct Norm<T> {
    gain: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> Norm<T> {
    fn load(ws: &WeightSet, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: cast(&ws.expect(&format!("{prefix}.gain"), &[d])?.data),
            bias: cast(&ws.expect(&format!("{prefix}.bias"), &[d])?.data),
        })
    }

    fn apply(&self, x: &mut Matrix<T>) -> Result<()> {
        layer_norm_rows(x, &self.gain, &self.bias, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
struct AttentionBlock<T> {
    q: Linear<T>,
    k: Linear<T>,
    v: Linear<T>,
    o: Linear<T>,
    norm: Norm<T>,
}

impl<T: Scalar> AttentionBlock<T> {
    fn load(ws: &WeightSet, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::load(ws, &format!("{prefix}.q"), d, d)?,
            k: Linear::load(ws, &format!("{prefix}.k"), d, d)?,
            v: Linear::load(ws, &format!("{prefix}.v"), d, d)?,
            o: Linear::load(ws, &format!("{prefix}.o"), d, d)?,
            norm: Norm::load(ws, &format!("{prefix}.norm"), d)?,
        })
    }
}

#[derive(Debug, Clone)]
struct FeedForward<T> {
    up: Linear<T>,
    down: Linear<T>,
    norm: Norm<T>,
}

impl<T: Scalar> FeedForward<T> {
    fn load(ws: &WeightSet, prefix: &str, d: usize, f: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::load(ws, &format!("{prefix}.up"), f, d)?,
            down: Linear::load(ws, &format!("{prefix}.down"), d, f)?,
            norm: Norm::load(ws, &format!("{prefix}.norm"), d)?,
        })
    }

    fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut hidden = self.up.apply(x)?;
        hidden.map_in_place(gelu);
        let mut y = x.add(&self.down.apply(&hidden)?)?;
        self.norm.apply(&mut y)?;
        Ok(y)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer<T> {
    attn: AttentionBlock<T>,
    ffn: FeedForward<T>,
}

#[derive(Debug, Clone)]
struct CrossLayer<T> {
    lv: AttentionBlock<T>,
    vl: AttentionBlock<T>,
    ll: AttentionBlock<T>,
    vv: AttentionBlock<T>,
    ffn_lang: FeedForward<T>,
    ffn_vis: FeedForward<T>,
}

#[derive(Debug, Clone)]
struct AnswerHead<T> {
    dense: Linear<T>,
    norm: Norm<T>,
    out: Linear<T>,
}

/// An immutable, shareable model instance.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    hash: String,
    word_embed: Matrix<T>,
    position_embed: Matrix<T>,
    word_norm: Norm<T>,
    visual: Linear<T>,
    visual_norm: Norm<T>,
    lang: Vec<EncoderLayer<T>>,
    vis: Vec<EncoderLayer<T>>,
    cross: Vec<CrossLayer<T>>,
    answer: AnswerHead<T>,
}

fn cast<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::of(x as f64)).collect()
}

/// Per-forward state: prune set, token labels and the capture buffer.
struct Capture<'a, T> {
    prune: &'a PruneConfig,
    words: &'a [String],
    objects: &'a [String],
    maps: Vec<AttentionMap<T>>,
}

impl<T: Scalar> Capture<'_, T> {
    fn labels(&self, m: Modality) -> &[String] {
        match m {
            Modality::Word => self.words,
            Modality::Object => self.objects,
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn from_weights(ws: &WeightSet) -> Result<Self> {
        let cfg = *ws.config();
        cfg.validate()?;
        let d = cfg.d;
        let f = cfg.ffn_dim;
        let table = |name: &str, rows: usize| -> Result<Matrix<T>> {
            Matrix::new(rows, d, cast(&ws.expect(name, &[rows, d])?.data))
        };
        let encoder = |stream: &str, n: usize| -> Result<Vec<EncoderLayer<T>>> {
            (0..n)
                .map(|i| {
                    Ok(EncoderLayer {
                        attn: AttentionBlock::load(ws, &format!("{stream}.{i}.attn"), d)?,
                        ffn: FeedForward::load(ws, &format!("{stream}.{i}.ffn"), d, f)?,
                    })
                })
                .collect()
        };
        let cross = (0..cfg.n_cross)
            .map(|i| {
                let block = |b: &str| AttentionBlock::load(ws, &format!("cross.{i}.{b}"), d);
                Ok(CrossLayer {
                    lv: block("lv")?,
                    vl: block("vl")?,
                    ll: block("ll")?,
                    vv: block("vv")?,
                    ffn_lang: FeedForward::load(ws, &format!("cross.{i}.ffn_lang"), d, f)?,
                    ffn_vis: FeedForward::load(ws, &format!("cross.{i}.ffn_vis"), d, f)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg,
            hash: ws.hash().to_owned(),
            word_embed: table("embed.word.weight", cfg.vocab_size)?,
            position_embed: table("embed.position.weight", cfg.max_len)?,
            word_norm: Norm::load(ws, "embed.word_norm", d)?,
            visual: Linear::load(ws, "embed.visual", d, APPEARANCE_DIM + BOX_DIM)?,
            visual_norm: Norm::load(ws, "embed.visual_norm", d)?,
            lang: encoder("lang", cfg.n_lang)?,
            vis: encoder("vis", cfg.n_vis)?,
            cross,
            answer: AnswerHead {
                dense: Linear::load(ws, "answer.dense", d, d)?,
                norm: Norm::load(ws, "answer.norm", d)?,
                out: Linear::load(ws, "answer.out", cfg.answer_vocab_size, d)?,
            },
        })
    }

    /// Loads a weight manifest (see [`WeightSet::load`]).
    pub fn load(manifest: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_weights(&WeightSet::load(manifest)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Content hash of the weights this model was built from.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn heads(&self) -> Vec<HeadId> {
        enumerate_heads(&self.config)
    }

    /// `LN(token_embedding[id_i] + position_embedding[i])` per token.
    pub fn embed_language(&self, seq: &TokenSequence) -> Result<Matrix<T>> {
        let ids = seq.ids();
        if ids.is_empty() || ids.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "sequence length {} outside 1..={}",
                ids.len(),
                self.config.max_len
            )));
        }
        let d = self.config.d;
        let mut data = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(Error::invalid(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            let tok = self.word_embed.row(id);
            let p = self.position_embed.row(pos);
            data.extend(tok.iter().zip(p).map(|(&a, &b)| a + b));
        }
        let mut x = Matrix::new(ids.len(), d, data)?;
        self.word_norm.apply(&mut x)?;
        Ok(x)
    }

    /// `LN(W · [appearance ; box] + b)` per object.
    pub fn embed_vision(&self, vf: &VisualFeatureSet) -> Result<Matrix<T>> {
        vf.validate(self.config.max_objects)?;
        let width = APPEARANCE_DIM + BOX_DIM;
        let mut data = Vec::with_capacity(vf.len() * width);
        for o in &vf.objects {
            data.extend(o.appearance.iter().chain(&o.bbox).map(|&v| T::of(v as f64)));
        }
        let input = Matrix::new(vf.len(), width, data)?;
        let mut x = self.visual.apply(&input)?;
        self.visual_norm.apply(&mut x)?;
        Ok(x)
    }

    /// Runs the answer head on a final `[CLS]` embedding. Returns the logits
    /// and the resulting distribution.
    pub fn predict_answer(&self, cls: &[T]) -> Result<(Vec<T>, AnswerDistribution<T>)> {
        if cls.len() != self.config.d {
            return Err(Error::invalid(format!(
                "CLS vector has dim {}, expected {}",
                cls.len(),
                self.config.d
            )));
        }
        let x = Matrix::new(1, cls.len(), cls.to_vec())?;
        let mut hidden = self.answer.dense.apply(&x)?;
        hidden.map_in_place(gelu);
        self.answer.norm.apply(&mut hidden)?;
        let logits = self.answer.out.apply(&hidden)?;
        let probs = softmax_rows(&logits)?;
        Ok((
            logits.into_data(),
            AnswerDistribution::from_scores(probs.into_data()),
        ))
    }

    fn attend(
        &self,
        block: &AttentionBlock<T>,
        kind: HeadKind,
        layer: usize,
        queries: &Matrix<T>,
        context: &Matrix<T>,
        cap: &mut Capture<'_, T>,
    ) -> Result<Matrix<T>> {
        let dh = self.config.head_dim();
        let q = block.q.apply(queries)?;
        let k = block.k.apply(context)?;
        let v = block.v.apply(context)?;
        let mut heads_out = Matrix::zeros(queries.rows(), self.config.d);
        for h in 0..self.config.heads {
            let id = HeadId::new(kind, layer, h);
            let (out, map) = scaled_dot_attention(
                &q.column_block(h * dh, dh)?,
                &k.column_block(h * dh, dh)?,
                &v.column_block(h * dh, dh)?,
                cap.prune.contains(&id),
            )?;
            heads_out.set_column_block(h * dh, &out)?;
            let rows = cap.labels(kind.query_modality()).to_vec();
            let cols = cap.labels(kind.key_modality()).to_vec();
            cap.maps.push(AttentionMap::new(id, map, rows, cols)?);
        }
        let mut x = queries.add(&block.o.apply(&heads_out)?)?;
        block.norm.apply(&mut x)?;
        Ok(x)
    }

    pub fn forward(
        &self,
        seq: &TokenSequence,
        vf: &VisualFeatureSet,
        prune: &PruneConfig,
    ) -> Result<ForwardResult<T>> {
        prune.validate(&self.config)?;
        let words = seq.tokens().to_vec();
        let objects = vf.labels();
        let mut lang = self.embed_language(seq)?;
        let mut vis = self.embed_vision(vf)?;
        let mut cap = Capture {
            prune,
            words: &words,
            objects: &objects,
            maps: Vec::with_capacity(self.config.head_count()),
        };

        for (i, layer) in self.lang.iter().enumerate() {
            let x = self.attend(&layer.attn, HeadKind::Lang, i, &lang, &lang, &mut cap)?;
            lang = layer.ffn.apply(&x)?;
        }
        for (i, layer) in self.vis.iter().enumerate() {
            let x = self.attend(&layer.attn, HeadKind::Vis, i, &vis, &vis, &mut cap)?;
            vis = layer.ffn.apply(&x)?;
        }
        for (i, layer) in self.cross.iter().enumerate() {
            let v_cross = self.attend(&layer.lv, HeadKind::Lv, i, &vis, &lang, &mut cap)?;
            let l_cross = self.attend(&layer.vl, HeadKind::Vl, i, &lang, &vis, &mut cap)?;
            let l_self = self.attend(&layer.ll, HeadKind::Ll, i, &l_cross, &l_cross, &mut cap)?;
            let v_self = self.attend(&layer.vv, HeadKind::Vv, i, &v_cross, &v_cross, &mut cap)?;
            lang = layer.ffn_lang.apply(&l_self)?;
            vis = layer.ffn_vis.apply(&v_self)?;
        }

        let (logits, answer) = self.predict_answer(lang.row(0))?;
        let maps = cap.maps;
        Ok(ForwardResult {
            logits,
            answer,
            maps,
            words,
            objects,
        })
    }
}
