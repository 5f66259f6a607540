//! Deterministic synthetic artifacts: a small word and answer vocabulary,
//! random visual features, a question corpus with GQA-like operation and
//! topic groups, and random model weights.
//!
//! Used by the test suites and by `vlscope demo` to produce a complete,
//! self-consistent set of files without trained weights.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bias::{Corpus, Instance};
use crate::model::{
    AnswerVocab, ModelConfig, VisualFeatureSet, VisualObject, WeightSet, APPEARANCE_DIM,
};
use crate::tokenizer::Vocab;
use crate::Result;

pub const OBJECT_LABELS: &[&str] = &[
    "mirror", "sofa", "table", "chair", "lamp", "knife", "fruit", "plate", "cup", "window",
    "door", "man", "woman", "dog", "cat", "car", "tree", "shirt", "bag", "bottle",
];

pub const COLORS: &[&str] = &["red", "blue", "green", "white", "black", "brown", "yellow"];

const FUNCTION_WORDS: &[&str] = &[
    "is", "are", "there", "a", "an", "the", "this", "that", "in", "on", "of", "to", "what",
    "which", "who", "color", "image", "picture", "or", "and", "both", "same", "left", "right",
    "side", "it", "does", "do", "have", "made", "wearing", "holding", "?", ",", ".",
];

const PIECES: &[&str] = &["##s", "##es", "##ing", "##ed"];

/// Answers in classifier order.
pub fn answer_list() -> Vec<String> {
    let mut answers: Vec<String> = ["yes", "no", "left", "right", "wood", "metal"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    answers.extend(COLORS.iter().map(|s| s.to_string()));
    answers.extend(OBJECT_LABELS.iter().map(|s| s.to_string()));
    answers
}

pub fn vocab() -> Vocab {
    let mut tokens: Vec<&str> = vec!["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
    tokens.extend(FUNCTION_WORDS);
    tokens.extend(COLORS);
    tokens.extend(OBJECT_LABELS);
    tokens.extend(["wood", "metal", "yes", "no"]);
    tokens.extend(PIECES);
    Vocab::from_tokens(tokens).expect("synthetic vocabulary is well formed")
}

pub fn answers() -> AnswerVocab {
    AnswerVocab::from_answers(answer_list()).expect("synthetic answers are distinct")
}

/// `n_objects` random objects with valid boxes and appearance in `[-1, 1)`.
pub fn features(image_id: &str, n_objects: usize, seed: u64) -> VisualFeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = (0..n_objects)
        .map(|_| {
            let x1 = rng.random_range(0.0f32..0.7);
            let y1 = rng.random_range(0.0f32..0.7);
            let x2 = (x1 + rng.random_range(0.05f32..0.3)).min(1.0);
            let y2 = (y1 + rng.random_range(0.05f32..0.3)).min(1.0);
            VisualObject {
                label: OBJECT_LABELS.choose(&mut rng).unwrap().to_string(),
                bbox: [x1, y1, x2, y2],
                appearance: (0..APPEARANCE_DIM)
                    .map(|_| rng.random_range(-1.0f32..1.0))
                    .collect(),
            }
        })
        .collect();
    VisualFeatureSet {
        image_id: image_id.to_owned(),
        width: 640,
        height: 480,
        objects,
    }
}

/// A random question of `n_words` words drawn from the synthetic vocabulary.
pub fn random_question(n_words: usize, rng: &mut impl Rng) -> String {
    let pools = [FUNCTION_WORDS, COLORS, OBJECT_LABELS];
    (0..n_words)
        .map(|_| *pools.choose(rng).unwrap().choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Question templates: (operation, topic, builder, answer pool).
fn templated(rng: &mut ChaCha8Rng) -> (String, &'static str, &'static str, String) {
    let obj = *OBJECT_LABELS.choose(rng).unwrap();
    let other = *OBJECT_LABELS.choose(rng).unwrap();
    let color = *COLORS.choose(rng).unwrap();
    // skewed answers so groups have clear head and tail sets
    let skewed = |rng: &mut ChaCha8Rng, pool: &[&str]| -> String {
        let i = ((rng.random::<f64>().powi(3)) * pool.len() as f64) as usize;
        pool[i.min(pool.len() - 1)].to_owned()
    };
    match rng.random_range(0..5) {
        0 => (
            format!("is there a {obj} in the image?"),
            "verify",
            "object",
            skewed(rng, &["yes", "no"]),
        ),
        1 => (
            format!("what color is the {obj}?"),
            "query",
            "color",
            skewed(rng, COLORS),
        ),
        2 => (
            format!("is this a {obj} or a {other}?"),
            "choose",
            "object",
            if rng.random_bool(0.7) { obj } else { other }.to_owned(),
        ),
        3 => (
            format!("is the {obj} {color} and the {other} {color}?"),
            "and",
            "color",
            skewed(rng, &["no", "yes"]),
        ),
        _ => (
            format!("what is on the left side of the {obj}?"),
            "query",
            "place",
            skewed(rng, OBJECT_LABELS),
        ),
    }
}

/// `n_images` images with `questions_per_image` questions each.
pub fn corpus(n_images: usize, questions_per_image: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(n_images * questions_per_image);
    for img in 0..n_images {
        for q in 0..questions_per_image {
            let (question, operation, topic, answer) = templated(&mut rng);
            instances.push(Instance {
                question_id: format!("{img:04}-{q}"),
                image_id: image_id(img),
                question,
                gt_answer: answer,
                operation: operation.to_owned(),
                topic: topic.to_owned(),
            });
        }
    }
    Corpus::from_instances(instances).expect("synthetic ids are unique")
}

pub fn image_id(i: usize) -> String {
    format!("img{i:04}")
}

/// In-memory features for every image of `corpus`.
pub fn feature_map(
    corpus: &Corpus,
    n_objects: usize,
    seed: u64,
) -> HashMap<String, Arc<VisualFeatureSet>> {
    let mut out = HashMap::new();
    for (i, inst) in corpus.instances().iter().enumerate() {
        out.entry(inst.image_id.clone()).or_insert_with(|| {
            Arc::new(features(&inst.image_id, n_objects, seed.wrapping_add(i as u64)))
        });
    }
    out
}

/// Paths of a written demo set.
#[derive(Debug, Clone)]
pub struct DemoFiles {
    pub model: PathBuf,
    pub corpus: PathBuf,
    pub features: PathBuf,
    pub vocab: PathBuf,
    pub answers: PathBuf,
}

/// Writes random weights for `config`, the synthetic vocabularies, a corpus
/// and per-image feature files below `dir`.
pub fn write_demo(
    dir: impl AsRef<Path>,
    config: ModelConfig,
    n_images: usize,
    questions_per_image: usize,
    seed: u64,
) -> Result<DemoFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let vocab = vocab();
    let answers = answer_list();
    let config = ModelConfig {
        vocab_size: vocab.len(),
        answer_vocab_size: answers.len(),
        ..config
    };
    let model = WeightSet::random(config, seed, 1.0)?.save(dir, "model")?;

    let write = |name: &str, text: String| -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| crate::Error::io(&path, e))?;
        Ok(path)
    };
    let vocab_path = write("vocab.txt", (0..vocab.len() as u32).map(|i| format!("{}\n", vocab.token(i).unwrap())).collect())?;
    let answers_path = write("answers.txt", answers.iter().map(|a| format!("{a}\n")).collect())?;
    let corpus = corpus(n_images, questions_per_image, seed);
    let corpus_path = write("corpus.jsonl", corpus.to_jsonl())?;

    let features_dir = dir.join("features");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in 0..n_images {
        let n = rng.random_range(4..=config.max_objects);
        features(&image_id(i), n, seed.wrapping_add(1000 + i as u64)).save(&features_dir)?;
    }
    Ok(DemoFiles {
        model,
        corpus: corpus_path,
        features: features_dir,
        vocab: vocab_path,
        answers: answers_path,
    })
}
