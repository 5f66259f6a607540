//! Shared, immutable server state plus the lazily built statistics cache.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use tokio::sync::OnceCell;
use vlscope_core::analytics::stats::{build_dataset_stats, load_or_build, DatasetStats};
use vlscope_core::analytics::{AggKind, BucketThresholds};
use vlscope_core::bias::{answer_frequencies, rank_images, Corpus, FrequencyTables, ImageScore};
use vlscope_core::model::{AnswerVocab, FeatureSource};
use vlscope_core::tokenizer::Vocab;
use vlscope_core::{Error, Model32};

use crate::error::{ApiError, ApiResult};
use crate::session::SessionStore;

/// Placeholder corpus hash reported when no corpus is loaded.
pub const NO_CORPUS: &str = "none";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub thresholds: BucketThresholds,
    /// Aggregation used by sessions that have not chosen one.
    pub default_agg: AggKind,
    /// Directory of the persisted statistics cache; `None` keeps it in memory.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            thresholds: BucketThresholds::default(),
            default_agg: AggKind::Median,
            cache_dir: None,
        }
    }
}

#[derive(Debug)]
pub struct CorpusData {
    pub corpus: Corpus,
    pub tables: FrequencyTables,
    pub ranking: Vec<ImageScore>,
}

impl CorpusData {
    pub fn new(corpus: Corpus) -> Result<Self, Error> {
        let tables = answer_frequencies(&corpus);
        let ranking = rank_images(&corpus, &tables)?;
        Ok(Self {
            corpus,
            tables,
            ranking,
        })
    }
}

type StatsCell = Arc<OnceCell<Arc<DatasetStats>>>;

struct Inner {
    model: Model32,
    vocab: Vocab,
    answers: AnswerVocab,
    corpus: Option<CorpusData>,
    features: Arc<dyn FeatureSource>,
    config: ServiceConfig,
    sessions: SessionStore,
    stats: Mutex<HashMap<AggKind, StatsCell>>,
    stats_builds: AtomicUsize,
}

/// Cheaply clonable handle to the server state.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(
        model: Model32,
        vocab: Vocab,
        answers: AnswerVocab,
        corpus: Option<Corpus>,
        features: Arc<dyn FeatureSource>,
        config: ServiceConfig,
    ) -> Result<Self, Error> {
        let cfg = model.config();
        if vocab.len() != cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        if answers.len() != cfg.answer_vocab_size {
            return Err(Error::Config(format!(
                "answer vocabulary has {} entries, model expects {}",
                answers.len(),
                cfg.answer_vocab_size
            )));
        }
        config.thresholds.validate()?;
        let corpus = corpus.map(CorpusData::new).transpose()?;
        Ok(Self(Arc::new(Inner {
            model,
            vocab,
            answers,
            corpus,
            features,
            config,
            sessions: SessionStore::default(),
            stats: Mutex::default(),
            stats_builds: AtomicUsize::new(0),
        })))
    }

    pub fn model(&self) -> &Model32 {
        &self.0.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.0.vocab
    }

    pub fn answers(&self) -> &AnswerVocab {
        &self.0.answers
    }

    pub fn features(&self) -> &Arc<dyn FeatureSource> {
        &self.0.features
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.0.sessions
    }

    pub fn model_hash(&self) -> &str {
        self.0.model.hash()
    }

    pub fn corpus_hash(&self) -> &str {
        self.0
            .corpus
            .as_ref()
            .map_or(NO_CORPUS, |c| c.corpus.hash())
    }

    pub fn corpus_data(&self) -> Option<&CorpusData> {
        self.0.corpus.as_ref()
    }

    pub fn require_corpus(&self) -> ApiResult<&CorpusData> {
        self.corpus_data()
            .ok_or_else(|| ApiError::Unavailable("no corpus is loaded".into()))
    }

    /// Number of statistics passes actually run (cache misses).
    pub fn stats_builds(&self) -> usize {
        self.0.stats_builds.load(Ordering::SeqCst)
    }

    /// Corpus statistics for `agg`, built on first use. Concurrent callers
    /// for the same key wait on a single build.
    pub async fn dataset_stats(&self, agg: AggKind) -> ApiResult<Arc<DatasetStats>> {
        self.require_corpus()?;
        let cell = {
            let mut cells = self.0.stats.lock().unwrap_or_else(|e| e.into_inner());
            cells.entry(agg).or_default().clone()
        };
        let state = self.clone();
        cell.get_or_try_init(|| async move {
            tokio::task::spawn_blocking(move || state.build_stats(agg)).await?
        })
        .await
        .cloned()
    }

    fn build_stats(&self, agg: AggKind) -> ApiResult<Arc<DatasetStats>> {
        let data = self.require_corpus()?;
        let inner = &self.0;
        let thresholds = &inner.config.thresholds;
        let stats = match &inner.config.cache_dir {
            Some(dir) => {
                let (stats, built) = load_or_build(
                    dir,
                    &inner.model,
                    &inner.vocab,
                    &data.corpus,
                    inner.features.as_ref(),
                    agg,
                    thresholds,
                )?;
                if built {
                    inner.stats_builds.fetch_add(1, Ordering::SeqCst);
                }
                stats
            }
            None => {
                inner.stats_builds.fetch_add(1, Ordering::SeqCst);
                build_dataset_stats(
                    &inner.model,
                    &inner.vocab,
                    &data.corpus,
                    inner.features.as_ref(),
                    agg,
                    thresholds,
                )?
            }
        };
        tracing::info!(
            agg = %agg,
            instances = stats.question_ids.len(),
            skipped = stats.skipped.len(),
            "dataset statistics ready"
        );
        Ok(Arc::new(stats))
    }
}
