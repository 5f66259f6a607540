//! Loading the files named on the command line. Every failure names the
//! flag it came from.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::Args;
use vlscope_core::bias::Corpus;
use vlscope_core::model::{AnswerVocab, FeatureStore, Model};
use vlscope_core::tokenizer::Vocab;
use vlscope_core::Model32;

use crate::state::{AppState, ServiceConfig};

#[derive(Debug, Clone, Args)]
pub struct ArtifactArgs {
    /// Weight manifest (JSON) of the model.
    #[arg(long, env = "VLSCOPE_MODEL")]
    pub model: PathBuf,
    /// Question corpus, one JSON record per line.
    #[arg(long, env = "VLSCOPE_CORPUS")]
    pub corpus: PathBuf,
    /// Directory of per-image feature files.
    #[arg(long, env = "VLSCOPE_FEATURES")]
    pub features: PathBuf,
    /// Word-piece vocabulary, one token per line.
    #[arg(long, env = "VLSCOPE_VOCAB")]
    pub vocab: PathBuf,
    /// Answer vocabulary in classifier order, one per line.
    #[arg(long, env = "VLSCOPE_ANSWERS")]
    pub answers: PathBuf,
}

pub struct Artifacts {
    pub model: Model32,
    pub vocab: Vocab,
    pub answers: AnswerVocab,
    pub corpus: Corpus,
    pub features: FeatureStore,
}

fn require(flag: &str, path: &Path, dir: bool) -> anyhow::Result<()> {
    let ok = if dir { path.is_dir() } else { path.is_file() };
    if !ok {
        let what = if dir { "directory" } else { "file" };
        bail!("--{flag}: {what} `{}` not found", path.display());
    }
    Ok(())
}

impl ArtifactArgs {
    pub fn load(&self) -> anyhow::Result<Artifacts> {
        require("model", &self.model, false)?;
        require("corpus", &self.corpus, false)?;
        require("features", &self.features, true)?;
        require("vocab", &self.vocab, false)?;
        require("answers", &self.answers, false)?;

        let model = Model::load(&self.model).context("--model")?;
        let vocab = Vocab::load(&self.vocab).context("--vocab")?;
        let answers = AnswerVocab::load(&self.answers).context("--answers")?;
        let corpus = Corpus::load(&self.corpus).context("--corpus")?;
        let cfg = *model.config();
        if vocab.len() != cfg.vocab_size {
            bail!(
                "--vocab: {} tokens, but the model was built for {}",
                vocab.len(),
                cfg.vocab_size
            );
        }
        if answers.len() != cfg.answer_vocab_size {
            bail!(
                "--answers: {} answers, but the model predicts {}",
                answers.len(),
                cfg.answer_vocab_size
            );
        }
        let features = FeatureStore::new(&self.features, cfg.max_objects);
        Ok(Artifacts {
            model,
            vocab,
            answers,
            corpus,
            features,
        })
    }
}

impl Artifacts {
    pub fn into_state(self, config: ServiceConfig) -> anyhow::Result<AppState> {
        Ok(AppState::new(
            self.model,
            self.vocab,
            self.answers,
            Some(self.corpus),
            Arc::new(self.features),
            config,
        )?)
    }
}
