//! `vlscope`: serve the introspection API or run batch analyses.
//!
//! ```text
//! vlscope demo --out demo/
//! vlscope serve  --model demo/model.json --corpus demo/corpus.jsonl \
//!                --features demo/features --vocab demo/vocab.txt --answers demo/answers.txt
//! vlscope rank   <artifact flags>
//! vlscope ask    <artifact flags> --instance 0003-1
//! vlscope stats  <artifact flags> --agg max
//! vlscope ablate <artifact flags> --prune bucket:0
//! ```
//!
//! The bind address of `serve` comes from `--addr` or `VLSCOPE_ADDR`.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;
use vlscope_core::ablate::{ablate, PruneSelector};
use vlscope_core::analytics::stats::load_or_build;
use vlscope_core::analytics::{AggKind, BucketThresholds, CapturedState};
use vlscope_core::bias::{answer_frequencies, classify_question, rank_images};
use vlscope_core::model::{FeatureSource, ModelConfig, PruneConfig};
use vlscope_core::synth;
use vlscope_core::tokenizer::tokenize;
use vlscope_service::artifacts::ArtifactArgs;
use vlscope_service::{router, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "vlscope", version, about = "Attention introspection for two-stream VL transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DemoConfig {
    Standard,
    Toy,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        #[arg(long, env = "VLSCOPE_ADDR", default_value = "127.0.0.1:8080")]
        addr: String,
        /// Where dataset statistics are persisted.
        #[arg(long, default_value = ".vlscope-cache")]
        cache_dir: PathBuf,
        #[arg(long, default_value = "median")]
        agg: AggKind,
    },
    /// Print images ordered by how many Tail questions they carry.
    Rank {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Show only the first N images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run one forward and print the top-5 answers and head summaries.
    Ask {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Corpus question id.
        #[arg(long, conflicts_with_all = ["question", "image"])]
        instance: Option<String>,
        /// Free-form question (needs --image).
        #[arg(long, requires = "image")]
        question: Option<String>,
        #[arg(long)]
        image: Option<String>,
        /// Comma separated heads to prune.
        #[arg(long, default_value = "")]
        prune: String,
        #[arg(long, default_value = "median")]
        agg: AggKind,
    },
    /// Build and persist per-head dataset statistics.
    Stats {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        #[arg(long, default_value = ".vlscope-cache")]
        cache_dir: PathBuf,
        #[arg(long, default_value = "median")]
        agg: AggKind,
    },
    /// Accuracy per question operation before and after pruning.
    Ablate {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// `all`, `bucket:N`, or a comma separated head list.
        #[arg(long, default_value = "")]
        prune: PruneSelector,
        #[arg(long, default_value = "median")]
        agg: AggKind,
    },
    /// Write a synthetic model, vocabularies, corpus and features.
    Demo {
        #[arg(long, default_value = "demo")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        config: DemoConfig,
        #[arg(long, default_value_t = 40)]
        images: usize,
        #[arg(long, default_value_t = 5)]
        questions: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve {
            artifacts,
            addr,
            cache_dir,
            agg,
        } => serve(artifacts, addr, cache_dir, agg),
        Command::Rank { artifacts, limit } => rank(artifacts, limit),
        Command::Ask {
            artifacts,
            instance,
            question,
            image,
            prune,
            agg,
        } => ask(artifacts, instance, question, image, &prune, agg),
        Command::Stats {
            artifacts,
            cache_dir,
            agg,
        } => stats(artifacts, cache_dir, agg),
        Command::Ablate {
            artifacts,
            prune,
            agg,
        } => {
            let a = artifacts.load()?;
            let report = ablate(
                &a.model,
                &a.vocab,
                &a.answers,
                &a.corpus,
                &a.features,
                &prune,
                agg,
                &BucketThresholds::default(),
            )?;
            print!("{report}");
            Ok(())
        }
        Command::Demo {
            out,
            config,
            images,
            questions,
            seed,
        } => {
            let cfg = match config {
                DemoConfig::Standard => ModelConfig::standard(0, 0),
                DemoConfig::Toy => ModelConfig::toy(0, 0),
            };
            let files = synth::write_demo(&out, cfg, images, questions, seed)?;
            println!(
                "--model {} --corpus {} --features {} --vocab {} --answers {}",
                files.model.display(),
                files.corpus.display(),
                files.features.display(),
                files.vocab.display(),
                files.answers.display()
            );
            Ok(())
        }
    }
}

fn serve(artifacts: ArtifactArgs, addr: String, cache_dir: PathBuf, agg: AggKind) -> Result<()> {
    let state = artifacts.load()?.into_state(ServiceConfig {
        thresholds: BucketThresholds::default(),
        default_agg: agg,
        cache_dir: Some(cache_dir),
    })?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        tracing::info!(
            "listening on http://{} (model {}, corpus {})",
            listener.local_addr()?,
            state.model_hash(),
            state.corpus_hash()
        );
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn rank(artifacts: ArtifactArgs, limit: Option<usize>) -> Result<()> {
    let a = artifacts.load()?;
    let tables = answer_frequencies(&a.corpus);
    let ranked = rank_images(&a.corpus, &tables)?;
    println!("{:<5} {:<24} {:>6} {:>6} {:>8}", "rank", "image", "head", "tail", "score");
    for (i, s) in ranked.iter().take(limit.unwrap_or(usize::MAX)).enumerate() {
        println!(
            "{:<5} {:<24} {:>6} {:>6} {:>8.3}",
            i + 1,
            s.image_id,
            s.n_head,
            s.n_tail,
            s.score
        );
    }
    Ok(())
}

fn ask(
    artifacts: ArtifactArgs,
    instance: Option<String>,
    question: Option<String>,
    image: Option<String>,
    prune: &str,
    agg: AggKind,
) -> Result<()> {
    let a = artifacts.load()?;
    let (question, image, inst) = match (instance, question) {
        (Some(id), None) => {
            let inst = a
                .corpus
                .get(&id)
                .with_context(|| format!("--instance: no question `{id}` in the corpus"))?
                .clone();
            (inst.question.clone(), inst.image_id.clone(), Some(inst))
        }
        (None, Some(q)) if !q.trim().is_empty() => (q, image.unwrap_or_default(), None),
        (None, Some(_)) => bail!("--question is empty"),
        _ => bail!("give either --instance or --question with --image"),
    };
    let prune = PruneConfig::parse_list(prune).context("--prune")?;
    let vf = a.features.features(&image).context("--image")?;
    let seq = tokenize(&question, &a.vocab);
    let result = a.model.forward(&seq, &vf, &prune)?;
    let state = CapturedState::new(result, agg, &BucketThresholds::default());

    println!("question: {question}");
    println!("tokens:   {}", state.result.words.join(" "));
    println!("image:    {image} ({} objects)", vf.len());
    if let Some(inst) = &inst {
        let tables = answer_frequencies(&a.corpus);
        let class = classify_question(inst, &tables)?;
        println!("truth:    {} ({class:?} in {})", inst.gt_answer, inst.group_key());
    }
    println!("\ntop-5:");
    for (idx, p) in &state.result.answer.top5 {
        println!("  {:<12} {:>7.3}%", a.answers.answer(*idx).unwrap_or("?"), 100.0 * p);
    }
    println!("\nheads ({agg} k-number, bucket):");
    for (m, s) in state.result.maps.iter().zip(&state.summaries) {
        let mark = if prune.contains(&m.head()) { " pruned" } else { "" };
        println!(
            "  {:<10} {:>3}x{:<3} k={:.3} b={}{mark}",
            m.head().to_string(),
            m.rows(),
            m.cols(),
            s.aggregate,
            s.bucket
        );
    }
    Ok(())
}

fn stats(artifacts: ArtifactArgs, cache_dir: PathBuf, agg: AggKind) -> Result<()> {
    let a = artifacts.load()?;
    let features: Arc<dyn FeatureSource> = Arc::new(a.features);
    let (stats, built) = load_or_build(
        &cache_dir,
        &a.model,
        &a.vocab,
        &a.corpus,
        features.as_ref(),
        agg,
        &BucketThresholds::default(),
    )?;
    println!(
        "{} statistics for {} heads over {} instances ({} skipped) in {}",
        if built { "built" } else { "reused" },
        stats.heads.len(),
        stats.question_ids.len(),
        stats.skipped.len(),
        cache_dir.display()
    );
    Ok(())
}
