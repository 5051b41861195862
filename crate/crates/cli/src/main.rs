//! `clsr`: the synthetic-corpus training and retrieval workflow as subcommands.
//!
//! Every subcommand reads one config file and works inside one run directory:
//!
//! | file                     | written by | read by                 |
//! |--------------------------|------------|-------------------------|
//! | `corpus.jsonl`           | synth      | train, eval, heatmap    |
//! | `longform.jsonl`         | synth      | index, retrieve         |
//! | `<stage>.ckpt`           | train      | train, eval, index, ... |
//! | `<stage>.metrics.jsonl`  | train      |                         |
//! | `report.txt`, `.jsonl`   | eval       |                         |
//! | `index.bin`              | index      | retrieve                |
//! | `heatmap.csv`            | heatmap    |                         |
//!
//! Training a stage starts from the checkpoint of the stage before it when that
//! file exists, so rerunning a subcommand on the same inputs reproduces its outputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use clsr::corpus::{
    generate_corpus, read_corpus, read_longform, write_corpus, write_longform, TokenId, Vocabulary, UNK,
};
use clsr::eval::{embed_split, embed_split_text, emit_report, evaluate_embeddings, longform_documents, StageSummary};
use clsr::model::Model;
use clsr::retriever::{
    build_index, embed_query, export_heatmap, load_index, save_index, segment, IndexMetadata, Query,
};
use clsr::trainer::{load_checkpoint, save_checkpoint, train_stage, Checkpoint, ExperimentConfig, Stage};
use clsr::ClsrError;

const CORPUS_FILE: &str = "corpus.jsonl";
const LONGFORM_FILE: &str = "longform.jsonl";
const INDEX_FILE: &str = "index.bin";
const REPORT_FILE: &str = "report.txt";
const HEATMAP_FILE: &str = "heatmap.csv";

#[derive(Parser)]
#[command(
    name = "clsr",
    version,
    about = "Contrastive language-speech retrieval on synthetic audio"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `corpus_seed` for synth and `seed` for every other subcommand.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunDir {
    /// Run directory holding the corpus, checkpoints and derived artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training corpus and the long-form documents.
    Synth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dir: RunDir,
    },
    /// Train one stage (or `all` for pretrain_asr, pretrain_text, joint).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dir: RunDir,
        #[arg(long)]
        stage: String,
    },
    /// Evaluate every trained stage on the held-out split and write the report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dir: RunDir,
    },
    /// Segment the long-form documents and write the retrieval index.
    Index {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dir: RunDir,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        hop: Option<usize>,
    },
    /// Print the top-k segments for a text query, or for every long-form
    /// document's own question when no query is given.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        index: PathBuf,
        /// Space-separated vocabulary tokens.
        #[arg(long)]
        query: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write the frame-by-token similarity matrix of one held-out pair.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dir: RunDir,
        /// Position within the held-out split.
        #[arg(long, default_value_t = 0)]
        pair: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e.downcast_ref::<ClsrError>().is_some_and(ClsrError::is_internal);
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}

fn load_config(common: &Common, seed_key: &str) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set(seed_key, &seed.to_string(), 0)?;
    }
    cfg.validate()?;
    let seed = if seed_key == "corpus_seed" {
        cfg.corpus.seed
    } else {
        cfg.train.seed
    };
    log::info!(
        "config {} hash {} {seed_key} {seed}",
        common.config.display(),
        cfg.hash()
    );
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn ckpt_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.ckpt", stage.name()))
}

/// Latest stage in pipeline order whose checkpoint exists.
fn latest_checkpoint(dir: &Path) -> anyhow::Result<(Stage, Checkpoint)> {
    let stage = Stage::ALL
        .iter()
        .rev()
        .copied()
        .find(|&s| ckpt_path(dir, s).exists())
        .ok_or_else(|| anyhow!("no checkpoint in {}; run `clsr train` first", dir.display()))?;
    let ckpt = load_checkpoint(&ckpt_path(dir, stage))?;
    log::info!("using {} checkpoint, model {}", stage.name(), ckpt.model_hash());
    Ok((stage, ckpt))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth { common, dir } => synth(&common, &dir.out),
        Command::Train { common, dir, stage } => train(&common, &dir.out, &stage),
        Command::Eval { common, dir } => eval(&common, &dir.out),
        Command::Index {
            common,
            dir,
            window,
            hop,
        } => index(&common, &dir.out, window, hop),
        Command::Retrieve {
            common,
            index,
            query,
            k,
        } => retrieve(&common, &index, query.as_deref(), k),
        Command::Heatmap { common, dir, pair } => heatmap(&common, &dir.out, pair),
    }
}

fn synth(common: &Common, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(common, "corpus_seed")?;
    create_dir(out)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    write_corpus(&out.join(CORPUS_FILE), &corpus.pairs)?;
    let docs = longform_documents(
        &corpus,
        &cfg.corpus,
        cfg.retrieval.longform_docs,
        &cfg.retrieval.longform,
    )?;
    write_longform(&out.join(LONGFORM_FILE), &docs)?;
    log::info!(
        "wrote {} pairs and {} long-form documents to {}",
        corpus.pairs.len(),
        docs.len(),
        out.display()
    );
    Ok(())
}

fn parse_stages(raw: &str) -> anyhow::Result<Vec<Stage>> {
    if raw == "all" {
        return Ok(vec![Stage::PretrainAsr, Stage::PretrainText, Stage::Joint]);
    }
    raw.split(',')
        .map(|s| Stage::parse(s.trim()).map_err(Into::into))
        .collect()
}

fn train(common: &Common, out: &Path, stage: &str) -> anyhow::Result<()> {
    let stages = parse_stages(stage)?;
    let cfg = load_config(common, "seed")?;
    let pairs = read_corpus(&out.join(CORPUS_FILE))?;
    if pairs.len() <= cfg.held_out {
        bail!(
            "corpus has {} pairs, not more than held_out = {}",
            pairs.len(),
            cfg.held_out
        );
    }
    let (train_split, held_out) = pairs.split_at(pairs.len() - cfg.held_out);
    for stage in stages {
        let idx = Stage::ALL.iter().position(|&s| s == stage).unwrap_or(0);
        let init = match idx.checked_sub(1).map(|i| ckpt_path(out, Stage::ALL[i])) {
            Some(prev) if prev.exists() => {
                log::info!("initialising from {}", prev.display());
                Some(load_checkpoint(&prev)?)
            }
            _ => None,
        };
        let (ckpt, history) = train_stage(&cfg, stage, train_split, held_out, init.as_ref())?;
        save_checkpoint(&ckpt_path(out, stage), &ckpt)?;
        history.write_jsonl(&out.join(format!("{}.metrics.jsonl", stage.name())))?;
        log::info!(
            "{} done after {} epochs, model {}",
            stage.name(),
            history.records.len(),
            ckpt.model_hash()
        );
    }
    Ok(())
}

fn eval(common: &Common, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(common, "seed")?;
    let pairs = read_corpus(&out.join(CORPUS_FILE))?;
    let held_out = &pairs[pairs.len().saturating_sub(cfg.held_out)..];
    let mut summaries = Vec::new();
    for &stage in Stage::ALL.iter() {
        let path = ckpt_path(out, stage);
        if !path.exists() {
            continue;
        }
        let model = load_checkpoint(&path)?.restore_model()?;
        let mut summary = StageSummary {
            stage: stage.name().into(),
            ..StageSummary::default()
        };
        match stage {
            Stage::PretrainAsr => summary.wer = Some(embed_split(&model, held_out, false)?.wer(held_out)?),
            Stage::PretrainText => {
                let emb = embed_split_text(&model, held_out)?;
                summary.retrieval = evaluate_embeddings(&emb)?.into_iter().map(|(_, m)| m).collect();
            }
            Stage::Joint | Stage::PostTrain => {
                let emb = embed_split(&model, held_out, cfg.corpus.speech_questions)?;
                summary.wer = Some(emb.wer(held_out)?);
                summary.retrieval = evaluate_embeddings(&emb)?.into_iter().map(|(_, m)| m).collect();
            }
        }
        summaries.push(summary);
    }
    if summaries.is_empty() {
        bail!("no checkpoint in {}; run `clsr train` first", out.display());
    }
    let rows = emit_report(&summaries, &out.join(REPORT_FILE))?;
    print!("{}", std::fs::read_to_string(out.join(REPORT_FILE))?);
    log::info!("wrote {} report rows", rows.len());
    Ok(())
}

fn index(common: &Common, out: &Path, window: Option<usize>, hop: Option<usize>) -> anyhow::Result<()> {
    let cfg = load_config(common, "seed")?;
    let window = window.unwrap_or(cfg.retrieval.window);
    let hop = hop.unwrap_or(cfg.retrieval.hop);
    let (_, ckpt) = latest_checkpoint(out)?;
    let model = ckpt.restore_model()?;
    let docs = read_longform(&out.join(LONGFORM_FILE))?;
    let mut segments = Vec::new();
    for doc in &docs {
        segments.extend(segment(doc.doc_id, &doc.speech, window, hop)?);
    }
    let meta = IndexMetadata {
        model_hash: ckpt.model_hash(),
        window: window as u32,
        hop: hop as u32,
    };
    let (index, report) = build_index(&model, &segments, meta)?;
    save_index(&out.join(INDEX_FILE), &index)?;
    log::info!(
        "indexed {} of {} segments (window {window}, hop {hop}) from {} documents",
        index.len(),
        report.segments,
        docs.len()
    );
    Ok(())
}

fn parse_query(vocab: &Vocabulary, raw: &str) -> anyhow::Result<Vec<TokenId>> {
    let tokens = vocab.encode(raw);
    if tokens.is_empty() {
        bail!("query is empty");
    }
    if let Some(word) = raw.split_whitespace().find(|w| vocab.lookup(w) == UNK) {
        bail!("query token {word:?} is not in the vocabulary");
    }
    Ok(tokens)
}

fn retrieve(common: &Common, index_path: &Path, query: Option<&str>, k: Option<usize>) -> anyhow::Result<()> {
    let cfg = load_config(common, "seed")?;
    let k = k.unwrap_or(cfg.retrieval.k);
    let index = load_index(index_path)?;
    let dir = index_path.parent().unwrap_or(Path::new("."));
    let (_, ckpt) = latest_checkpoint(dir)?;
    let model: Model = ckpt.restore_model()?;
    let meta = index.metadata();
    for w in index.check_compatible(
        model.config.d_model,
        meta.window as usize,
        meta.hop as usize,
        Some(&ckpt.model_hash()),
    )? {
        log::warn!("{w}");
    }
    let print = |hits: &[clsr::retriever::Hit]| {
        for h in hits {
            println!("{} {} {:.6}", h.doc_id, h.segment_index, h.score);
        }
    };
    match query {
        Some(raw) => {
            let vocab = Vocabulary::build(cfg.corpus.vocab_size, cfg.corpus.seed)?;
            let tokens = parse_query(&vocab, raw)?;
            let q =
                embed_query(&model, Query::Text(&tokens))?.ok_or_else(|| anyhow!("query embedding is degenerate"))?;
            print(&index.search_topk(&q, k)?);
        }
        None => {
            let docs = read_longform(&dir.join(LONGFORM_FILE))?;
            let all = index.len();
            for doc in &docs {
                let Some(q) = embed_query(&model, Query::Text(&doc.question))? else {
                    log::warn!("document {}: degenerate query embedding", doc.doc_id);
                    continue;
                };
                let hits: Vec<_> = index
                    .search_topk(&q, all)?
                    .into_iter()
                    .filter(|h| h.doc_id == doc.doc_id)
                    .take(k)
                    .collect();
                print(&hits);
            }
        }
    }
    Ok(())
}

fn heatmap(common: &Common, out: &Path, pair: usize) -> anyhow::Result<()> {
    let cfg = load_config(common, "seed")?;
    let pairs = read_corpus(&out.join(CORPUS_FILE))?;
    let held_out = &pairs[pairs.len().saturating_sub(cfg.held_out)..];
    let p = held_out
        .get(pair)
        .ok_or_else(|| anyhow!("--pair {pair} is outside the {}-pair held-out split", held_out.len()))?;
    let (_, ckpt) = latest_checkpoint(out)?;
    let model = ckpt.restore_model()?;
    let vocab = Vocabulary::build(cfg.corpus.vocab_size, cfg.corpus.seed)?;
    let h = export_heatmap(&model, &vocab, &p.question, &p.context_speech, &out.join(HEATMAP_FILE))?;
    log::info!("wrote {}x{} heatmap for pair {}", h.rows(), h.cols(), p.pair_id);
    Ok(())
}
