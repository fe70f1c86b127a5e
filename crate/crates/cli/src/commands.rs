use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use tokadapt::bpe::{count_words, train_bpe};
use tokadapt::corpus::{clean_documents, dedup_corpus, normalize_text, write_documents, DedupConfig, Document};
use tokadapt::morpho::{
    efficiency_projection, evaluate_tokenizer, measure_sample, parse_dataset, parse_frequencies, project_reports,
    EvalOptions, TokenizerReport,
};
use tokadapt::remap::{init_lm_head, plan_remap, remap_embeddings, EmbeddingMatrix, HeadVariant, MatrixRole};
use tokadapt::tinylm::{compare_inits, encode_corpus, train, write_curve_csv, FrozenBodyLM, TrainConfig};
use tokadapt::unigram::{train_unigram, UnigramConfig};
use tokadapt::vocab::Vocabulary;

use crate::error::{CliError, CliResult, WithPath};
use crate::io::{self, CorpusFormat};
use crate::manifest::{sidecar_path, RunManifest, MANIFEST_FILE};
use crate::pipeline;
use crate::report::{build_table, render, TableFormat};

#[derive(Debug, Parser)]
#[command(name = "tokadapt", version, about = "Tokenizer adaptation toolkit: corpus cleaning, BPE/Unigram training, embedding remapping and evaluation")]
pub struct Cli {
    /// Seed for every randomized step (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus cleaning.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train a BPE vocabulary.
    TrainBpe(TrainBpeArgs),
    /// Train a Unigram vocabulary.
    TrainUnigram(TrainUnigramArgs),
    /// Encode text lines to space-separated token ids.
    Encode(EncodeArgs),
    /// Decode lines of token ids back to text.
    Decode(DecodeArgs),
    /// Root integrity and tokens-per-word report for one vocabulary.
    EvalMorpho(EvalMorphoArgs),
    /// Efficiency projection between two tokenizers.
    Compare(CompareArgs),
    /// Build embedding and LM-head matrices for a new vocabulary.
    Remap(RemapArgs),
    /// Frozen-body language model.
    #[command(subcommand)]
    Tinylm(TinylmCommand),
    /// Run a whole adaptation matrix from a JSON config.
    Pipeline(PipelineArgs),
    /// Print a comparison table of tokenizer reports.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// NFC-normalize, collapse whitespace and drop out-of-script characters.
    Normalize(NormalizeArgs),
    /// Remove near-duplicate documents with MinHash LSH.
    Dedup(DedupArgs),
}

#[derive(Debug, Subcommand)]
pub enum TinylmCommand {
    /// Train embeddings and head with the body frozen.
    Train(TinylmTrainArgs),
    /// Train remapped and random initializations side by side.
    CompareInits(CompareInitsArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CorpusInput {
    /// Input corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = CorpusFormat::Jsonl)]
    pub format: CorpusFormat,
}

#[derive(Debug, Args, Serialize)]
pub struct NormalizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = CorpusFormat::Jsonl)]
    pub format: CorpusFormat,
    /// JSON-lines output.
    #[arg(long)]
    pub output: PathBuf,
    /// Keep characters outside Cyrillic, Latin, digits and punctuation.
    #[arg(long)]
    pub keep_all_scripts: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct DedupArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = CorpusFormat::Jsonl)]
    pub format: CorpusFormat,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,
    #[arg(long, default_value_t = 128)]
    pub num_perm: usize,
    #[arg(long, default_value_t = 16)]
    pub bands: usize,
    #[arg(long, default_value_t = 8)]
    pub rows: usize,
    #[arg(long, default_value_t = 5)]
    pub shingle_k: usize,
    /// Also write corpus statistics here.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainBpeArgs {
    #[command(flatten)]
    pub input: CorpusInput,
    #[arg(long)]
    pub vocab_size: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainUnigramArgs {
    #[command(flatten)]
    pub input: CorpusInput,
    #[arg(long)]
    pub vocab_size: usize,
    #[arg(long)]
    pub output: PathBuf,
    /// Initial candidate count (default 4 x vocab size).
    #[arg(long)]
    pub seed_size: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub em_iters: usize,
    #[arg(long, default_value_t = 0.75)]
    pub keep_fraction: f64,
    #[arg(long, default_value_t = 16)]
    pub max_piece_len: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Text lines (default stdin).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Default stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Lines of space-separated ids (default stdin).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalMorphoArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Tab-separated `word<TAB>root` records.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Optional `word<TAB>frequency` weights.
    #[arg(long)]
    pub freq: Option<PathBuf>,
    /// Tokenizer name in the report (default: vocab file stem).
    #[arg(long)]
    pub name: Option<String>,
    /// Running-text sample for token totals.
    #[arg(long)]
    pub sample: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CorpusFormat::Jsonl)]
    pub sample_format: CorpusFormat,
    /// Use only the first N sample documents.
    #[arg(long)]
    pub sample_docs: Option<usize>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    /// Report of the tokenizer being replaced.
    #[arg(long, requires = "new", conflicts_with_all = ["old_tokens", "new_tokens"])]
    pub old: Option<PathBuf>,
    #[arg(long, requires = "old")]
    pub new: Option<PathBuf>,
    /// Token total of the old tokenizer on a shared sample.
    #[arg(long, requires = "new_tokens")]
    pub old_tokens: Option<u64>,
    #[arg(long, requires = "old_tokens")]
    pub new_tokens: Option<u64>,
    /// Default stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RemapArgs {
    #[arg(long)]
    pub old_vocab: PathBuf,
    #[arg(long)]
    pub new_vocab: PathBuf,
    #[arg(long)]
    pub old_embeddings: PathBuf,
    /// Required for `--head hm`.
    #[arg(long)]
    pub old_head: Option<PathBuf>,
    #[arg(long, default_value = "copy", value_parser = parse_head)]
    pub head: HeadVariant,
    #[arg(long)]
    pub output_dir: PathBuf,
}

fn parse_head(s: &str) -> Result<HeadVariant, String> {
    s.parse().map_err(|e: tokadapt::Error| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct ModelShape {
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Context length; odd values keep the pooled context informative.
    #[arg(long, default_value_t = 7)]
    pub context_k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub init_std: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainOverrides {
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TinylmTrainArgs {
    #[command(flatten)]
    pub input: CorpusInput,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Start from this model directory instead of a random model.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    #[command(flatten)]
    pub shape: ModelShape,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareInitsArgs {
    #[command(flatten)]
    pub input: CorpusInput,
    #[arg(long)]
    pub old_model: PathBuf,
    #[arg(long)]
    pub old_vocab: PathBuf,
    #[arg(long)]
    pub new_vocab: PathBuf,
    /// Standard deviation of the random baseline's layers.
    #[arg(long, default_value_t = 0.02)]
    pub random_std: f64,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineArgs {
    /// Pipeline JSON config.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// TokenizerReport JSON files; the first is the projection baseline.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = TableFormat::Text)]
    pub format: TableFormat,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Corpus(CorpusCommand::Normalize(a)) => cmd_normalize(&a, seed),
        Command::Corpus(CorpusCommand::Dedup(a)) => cmd_dedup(&a, seed),
        Command::TrainBpe(a) => cmd_train_bpe(&a, seed),
        Command::TrainUnigram(a) => cmd_train_unigram(&a, seed),
        Command::Encode(a) => cmd_encode(&a, seed),
        Command::Decode(a) => cmd_decode(&a, seed),
        Command::EvalMorpho(a) => cmd_eval_morpho(&a, seed),
        Command::Compare(a) => cmd_compare(&a, seed),
        Command::Remap(a) => cmd_remap(&a, seed),
        Command::Tinylm(TinylmCommand::Train(a)) => cmd_tinylm_train(&a, cli.seed),
        Command::Tinylm(TinylmCommand::CompareInits(a)) => cmd_compare_inits(&a, cli.seed),
        Command::Pipeline(a) => pipeline::run_file(&a.config, cli.seed).map(|_| ()),
        Command::Report(a) => cmd_report(&a),
    }
}

fn cmd_normalize(a: &NormalizeArgs, seed: u64) -> CliResult<()> {
    let mut m = RunManifest::new("corpus normalize", a, seed)?;
    m.input("input", &a.input)?;
    let docs = io::read_corpus(&a.input, a.format)?;
    let (docs, stats) = if a.keep_all_scripts {
        let kept: Vec<Document> = docs
            .into_iter()
            .map(|mut d| {
                d.text = normalize_text(&d.text);
                d
            })
            .filter(|d| !d.text.is_empty())
            .collect();
        (kept, None)
    } else {
        let (kept, stats) = clean_documents(docs);
        (kept, Some(stats))
    };
    write_documents(io::create(&a.output)?, &docs)?;
    info!("normalized {} documents into {}", docs.len(), a.output.display());
    if let Some(s) = stats {
        info!("dropped {} documents left empty by filtering", s.dropped_filtered);
    }
    m.finish(std::slice::from_ref(&a.output), &sidecar_path(&a.output))?;
    Ok(())
}

fn cmd_dedup(a: &DedupArgs, seed: u64) -> CliResult<()> {
    let config = DedupConfig {
        threshold: a.threshold,
        num_perm: a.num_perm,
        bands: a.bands,
        rows: a.rows,
        shingle_k: a.shingle_k,
        seed,
    };
    config.validate()?;
    let mut m = RunManifest::new("corpus dedup", a, seed)?;
    m.input("input", &a.input)?;
    let docs = io::read_corpus(&a.input, a.format)?;
    let total = docs.len();
    let (kept, stats) = dedup_corpus(docs, config)?;
    write_documents(io::create(&a.output)?, &kept)?;
    info!("kept {} of {total} documents ({} near-duplicates dropped)", kept.len(), stats.dropped_dupes);
    let mut outputs = vec![a.output.clone()];
    if let Some(p) = &a.stats {
        io::write_json(p, &stats)?;
        outputs.push(p.clone());
    }
    m.finish(&outputs, &sidecar_path(&a.output))?;
    Ok(())
}

fn cmd_train_bpe(a: &TrainBpeArgs, seed: u64) -> CliResult<()> {
    let mut m = RunManifest::new("train-bpe", a, seed)?;
    m.input("corpus", &a.input.corpus)?;
    let texts = io::read_texts(&a.input.corpus, a.input.format)?;
    let vocab = train_bpe(&count_words(&texts), a.vocab_size)?;
    save_vocab(&vocab, &a.output)?;
    m.finish(std::slice::from_ref(&a.output), &sidecar_path(&a.output))?;
    Ok(())
}

fn cmd_train_unigram(a: &TrainUnigramArgs, seed: u64) -> CliResult<()> {
    let config = UnigramConfig {
        vocab_size: a.vocab_size,
        seed_size: a.seed_size,
        em_iters_per_round: a.em_iters,
        keep_fraction: a.keep_fraction,
        max_piece_len: a.max_piece_len,
    };
    let mut m = RunManifest::new("train-unigram", a, seed)?;
    m.input("corpus", &a.input.corpus)?;
    let texts = io::read_texts(&a.input.corpus, a.input.format)?;
    let vocab = train_unigram(&count_words(&texts), &config)?;
    save_vocab(&vocab, &a.output)?;
    m.finish(std::slice::from_ref(&a.output), &sidecar_path(&a.output))?;
    Ok(())
}

pub(crate) fn save_vocab(vocab: &Vocabulary, path: &Path) -> CliResult<()> {
    let mut w = io::create(path)?;
    vocab.write_to(&mut w).at(path)?;
    w.flush()?;
    info!("wrote {} vocabulary of {} pieces to {}", vocab.kind(), vocab.len(), path.display());
    Ok(())
}

pub(crate) fn load_vocab(path: &Path) -> CliResult<Vocabulary> {
    Vocabulary::load(path).at(path)
}

fn cmd_encode(a: &EncodeArgs, seed: u64) -> CliResult<()> {
    let vocab = load_vocab(&a.vocab)?;
    let mut manifest = match (&a.output, &a.input) {
        (Some(_), Some(input)) => {
            let mut m = RunManifest::new("encode", a, seed)?;
            m.input("vocab", &a.vocab)?;
            m.input("input", input)?;
            Some(m)
        }
        _ => None,
    };
    let reader = io::input(a.input.as_deref())?;
    let mut out = io::output(a.output.as_deref())?;
    for (i, line) in reader.split(b'\n').enumerate() {
        let mut bytes = line?;
        if bytes.last() == Some(&b'\r') {
            bytes.pop();
        }
        let text = String::from_utf8(bytes).map_err(|e| tokadapt::Error::Data {
            line: i + 1,
            msg: format!("invalid UTF-8 at byte offset {}", e.utf8_error().valid_up_to()),
        })?;
        let ids: Vec<String> = vocab.encode(&text).ids.iter().map(u32::to_string).collect();
        writeln!(out, "{}", ids.join(" "))?;
    }
    out.flush()?;
    drop(out);
    if let (Some(m), Some(output)) = (manifest.take(), &a.output) {
        m.finish(std::slice::from_ref(output), &sidecar_path(output))?;
    }
    Ok(())
}

fn cmd_decode(a: &DecodeArgs, seed: u64) -> CliResult<()> {
    let vocab = load_vocab(&a.vocab)?;
    let reader = io::input(a.input.as_deref())?;
    let mut out = io::output(a.output.as_deref())?;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let data = |msg: String| tokadapt::Error::Data { line: i + 1, msg };
        let ids = line
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| data(format!("not a token id: {t:?}"))))
            .collect::<Result<Vec<u32>, _>>()?;
        let decoded = vocab.decode(&ids).map_err(|e| data(e.to_string()))?;
        writeln!(out, "{}", decoded.text)?;
    }
    out.flush()?;
    drop(out);
    if let (Some(output), Some(input)) = (&a.output, &a.input) {
        let mut m = RunManifest::new("decode", a, seed)?;
        m.input("vocab", &a.vocab)?;
        m.input("input", input)?;
        m.finish(std::slice::from_ref(output), &sidecar_path(output))?;
    }
    Ok(())
}

pub(crate) struct MorphInputs {
    pub records: Vec<tokadapt::morpho::MorphRecord>,
    pub malformed: usize,
    pub freq: Option<HashMap<String, f64>>,
}

pub(crate) fn load_morph_inputs(dataset: Option<&Path>, freq: Option<&Path>) -> CliResult<MorphInputs> {
    let (records, malformed) = match dataset {
        Some(p) => {
            let parsed = parse_dataset(io::open(p)?).at(p)?;
            if parsed.malformed_lines > 0 {
                warn!("{}: skipped {} malformed lines", p.display(), parsed.malformed_lines);
            }
            (parsed.records, parsed.malformed_lines)
        }
        None => (Vec::new(), 0),
    };
    let freq = match freq {
        Some(p) => Some(parse_frequencies(io::open(p)?).at(p)?),
        None => None,
    };
    Ok(MorphInputs { records, malformed, freq })
}

pub(crate) fn evaluate(name: &str, vocab: &Vocabulary, inputs: &MorphInputs, sample: Option<&[String]>) -> TokenizerReport {
    let options = EvalOptions { word_freq: inputs.freq.as_ref(), malformed_lines: inputs.malformed };
    let mut report = evaluate_tokenizer(name, vocab, &inputs.records, &options);
    report.sample = sample.map(|s| measure_sample(vocab, s));
    report
}

fn cmd_eval_morpho(a: &EvalMorphoArgs, seed: u64) -> CliResult<()> {
    let mut m = RunManifest::new("eval-morpho", a, seed)?;
    m.input("vocab", &a.vocab)?;
    m.input("dataset", &a.dataset)?;
    if let Some(f) = &a.freq {
        m.input("freq", f)?;
    }
    let vocab = load_vocab(&a.vocab)?;
    let inputs = load_morph_inputs(Some(&a.dataset), a.freq.as_deref())?;
    let sample = match &a.sample {
        Some(p) => {
            m.input("sample", p)?;
            let mut texts = io::read_texts(p, a.sample_format)?;
            if let Some(n) = a.sample_docs {
                texts.truncate(n);
            }
            Some(texts)
        }
        None => None,
    };
    let name = a
        .name
        .clone()
        .unwrap_or_else(|| a.vocab.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let report = evaluate(&name, &vocab, &inputs, sample.as_deref());
    info!(
        "{name}: root integrity {:.4}, {:.3} tokens/word over {} records",
        report.mean_root_integrity, report.tokens_per_word.mean, report.evaluated
    );
    io::write_json(&a.output, &report)?;
    m.finish(std::slice::from_ref(&a.output), &sidecar_path(&a.output))?;
    Ok(())
}

fn cmd_compare(a: &CompareArgs, seed: u64) -> CliResult<()> {
    let mut m = RunManifest::new("compare", a, seed)?;
    let projection = match (&a.old, &a.new, a.old_tokens, a.new_tokens) {
        (Some(old), Some(new), None, None) => {
            m.input("old", old)?;
            m.input("new", new)?;
            let (ro, rn): (TokenizerReport, TokenizerReport) = (io::read_json(old)?, io::read_json(new)?);
            project_reports(&ro, &rn)?
        }
        (None, None, Some(o), Some(n)) => efficiency_projection(o, n)?,
        _ => return Err(CliError::Usage("give either --old/--new reports or --old-tokens/--new-tokens".into())),
    };
    info!(
        "token ratio {:.4}, projected speedup {:.1}%",
        projection.token_ratio, projection.projected_speedup_percent
    );
    let mut out = io::output(a.output.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &projection)?;
    writeln!(out)?;
    out.flush()?;
    drop(out);
    if let Some(p) = &a.output {
        m.finish(std::slice::from_ref(p), &sidecar_path(p))?;
    }
    Ok(())
}

fn cmd_remap(a: &RemapArgs, seed: u64) -> CliResult<()> {
    let mut m = RunManifest::new("remap", a, seed)?;
    m.input("old_vocab", &a.old_vocab)?;
    m.input("new_vocab", &a.new_vocab)?;
    m.input("old_embeddings", &a.old_embeddings)?;
    if let Some(h) = &a.old_head {
        m.input("old_head", h)?;
    }
    let old_vocab = load_vocab(&a.old_vocab)?;
    let new_vocab = load_vocab(&a.new_vocab)?;
    let old_emb = EmbeddingMatrix::load(&a.old_embeddings).at(&a.old_embeddings)?;
    let old_head = match &a.old_head {
        Some(p) => Some(EmbeddingMatrix::load(p).at(p)?.with_role(MatrixRole::LmHead)),
        None => None,
    };
    if old_emb.vocab_size() != old_vocab.len() {
        return Err(CliError::File {
            path: a.old_embeddings.clone(),
            source: tokadapt::Error::MatrixFormat(format!(
                "{} rows but the old vocabulary has {} pieces",
                old_emb.vocab_size(),
                old_vocab.len()
            )),
        });
    }
    let (plan, report) = plan_remap(&old_vocab, &new_vocab)?;
    let emb = remap_embeddings(&old_emb, &plan)?;
    let head = init_lm_head(Some(&emb), old_head.as_ref(), Some(&plan), a.head)?;
    let dir = &a.output_dir;
    std::fs::create_dir_all(dir)?;
    let outputs = [dir.join("embeddings.emb"), dir.join("head.emb"), dir.join("plan.json"), dir.join("remap_report.json")];
    emb.save(&outputs[0]).at(&outputs[0])?;
    head.save(&outputs[1]).at(&outputs[1])?;
    io::write_json(&outputs[2], &plan)?;
    io::write_json(&outputs[3], &report)?;
    info!(
        "remapped {} rows: {} exact, {} averaged, {} marker-adjusted, {} fallback-only (mean K {:.2})",
        new_vocab.len(),
        report.exact_copy_count,
        report.averaged_count,
        report.marker_adjusted_count,
        report.fallback_only_count,
        report.mean_k
    );
    m.finish(&outputs, &dir.join(MANIFEST_FILE))?;
    Ok(())
}

pub(crate) fn train_config(o: &TrainOverrides, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = match &o.config {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(lr) = o.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(e) = o.max_epochs {
        cfg.max_epochs = e;
    }
    if o.max_steps.is_some() {
        cfg.max_steps = o.max_steps;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn load_model(dir: &Path) -> CliResult<FrozenBodyLM> {
    FrozenBodyLM::load(dir).at(dir)
}

fn cmd_tinylm_train(a: &TinylmTrainArgs, seed: Option<u64>) -> CliResult<()> {
    let cfg = train_config(&a.train, seed)?;
    let seed = cfg.seed;
    let mut m = RunManifest::new("tinylm train", &(a, cfg), seed)?;
    m.input("corpus", &a.input.corpus)?;
    m.input("vocab", &a.vocab)?;
    if let Some(p) = &a.train.config {
        m.input("config", p)?;
    }
    let vocab = load_vocab(&a.vocab)?;
    let model = match &a.init_model {
        Some(dir) => {
            m.input("init_model", dir)?;
            let model = load_model(dir)?;
            if model.vocab_size() != vocab.len() {
                return Err(CliError::Usage(format!(
                    "model in {} has {} rows but the vocabulary has {} pieces",
                    dir.display(),
                    model.vocab_size(),
                    vocab.len()
                )));
            }
            model
        }
        None => FrozenBodyLM::random(vocab.len(), a.shape.dim, a.shape.context_k, a.shape.init_std, seed)?,
    };
    let texts = io::read_texts(&a.input.corpus, a.input.format)?;
    let tokens = encode_corpus(&vocab, &texts);
    let outcome = train(&model, &tokens, &cfg)?;
    info!(
        "trained {} steps: validation loss {:.4} -> {:.4} (best at step {})",
        outcome.steps, outcome.initial_val_loss, outcome.best_val_loss, outcome.best_step
    );
    let dir = &a.output_dir;
    let model_dir = dir.join("model");
    outcome.model.save(&model_dir).at(&model_dir)?;
    let curve = dir.join("loss_curve.csv");
    let mut w = io::create(&curve)?;
    write_curve_csv(&mut w, &outcome.curve)?;
    w.flush()?;
    let summary = dir.join("outcome.json");
    io::write_json(&summary, &TrainSummary::from(&outcome))?;
    m.finish(&[model_dir, curve, summary], &dir.join(MANIFEST_FILE))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct TrainSummary {
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub steps: usize,
    pub stopped_early: bool,
}

impl From<&tokadapt::tinylm::TrainOutcome> for TrainSummary {
    fn from(o: &tokadapt::tinylm::TrainOutcome) -> Self {
        Self {
            initial_val_loss: o.initial_val_loss,
            best_val_loss: o.best_val_loss,
            best_step: o.best_step,
            steps: o.steps,
            stopped_early: o.stopped_early,
        }
    }
}

fn cmd_compare_inits(a: &CompareInitsArgs, seed: Option<u64>) -> CliResult<()> {
    let cfg = train_config(&a.train, seed)?;
    let mut m = RunManifest::new("tinylm compare-inits", &(a, cfg), cfg.seed)?;
    m.input("corpus", &a.input.corpus)?;
    m.input("old_model", &a.old_model)?;
    m.input("old_vocab", &a.old_vocab)?;
    m.input("new_vocab", &a.new_vocab)?;
    let old_model = load_model(&a.old_model)?;
    let old_vocab = load_vocab(&a.old_vocab)?;
    let new_vocab = load_vocab(&a.new_vocab)?;
    let texts = io::read_texts(&a.input.corpus, a.input.format)?;
    let cmp = compare_inits(&old_model, &old_vocab, &new_vocab, &texts, &cfg, a.random_std)?;
    info!(
        "initial validation loss: remapped {:.4} vs random {:.4}; final: {:.4} vs {:.4}",
        cmp.remapped_initial, cmp.random_initial, cmp.remapped_final, cmp.random_final
    );
    let dir = &a.output_dir;
    let outputs = [dir.join("comparison.json"), dir.join("remapped_curve.csv"), dir.join("random_curve.csv")];
    io::write_json(&outputs[0], &cmp)?;
    for (path, curve) in outputs[1..].iter().zip([&cmp.remapped_curve, &cmp.random_curve]) {
        let mut w = io::create(path)?;
        write_curve_csv(&mut w, curve)?;
        w.flush()?;
    }
    m.finish(&outputs, &dir.join(MANIFEST_FILE))?;
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let reports = a.reports.iter().map(|p| io::read_json::<TokenizerReport>(p)).collect::<CliResult<Vec<_>>>()?;
    let table = build_table(&reports);
    for w in &table.warnings {
        warn!("{w}");
    }
    let mut out = io::output(a.output.as_deref())?;
    out.write_all(render(&table, a.format).as_bytes())?;
    out.flush()?;
    Ok(())
}
