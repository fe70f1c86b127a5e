//! End-to-end adaptation matrix driven by one JSON config.
//!
//! Stages run in order: `dedup`, `base`, one `tokenizer-*` per needed
//! vocabulary, one `adapt-*` per variant, then `reports`. Each stage owns
//! `<output_dir>/<stage>/` and records a manifest there; a stage whose
//! manifest fingerprint matches and whose outputs are intact is skipped.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokadapt::bpe::{count_words, train_bpe};
use tokadapt::corpus::{clean_documents, dedup_corpus, write_documents, DedupConfig};
use tokadapt::remap::{init_lm_head, plan_remap, remap_embeddings, HeadVariant, RemapReport};
use tokadapt::tinylm::{encode_corpus, train, write_curve_csv, FrozenBodyLM, TrainConfig};
use tokadapt::unigram::{train_unigram, UnigramConfig};
use tokadapt::vocab::{VocabKind, NUM_RESERVED};

use crate::commands::{evaluate, load_model, load_morph_inputs, load_vocab, save_vocab, TrainSummary};
use crate::error::{CliError, CliResult, WithPath};
use crate::io::{self, CorpusFormat};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::report::{build_table, render, TableFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Old vocabulary kept; embeddings and head tuned on the new corpus.
    Raw,
    Bpe,
    BpeHm,
    Unigram,
    UnigramHm,
}

impl Variant {
    pub fn family(self) -> Option<VocabKind> {
        match self {
            Variant::Raw => None,
            Variant::Bpe | Variant::BpeHm => Some(VocabKind::Bpe),
            Variant::Unigram | Variant::UnigramHm => Some(VocabKind::Unigram),
        }
    }

    pub fn head(self) -> HeadVariant {
        match self {
            Variant::BpeHm | Variant::UnigramHm => HeadVariant::Hm,
            _ => HeadVariant::Copy,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Raw => "raw",
            Variant::Bpe => "bpe",
            Variant::BpeHm => "bpe_hm",
            Variant::Unigram => "unigram",
            Variant::UnigramHm => "unigram_hm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnigramOptions {
    pub seed_size: Option<usize>,
    pub em_iters_per_round: usize,
    pub keep_fraction: f64,
    pub max_piece_len: usize,
}

impl Default for UnigramOptions {
    fn default() -> Self {
        let d = UnigramConfig::default();
        Self {
            seed_size: d.seed_size,
            em_iters_per_round: d.em_iters_per_round,
            keep_fraction: d.keep_fraction,
            max_piece_len: d.max_piece_len,
        }
    }
}

impl UnigramOptions {
    fn config(&self, vocab_size: usize) -> UnigramConfig {
        UnigramConfig {
            vocab_size,
            seed_size: self.seed_size,
            em_iters_per_round: self.em_iters_per_round,
            keep_fraction: self.keep_fraction,
            max_piece_len: self.max_piece_len,
        }
    }
}

/// The model being adapted. Either both `vocab` and `model` are given, or
/// the missing parts are trained here (BPE vocabulary, random frozen body).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub vocab: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Pre-training corpus of the base model; defaults to the cleaned corpus.
    pub corpus: Option<PathBuf>,
    pub corpus_format: CorpusFormat,
    pub vocab_size: usize,
    pub dim: usize,
    pub context_k: usize,
    pub init_std: f64,
    /// Defaults to the top-level `train`.
    pub train: Option<TrainConfig>,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            vocab: None,
            model: None,
            corpus: None,
            corpus_format: CorpusFormat::Jsonl,
            vocab_size: 500,
            dim: 32,
            context_k: 7,
            init_std: 0.5,
            train: None,
        }
    }
}

fn default_random_std() -> f64 {
    0.02
}

fn default_true() -> bool {
    true
}

fn default_sample_docs() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub corpus_format: CorpusFormat,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub vocab_sizes: Vec<usize>,
    #[serde(default)]
    pub variants: Vec<Variant>,
    /// Used by dedup hashing, model init and batch order.
    #[serde(default)]
    pub seed: u64,
    pub morph_dataset: Option<PathBuf>,
    pub word_freq: Option<PathBuf>,
    #[serde(default)]
    pub dedup: DedupConfig,
    #[serde(default)]
    pub unigram: UnigramOptions,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_random_std")]
    pub random_std: f64,
    /// Also train a randomly initialized model per substituted variant.
    #[serde(default = "default_true")]
    pub random_baseline: bool,
    /// Documents of the cleaned corpus used for token totals.
    #[serde(default = "default_sample_docs")]
    pub sample_docs: usize,
}

impl PipelineConfig {
    /// Resolves relative paths against `base_dir`.
    pub fn resolve(&mut self, base_dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base_dir.join(&*path);
                }
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        fix(&mut self.morph_dataset);
        fix(&mut self.word_freq);
        fix(&mut self.base.vocab);
        fix(&mut self.base.model);
        fix(&mut self.base.corpus);
    }

    /// Checks everything that can be checked before any file is written.
    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: String| Err(CliError::Usage(format!("pipeline config: {m}")));
        let Some(corpus) = &self.corpus else {
            return usage("`corpus` is required".into());
        };
        if self.output_dir.is_none() {
            return usage("`output_dir` is required".into());
        }
        if self.variants.is_empty() {
            return usage("`variants` must list at least one of raw, bpe, bpe_hm, unigram, unigram_hm".into());
        }
        if self.variants.iter().any(|v| v.family().is_some()) && self.vocab_sizes.is_empty() {
            return usage("`vocab_sizes` is required for substituted variants".into());
        }
        for &v in &self.vocab_sizes {
            if v <= NUM_RESERVED {
                return usage(format!("vocab size {v} must exceed the {NUM_RESERVED} reserved pieces"));
            }
        }
        if self.base.model.is_some() && self.base.vocab.is_none() {
            return usage("`base.model` needs `base.vocab`".into());
        }
        if self.base.vocab.is_none() && self.base.vocab_size <= NUM_RESERVED {
            return usage(format!("`base.vocab_size` must exceed {NUM_RESERVED}"));
        }
        if !(self.random_std.is_finite() && self.random_std >= 0.0) {
            return usage(format!("`random_std` must be finite and non-negative, got {}", self.random_std));
        }
        if self.sample_docs == 0 {
            return usage("`sample_docs` must be positive".into());
        }
        let files = [
            ("corpus", Some(corpus)),
            ("morph_dataset", self.morph_dataset.as_ref()),
            ("word_freq", self.word_freq.as_ref()),
            ("base.vocab", self.base.vocab.as_ref()),
            ("base.corpus", self.base.corpus.as_ref()),
        ];
        for (key, path) in files {
            if let Some(p) = path {
                if !p.is_file() {
                    return usage(format!("`{key}` file {} does not exist", p.display()));
                }
            }
        }
        if let Some(m) = &self.base.model {
            if !m.is_dir() {
                return usage(format!("`base.model` directory {} does not exist", m.display()));
            }
        }
        self.dedup.validate()?;
        self.train.validate()?;
        if let Some(t) = &self.base.train {
            t.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub skipped: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub stages: Vec<StageOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub variant: Variant,
    pub vocab_size: usize,
    pub adapted: TrainSummary,
    pub random: Option<TrainSummary>,
    pub remap: Option<RemapReport>,
}

pub fn load_config(path: &Path) -> CliResult<PipelineConfig> {
    let mut cfg: PipelineConfig = io::read_json(path)?;
    cfg.resolve(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

pub fn run_file(path: &Path, seed: Option<u64>) -> CliResult<PipelineRun> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    run(&cfg)
}

struct Runner {
    out: PathBuf,
    seed: u64,
    outcomes: Vec<StageOutcome>,
}

fn in_stage(stage: &str) -> impl Fn(CliError) -> CliError + '_ {
    move |e| match e {
        e @ CliError::Stage { .. } => e,
        e => CliError::Stage { stage: stage.to_string(), source: Box::new(e) },
    }
}

impl Runner {
    fn stage(
        &mut self,
        name: &str,
        params: serde_json::Value,
        inputs: &[(&str, &Path)],
        outputs: &[&str],
        work: impl FnOnce(&Path) -> CliResult<()>,
    ) -> CliResult<PathBuf> {
        let wrap = in_stage(name);
        let dir = self.out.join(name);
        let mpath = dir.join(MANIFEST_FILE);
        let mut m = RunManifest::new(&format!("pipeline {name}"), &params, self.seed).map_err(&wrap)?;
        for (role, p) in inputs {
            m.input(role, p).map_err(&wrap)?;
        }
        if let Ok(existing) = RunManifest::load(&mpath) {
            if m.is_satisfied_by(&existing, &mpath) {
                info!("stage {name}: up to date");
                self.outcomes.push(StageOutcome { stage: name.into(), skipped: true, seconds: 0.0 });
                return Ok(dir);
            }
        }
        info!("stage {name}: running");
        let start = Instant::now();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| wrap(e.into()))?;
        }
        fs::create_dir_all(&dir).map_err(|e| wrap(e.into()))?;
        work(&dir).map_err(&wrap)?;
        let outs: Vec<PathBuf> = outputs.iter().map(|o| dir.join(o)).collect();
        m.finish(&outs, &mpath).map_err(&wrap)?;
        let seconds = start.elapsed().as_secs_f64();
        info!("stage {name}: done in {seconds:.1}s");
        self.outcomes.push(StageOutcome { stage: name.into(), skipped: false, seconds });
        Ok(dir)
    }
}

fn write_curve(path: &Path, curve: &[tokadapt::tinylm::LossPoint]) -> CliResult<()> {
    let mut w = io::create(path)?;
    write_curve_csv(&mut w, curve)?;
    w.flush()?;
    Ok(())
}

fn tokenizer_stage_name(kind: VocabKind, size: usize) -> String {
    format!("tokenizer-{kind}-{size}")
}

pub fn run(cfg: &PipelineConfig) -> CliResult<PipelineRun> {
    cfg.validate()?;
    let corpus = cfg.corpus.clone().expect("validated");
    let out = cfg.output_dir.clone().expect("validated");
    fs::create_dir_all(&out)?;
    let seed = cfg.seed;
    let mut train_cfg = cfg.train;
    train_cfg.seed = seed;
    let mut runner = Runner { out: out.clone(), seed, outcomes: Vec::new() };

    let dedup = DedupConfig { seed, ..cfg.dedup };
    let dedup_dir = runner.stage(
        "dedup",
        json!({ "format": cfg.corpus_format, "dedup": dedup }),
        &[("corpus", &corpus)],
        &["corpus.jsonl", "stats.json"],
        |dir| {
            let docs = io::read_corpus(&corpus, cfg.corpus_format)?;
            let (clean, clean_stats) = clean_documents(docs);
            let (kept, mut stats) = dedup_corpus(clean, dedup)?;
            stats.dropped_filtered = clean_stats.dropped_filtered;
            info!("kept {} documents, {} near-duplicates dropped", stats.doc_count, stats.dropped_dupes);
            write_documents(io::create(&dir.join("corpus.jsonl"))?, &kept)?;
            io::write_json(&dir.join("stats.json"), &stats)
        },
    )?;
    let clean_corpus = dedup_dir.join("corpus.jsonl");
    let texts = || io::read_texts(&clean_corpus, CorpusFormat::Jsonl);

    let (base_vocab, base_model) = match (&cfg.base.vocab, &cfg.base.model) {
        (Some(v), Some(m)) => (v.clone(), m.clone()),
        (given_vocab, _) => {
            let b = &cfg.base;
            let base_train = TrainConfig { seed, ..b.train.unwrap_or(cfg.train) };
            let base_corpus = b.corpus.clone().unwrap_or_else(|| clean_corpus.clone());
            let mut inputs: Vec<(&str, &Path)> = vec![("corpus", &base_corpus)];
            if let Some(v) = given_vocab {
                inputs.push(("vocab", v));
            }
            let dir = runner.stage(
                "base",
                json!({
                    "vocab_size": b.vocab_size, "dim": b.dim, "context_k": b.context_k,
                    "init_std": b.init_std, "train": base_train, "corpus_format": b.corpus_format,
                    "external_corpus": b.corpus.is_some(),
                }),
                &inputs,
                &["vocab.txt", "model", "loss_curve.csv"],
                |dir| {
                    let base_texts: Vec<String> = if b.corpus.is_some() {
                        let (docs, _) = clean_documents(io::read_corpus(&base_corpus, b.corpus_format)?);
                        docs.into_iter().map(|d| d.text).collect()
                    } else {
                        texts()?
                    };
                    let vocab = match given_vocab {
                        Some(v) => load_vocab(v)?,
                        None => train_bpe(&count_words(&base_texts), b.vocab_size)?,
                    };
                    save_vocab(&vocab, &dir.join("vocab.txt"))?;
                    let init = FrozenBodyLM::random(vocab.len(), b.dim, b.context_k, b.init_std, seed)?;
                    let outcome = train(&init, &encode_corpus(&vocab, &base_texts), &base_train)?;
                    info!("base model validation loss {:.4}", outcome.best_val_loss);
                    let model_dir = dir.join("model");
                    outcome.model.save(&model_dir).at(&model_dir)?;
                    write_curve(&dir.join("loss_curve.csv"), &outcome.curve)
                },
            )?;
            (dir.join("vocab.txt"), dir.join("model"))
        }
    };

    let mut needed: BTreeSet<(String, usize)> = BTreeSet::new();
    for v in &cfg.variants {
        if let Some(kind) = v.family() {
            for &size in &cfg.vocab_sizes {
                needed.insert((kind.to_string(), size));
            }
        }
    }
    let mut tokenizers: Vec<(String, PathBuf)> = Vec::new();
    for (kind_name, size) in &needed {
        let kind: VocabKind = kind_name.parse()?;
        let name = tokenizer_stage_name(kind, *size);
        let params = match kind {
            VocabKind::Bpe => json!({ "kind": kind_name, "vocab_size": size }),
            VocabKind::Unigram => json!({ "kind": kind_name, "unigram": cfg.unigram.config(*size) }),
        };
        let dir = runner.stage(&name, params, &[("corpus", &clean_corpus)], &["vocab.txt"], |dir| {
            let counts = count_words(&texts()?);
            let vocab = match kind {
                VocabKind::Bpe => train_bpe(&counts, *size)?,
                VocabKind::Unigram => train_unigram(&counts, &cfg.unigram.config(*size))?,
            };
            save_vocab(&vocab, &dir.join("vocab.txt"))
        })?;
        tokenizers.push((format!("{kind}-{size}"), dir.join("vocab.txt")));
    }

    let mut variants: Vec<Variant> = cfg.variants.clone();
    variants.sort();
    variants.dedup();
    let mut summaries: Vec<PathBuf> = Vec::new();
    for variant in variants {
        let sizes: Vec<Option<usize>> = match variant.family() {
            None => vec![None],
            Some(_) => cfg.vocab_sizes.iter().map(|&s| Some(s)).collect(),
        };
        for size in sizes {
            let name = match size {
                None => format!("adapt-{}", variant.name()),
                Some(s) => format!("adapt-{}-{s}", variant.name()),
            };
            let new_vocab_path =
                variant.family().zip(size).map(|(k, s)| out.join(tokenizer_stage_name(k, s)).join("vocab.txt"));
            let mut inputs: Vec<(&str, &Path)> =
                vec![("corpus", &clean_corpus), ("base_vocab", &base_vocab), ("base_model", &base_model)];
            if let Some(p) = &new_vocab_path {
                inputs.push(("new_vocab", p));
            }
            let mut outputs = vec!["model", "loss_curve.csv", "summary.json"];
            if variant.family().is_some() {
                outputs.push("remap_report.json");
                if cfg.random_baseline {
                    outputs.push("random_curve.csv");
                }
            }
            let dir = runner.stage(
                &name,
                json!({
                    "variant": variant, "vocab_size": size, "train": train_cfg,
                    "random_std": cfg.random_std, "random_baseline": cfg.random_baseline,
                }),
                &inputs,
                &outputs,
                |dir| adapt(dir, variant, &base_vocab, &base_model, new_vocab_path.as_deref(), &texts()?, cfg, &train_cfg),
            )?;
            summaries.push(dir.join("summary.json"));
        }
    }

    let mut inputs: Vec<(String, PathBuf)> =
        vec![("corpus".into(), clean_corpus.clone()), ("base_vocab".into(), base_vocab.clone())];
    if let Some(p) = &cfg.morph_dataset {
        inputs.push(("morph_dataset".into(), p.clone()));
    }
    if let Some(p) = &cfg.word_freq {
        inputs.push(("word_freq".into(), p.clone()));
    }
    for (name, p) in &tokenizers {
        inputs.push((format!("vocab:{name}"), p.clone()));
    }
    for p in &summaries {
        let stage = p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        inputs.push((format!("summary:{stage}"), p.clone()));
    }
    let input_refs: Vec<(&str, &Path)> = inputs.iter().map(|(r, p)| (r.as_str(), p.as_path())).collect();
    let mut report_names: Vec<String> = vec!["base".into()];
    report_names.extend(tokenizers.iter().map(|(n, _)| n.clone()));
    let mut outputs: Vec<String> = report_names.iter().map(|n| format!("{n}.json")).collect();
    outputs.extend(["tokenizers.txt".into(), "tokenizers.csv".into(), "adaptation.csv".into()]);
    let output_refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    runner.stage(
        "reports",
        json!({ "sample_docs": cfg.sample_docs, "tokenizers": report_names }),
        &input_refs,
        &output_refs,
        |dir| {
            let morph = load_morph_inputs(cfg.morph_dataset.as_deref(), cfg.word_freq.as_deref())?;
            let mut sample = texts()?;
            sample.truncate(cfg.sample_docs);
            let mut vocab_paths = vec![("base".to_string(), base_vocab.clone())];
            vocab_paths.extend(tokenizers.iter().cloned());
            let mut reports = Vec::new();
            for (name, path) in &vocab_paths {
                let report = evaluate(name, &load_vocab(path)?, &morph, Some(&sample));
                io::write_json(&dir.join(format!("{name}.json")), &report)?;
                reports.push(report);
            }
            let table = build_table(&reports);
            let text = render(&table, TableFormat::Text);
            info!("tokenizer comparison:\n{text}");
            fs::write(dir.join("tokenizers.txt"), text)?;
            fs::write(dir.join("tokenizers.csv"), render(&table, TableFormat::Csv))?;
            write_adaptation_table(&dir.join("adaptation.csv"), &summaries)
        },
    )?;

    let run = PipelineRun { stages: runner.outcomes };
    io::write_json(&out.join("run_summary.json"), &run)?;
    Ok(run)
}

#[allow(clippy::too_many_arguments)]
fn adapt(
    dir: &Path,
    variant: Variant,
    base_vocab_path: &Path,
    base_model_path: &Path,
    new_vocab_path: Option<&Path>,
    texts: &[String],
    cfg: &PipelineConfig,
    train_cfg: &TrainConfig,
) -> CliResult<()> {
    let old_vocab = load_vocab(base_vocab_path)?;
    let old = load_model(base_model_path)?;
    if old.vocab_size() != old_vocab.len() {
        return Err(CliError::Usage(format!(
            "base model has {} rows but the base vocabulary has {} pieces",
            old.vocab_size(),
            old_vocab.len()
        )));
    }
    let (vocab, init, remap) = match new_vocab_path {
        None => (old_vocab, old.clone(), None),
        Some(p) => {
            let new_vocab = load_vocab(p)?;
            let (plan, report) = plan_remap(&old_vocab, &new_vocab)?;
            let emb = remap_embeddings(&old.embeddings, &plan)?;
            let head = init_lm_head(Some(&emb), Some(&old.head), Some(&plan), variant.head())?;
            io::write_json(&dir.join("remap_report.json"), &report)?;
            let init = FrozenBodyLM::new(emb, head, old.body().to_vec(), old.context_k())?;
            (new_vocab, init, Some(report))
        }
    };
    let tokens = encode_corpus(&vocab, texts);
    let outcome = train(&init, &tokens, train_cfg)?;
    info!(
        "{}: validation loss {:.4} -> {:.4} in {} steps",
        variant.name(),
        outcome.initial_val_loss,
        outcome.best_val_loss,
        outcome.steps
    );
    let model_dir = dir.join("model");
    outcome.model.save(&model_dir).at(&model_dir)?;
    write_curve(&dir.join("loss_curve.csv"), &outcome.curve)?;
    let random = if remap.is_some() && cfg.random_baseline {
        let r = FrozenBodyLM::random_layers(
            old.body().to_vec(),
            vocab.len(),
            old.context_k(),
            cfg.random_std,
            train_cfg.seed,
        )?;
        let o = train(&r, &tokens, train_cfg)?;
        info!("{}: random init {:.4} -> {:.4}", variant.name(), o.initial_val_loss, o.best_val_loss);
        write_curve(&dir.join("random_curve.csv"), &o.curve)?;
        Some(TrainSummary::from(&o))
    } else {
        None
    };
    let summary =
        AdaptSummary { variant, vocab_size: vocab.len(), adapted: TrainSummary::from(&outcome), random, remap };
    io::write_json(&dir.join("summary.json"), &summary)
}

fn write_adaptation_table(path: &Path, summaries: &[PathBuf]) -> CliResult<()> {
    let mut w = io::create(path)?;
    writeln!(w, "variant,vocab_size,initial_val_loss,final_val_loss,steps,random_initial_val_loss,random_final_val_loss")?;
    for p in summaries {
        let s: AdaptSummary = io::read_json(p)?;
        let (ri, rf) = match &s.random {
            Some(r) => (format!("{:.6}", r.initial_val_loss), format!("{:.6}", r.best_val_loss)),
            None => (String::new(), String::new()),
        };
        writeln!(
            w,
            "{},{},{:.6},{:.6},{},{ri},{rf}",
            s.variant.name(),
            s.vocab_size,
            s.adapted.initial_val_loss,
            s.adapted.best_val_loss,
            s.adapted.steps
        )?;
    }
    w.flush()?;
    Ok(())
}
