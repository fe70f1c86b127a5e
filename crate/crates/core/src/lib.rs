//! Tools for adapting a language model to a new tokenizer vocabulary:
//! corpus cleaning and near-duplicate removal, BPE and Unigram training,
//! morphological evaluation, embedding remapping and a tiny frozen-body LM
//! for checking that remapped initialization helps.

pub mod bpe;
pub mod corpus;
pub mod error;
pub mod morpho;
pub mod remap;
pub mod synth;
pub mod tinylm;
pub mod unigram;
pub mod vocab;

pub use bpe::{count_words, train_bpe, WordCounts};
pub use corpus::{dedup_corpus, normalize_text, CorpusStats, DedupConfig, Document};
pub use error::{Error, Result};
pub use morpho::{efficiency_projection, evaluate_tokenizer, root_integrity, MorphRecord, TokenizerReport};
pub use remap::{plan_remap, remap_embeddings, EmbeddingMatrix, HeadVariant, MatrixRole, RemapPlan, RemapReport};
pub use tinylm::{compare_inits, train, FrozenBodyLM, TrainConfig};
pub use unigram::{train_unigram, UnigramConfig};
pub use vocab::{Piece, TokenSequence, VocabKind, Vocabulary};
