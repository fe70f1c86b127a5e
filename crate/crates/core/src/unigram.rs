//! Unigram language-model tokenizer: seed candidates, EM over word lattices,
//! likelihood-driven pruning, and Viterbi encoding.
//!
//! All probabilities live in log space. A piece whose expected count drops to
//! zero gets [`LOG_PROB_FLOOR`] rather than `-inf`. Reductions over words use
//! fixed-size chunks summed in chunk order, so results are bit-identical for
//! any thread count.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::WordCounts;
use crate::error::{Error, Result};
use crate::vocab::{is_reserved_surface, MergeTable, Segment, VocabKind, Vocabulary, NUM_RESERVED};

pub const LOG_PROB_FLOOR: f64 = -1e9;
/// Extra penalty, below the lowest learned score, for a byte-fallback character.
pub const FALLBACK_PENALTY: f64 = 10.0;

const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub surface: String,
    pub log_prob: f64,
    /// Corpus frequency (substring count for seeds, expected count after EM).
    pub freq: f64,
}

#[derive(Debug, Clone)]
pub struct CandidateSet {
    pieces: Vec<Candidate>,
    index: HashMap<String, usize>,
    max_len: usize,
    pub seed_size: usize,
}

impl CandidateSet {
    pub fn from_candidates(pieces: Vec<Candidate>, seed_size: usize) -> Self {
        let index = pieces.iter().enumerate().map(|(i, c)| (c.surface.clone(), i)).collect();
        let max_len = pieces.iter().map(|c| c.surface.chars().count()).max().unwrap_or(1);
        Self { pieces, index, max_len, seed_size }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Candidate> {
        self.pieces.iter()
    }

    pub fn get(&self, surface: &str) -> Option<&Candidate> {
        self.index.get(surface).map(|&i| &self.pieces[i])
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.index.contains_key(surface)
    }

    pub fn log_sum_exp(&self) -> f64 {
        log_sum_exp(self.pieces.iter().map(|c| c.log_prob))
    }

    fn lookup(&self, excluded: Option<usize>) -> impl Fn(&str) -> Option<(usize, f64)> + '_ {
        move |s| self.index.get(s).copied().filter(|&i| Some(i) != excluded).map(|i| (i, self.pieces[i].log_prob))
    }

    fn is_char(&self, i: usize) -> bool {
        let mut it = self.pieces[i].surface.chars();
        it.next().is_some() && it.next().is_none()
    }

    fn with_log_probs(&self, log_probs: Vec<f64>, freqs: Vec<f64>) -> Self {
        let pieces = self
            .pieces
            .iter()
            .zip(log_probs.into_iter().zip(freqs))
            .map(|(c, (log_prob, freq))| Candidate { surface: c.surface.clone(), log_prob, freq })
            .collect();
        Self { pieces, index: self.index.clone(), max_len: self.max_len, seed_size: self.seed_size }
    }
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgePiece {
    Piece(usize),
    Fallback(char),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub start: usize,
    pub end: usize,
    pub piece: EdgePiece,
    pub score: f64,
}

impl Edge {
    fn tokens(&self) -> usize {
        match self.piece {
            EdgePiece::Piece(_) => 1,
            EdgePiece::Fallback(c) => c.len_utf8(),
        }
    }
}

/// Segmentation lattice of one word: `starts[i]` holds the edges leaving
/// character position `i`.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub len: usize,
    pub starts: Vec<Vec<Edge>>,
}

impl Lattice {
    /// `lookup` maps a substring to `(piece, score)`. When `fallback_score`
    /// is set, positions without a single-character piece get a fallback edge.
    pub fn build(
        word: &str,
        max_len: usize,
        lookup: impl Fn(&str) -> Option<(usize, f64)>,
        fallback_score: Option<f64>,
    ) -> Self {
        let bounds: Vec<usize> = word.char_indices().map(|(i, _)| i).chain([word.len()]).collect();
        let n = bounds.len() - 1;
        let mut starts = vec![Vec::new(); n];
        for (i, edges) in starts.iter_mut().enumerate() {
            for end in i + 1..=(i + max_len).min(n) {
                if let Some((piece, score)) = lookup(&word[bounds[i]..bounds[end]]) {
                    edges.push(Edge { start: i, end, piece: EdgePiece::Piece(piece), score });
                }
            }
            if let Some(fb) = fallback_score {
                if !edges.iter().any(|e| e.end == i + 1) {
                    let c = word[bounds[i]..].chars().next().expect("position inside word");
                    edges.push(Edge { start: i, end: i + 1, piece: EdgePiece::Fallback(c), score: fb });
                }
            }
        }
        Self { len: n, starts }
    }

    /// Best segmentation: maximal score, then fewest tokens, then
    /// leftmost-longest. `None` when the word cannot be covered.
    pub fn viterbi(&self) -> Option<(f64, Vec<Edge>)> {
        #[derive(Clone, Copy)]
        struct Best {
            score: f64,
            tokens: usize,
            edge: Option<Edge>,
        }
        let mut best: Vec<Option<Best>> = vec![None; self.len + 1];
        best[self.len] = Some(Best { score: 0.0, tokens: 0, edge: None });
        for i in (0..self.len).rev() {
            let mut cur: Option<Best> = None;
            for e in &self.starts[i] {
                let Some(next) = best[e.end] else { continue };
                let cand = Best { score: e.score + next.score, tokens: e.tokens() + next.tokens, edge: Some(*e) };
                let better = match cur {
                    None => true,
                    Some(c) => {
                        cand.score > c.score
                            || (cand.score == c.score
                                && (cand.tokens < c.tokens
                                    || (cand.tokens == c.tokens && e.end > c.edge.map_or(0, |x| x.end))))
                    }
                };
                if better {
                    cur = Some(cand);
                }
            }
            best[i] = cur;
        }
        let total = best[0]?;
        let mut path = Vec::new();
        let mut pos = 0;
        while pos < self.len {
            let e = best[pos]?.edge?;
            path.push(e);
            pos = e.end;
        }
        Some((total.score, path))
    }

    /// Forward–backward: log marginal likelihood and per-edge posteriors.
    pub fn marginals(&self) -> (f64, Vec<(Edge, f64)>) {
        let n = self.len;
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        for i in 0..n {
            if alpha[i] == f64::NEG_INFINITY {
                continue;
            }
            for e in &self.starts[i] {
                alpha[e.end] = log_add(alpha[e.end], alpha[i] + e.score);
            }
        }
        let mut beta = vec![f64::NEG_INFINITY; n + 1];
        beta[n] = 0.0;
        for i in (0..n).rev() {
            for e in &self.starts[i] {
                beta[i] = log_add(beta[i], e.score + beta[e.end]);
            }
        }
        let z = alpha[n];
        let mut post = Vec::new();
        if z == f64::NEG_INFINITY {
            return (z, post);
        }
        for edges in &self.starts {
            for e in edges {
                let lp = alpha[e.start] + e.score + beta[e.end] - z;
                if lp > f64::NEG_INFINITY {
                    post.push((*e, lp.exp()));
                }
            }
        }
        (z, post)
    }
}

/// Viterbi segmentation of one pretokenized word against a Unigram vocabulary.
pub(crate) fn segment_word(vocab: &Vocabulary, word: &str) -> Vec<Segment> {
    let lookup = |s: &str| vocab.learned_id(s).map(|id| (id as usize, vocab.pieces()[id as usize].score));
    let fallback = vocab.min_score() - FALLBACK_PENALTY;
    let lattice = Lattice::build(word, vocab.max_piece_chars(), lookup, Some(fallback));
    let (_, path) = lattice.viterbi().expect("fallback edges make every word segmentable");
    path.into_iter()
        .map(|e| match e.piece {
            EdgePiece::Piece(id) => Segment::Piece { id: id as u32, chars: e.end - e.start },
            EdgePiece::Fallback(c) => Segment::Fallback(c),
        })
        .collect()
}

/// Viterbi encoding with a Unigram vocabulary.
pub fn encode_unigram(vocab: &Vocabulary, text: &str) -> crate::vocab::TokenSequence {
    debug_assert_eq!(vocab.kind(), VocabKind::Unigram);
    vocab.encode(text)
}

fn word_list(counts: &WordCounts) -> Vec<(&str, u64)> {
    counts.iter().collect()
}

/// Most frequent substrings (up to `max_piece_len` characters) plus every
/// single character, scored by normalized frequency.
pub fn seed_candidates(counts: &WordCounts, seed_size: usize, max_piece_len: usize) -> Result<CandidateSet> {
    if max_piece_len == 0 {
        return Err(Error::Config("max_piece_len must be >= 1".into()));
    }
    let mut chars: HashMap<char, u64> = HashMap::new();
    let mut subs: HashMap<String, u64> = HashMap::new();
    for (word, c) in counts.iter() {
        let bounds: Vec<usize> = word.char_indices().map(|(i, _)| i).chain([word.len()]).collect();
        let n = bounds.len() - 1;
        for (i, ch) in word.chars().enumerate() {
            *chars.entry(ch).or_insert(0) += c;
            for end in i + 2..=(i + max_piece_len).min(n) {
                let s = &word[bounds[i]..bounds[end]];
                match subs.get_mut(s) {
                    Some(v) => *v += c,
                    None => {
                        subs.insert(s.to_string(), c);
                    }
                }
            }
        }
    }
    if seed_size < chars.len() {
        return Err(Error::Config(format!(
            "seed_size {seed_size} is smaller than the character inventory ({})",
            chars.len()
        )));
    }
    let mut ranked: Vec<(String, u64)> = subs.into_iter().filter(|(s, _)| !is_reserved_surface(s)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(seed_size - chars.len());

    let mut all: Vec<(String, u64)> = chars.into_iter().map(|(c, f)| (c.to_string(), f)).collect();
    all.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.extend(ranked);
    let total: f64 = all.iter().map(|(_, f)| *f as f64).sum();
    let pieces = all
        .into_iter()
        .map(|(surface, f)| Candidate { surface, log_prob: (f as f64 / total).ln(), freq: f as f64 })
        .collect();
    Ok(CandidateSet::from_candidates(pieces, seed_size))
}

/// Corpus log marginal likelihood `Σ_w count(w) · log Σ_seg P(seg)`.
pub fn corpus_log_likelihood(candidates: &CandidateSet, counts: &WordCounts) -> Result<f64> {
    Ok(e_step(candidates, &word_list(counts))?.1)
}

fn e_step(cands: &CandidateSet, words: &[(&str, u64)]) -> Result<(Vec<f64>, f64)> {
    let lookup = cands.lookup(None);
    let partials: Vec<(Vec<f64>, f64)> = words
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut expected = vec![0.0f64; cands.len()];
            let mut ll = 0.0f64;
            for &(w, c) in chunk {
                let lattice = Lattice::build(w, cands.max_len, &lookup, None);
                let (z, post) = lattice.marginals();
                let c = c as f64;
                ll += c * z;
                for (e, p) in post {
                    if let EdgePiece::Piece(i) = e.piece {
                        expected[i] += c * p;
                    }
                }
            }
            (expected, ll)
        })
        .collect();
    let mut expected = vec![0.0f64; cands.len()];
    let mut ll = 0.0f64;
    for (part, part_ll) in partials {
        for (acc, v) in expected.iter_mut().zip(part) {
            *acc += v;
        }
        ll += part_ll;
    }
    if ll.is_nan() || expected.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN in expected counts".into()));
    }
    if ll == f64::NEG_INFINITY {
        return Err(Error::Numerical("a corpus word is not segmentable by the candidate set".into()));
    }
    Ok((expected, ll))
}

/// One EM iteration. Returns the updated set and the corpus log-likelihood
/// of the input set.
pub fn em_step_with_likelihood(candidates: &CandidateSet, counts: &WordCounts) -> Result<(CandidateSet, f64)> {
    em_step_words(candidates, &word_list(counts))
}

pub fn em_step(candidates: &CandidateSet, counts: &WordCounts) -> Result<CandidateSet> {
    Ok(em_step_with_likelihood(candidates, counts)?.0)
}

fn em_step_words(cands: &CandidateSet, words: &[(&str, u64)]) -> Result<(CandidateSet, f64)> {
    let (expected, ll) = e_step(cands, words)?;
    let total: f64 = expected.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numerical("expected counts sum to zero".into()));
    }
    let log_probs = expected.iter().map(|&e| if e > 0.0 { (e / total).ln() } else { LOG_PROB_FLOOR }).collect();
    Ok((cands.with_log_probs(log_probs, expected), ll))
}

/// Per-piece likelihood loss if the piece were deleted, under the Viterbi
/// approximation: `Σ_w count(w) · (V_w − V_w without the piece)`. Single
/// characters are not removable and report `None`.
pub fn prune_losses(candidates: &CandidateSet, counts: &WordCounts) -> Vec<Option<f64>> {
    prune_losses_words(candidates, &word_list(counts))
}

fn prune_losses_words(cands: &CandidateSet, words: &[(&str, u64)]) -> Vec<Option<f64>> {
    let lookup = cands.lookup(None);
    let paths: Vec<Option<(f64, Vec<usize>)>> = words
        .par_iter()
        .map(|&(w, _)| {
            Lattice::build(w, cands.max_len, &lookup, None).viterbi().map(|(s, path)| {
                let mut used: Vec<usize> = path
                    .iter()
                    .filter_map(|e| match e.piece {
                        EdgePiece::Piece(i) => Some(i),
                        EdgePiece::Fallback(_) => None,
                    })
                    .collect();
                used.sort_unstable();
                used.dedup();
                (s, used)
            })
        })
        .collect();
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); cands.len()];
    for (wi, p) in paths.iter().enumerate() {
        if let Some((_, used)) = p {
            for &i in used {
                users[i].push(wi);
            }
        }
    }
    (0..cands.len())
        .into_par_iter()
        .map(|i| {
            if cands.is_char(i) {
                return None;
            }
            let without = cands.lookup(Some(i));
            let mut loss = 0.0;
            for &wi in &users[i] {
                let (w, c) = words[wi];
                let best = paths[wi].as_ref().map(|p| p.0).expect("user words have a path");
                let alt = Lattice::build(w, cands.max_len, &without, None)
                    .viterbi()
                    .map(|(s, _)| s)
                    .unwrap_or(f64::NEG_INFINITY);
                loss += c as f64 * (best - alt);
            }
            Some(loss)
        })
        .collect()
}

/// Keeps `keep_fraction` of the set, dropping the lowest-loss pieces first.
/// Single characters are never dropped.
pub fn prune(candidates: &CandidateSet, counts: &WordCounts, keep_fraction: f64) -> Result<CandidateSet> {
    if !(keep_fraction > 0.0 && keep_fraction < 1.0) {
        return Err(Error::Config(format!("keep_fraction must be in (0, 1), got {keep_fraction}")));
    }
    let target = (candidates.len() as f64 * keep_fraction).ceil() as usize;
    Ok(prune_to(candidates, &word_list(counts), target))
}

/// Removal order used by pruning: increasing loss, then lower log-prob,
/// then surface.
pub fn prune_order(candidates: &CandidateSet, counts: &WordCounts) -> Vec<String> {
    let losses = prune_losses(candidates, counts);
    removal_order(candidates, &losses).into_iter().map(|i| candidates.pieces[i].surface.clone()).collect()
}

fn removal_order(cands: &CandidateSet, losses: &[Option<f64>]) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = losses.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l))).collect();
    order.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then_with(|| cands.pieces[a.0].log_prob.total_cmp(&cands.pieces[b.0].log_prob))
            .then_with(|| cands.pieces[a.0].surface.cmp(&cands.pieces[b.0].surface))
    });
    order.into_iter().map(|(i, _)| i).collect()
}

fn prune_to(cands: &CandidateSet, words: &[(&str, u64)], target: usize) -> CandidateSet {
    if cands.len() <= target {
        return cands.clone();
    }
    let losses = prune_losses_words(cands, words);
    let order = removal_order(cands, &losses);
    let n_drop = (cands.len() - target).min(order.len());
    let mut dropped = vec![false; cands.len()];
    for &i in &order[..n_drop] {
        dropped[i] = true;
    }
    let kept: Vec<Candidate> =
        cands.pieces.iter().zip(&dropped).filter(|(_, &d)| !d).map(|(c, _)| c.clone()).collect();
    let lse = log_sum_exp(kept.iter().filter(|c| c.log_prob > LOG_PROB_FLOOR).map(|c| c.log_prob));
    let kept = kept
        .into_iter()
        .map(|c| Candidate {
            log_prob: if c.log_prob > LOG_PROB_FLOOR { c.log_prob - lse } else { c.log_prob },
            ..c
        })
        .collect();
    CandidateSet::from_candidates(kept, cands.seed_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnigramConfig {
    /// Total vocabulary size, reserved pieces included.
    pub vocab_size: usize,
    /// Defaults to `4 × vocab_size`, capped by the substring inventory.
    pub seed_size: Option<usize>,
    pub em_iters_per_round: usize,
    pub keep_fraction: f64,
    pub max_piece_len: usize,
}

impl Default for UnigramConfig {
    fn default() -> Self {
        Self { vocab_size: 32_000, seed_size: None, em_iters_per_round: 2, keep_fraction: 0.75, max_piece_len: 16 }
    }
}

impl UnigramConfig {
    pub fn with_vocab_size(vocab_size: usize) -> Self {
        Self { vocab_size, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct UnigramTraining {
    pub vocab: Vocabulary,
    /// Corpus log-likelihood before each EM step, in order.
    pub log_likelihoods: Vec<f64>,
}

pub fn train_unigram(counts: &WordCounts, config: &UnigramConfig) -> Result<Vocabulary> {
    Ok(train_unigram_traced(counts, config)?.vocab)
}

pub fn train_unigram_traced(counts: &WordCounts, config: &UnigramConfig) -> Result<UnigramTraining> {
    let n_chars = counts.alphabet().len();
    let minimum = NUM_RESERVED + n_chars;
    if config.vocab_size < minimum {
        return Err(Error::VocabTooSmall { requested: config.vocab_size, minimum });
    }
    if !(config.keep_fraction > 0.0 && config.keep_fraction < 1.0) {
        return Err(Error::Config(format!("keep_fraction must be in (0, 1), got {}", config.keep_fraction)));
    }
    let target = config.vocab_size - NUM_RESERVED;
    let seed_size = config.seed_size.unwrap_or(4 * config.vocab_size);
    if seed_size < target {
        return Err(Error::Config(format!("seed_size {seed_size} is smaller than the {target} learned pieces requested")));
    }
    let words = word_list(counts);
    let mut cands = seed_candidates(counts, seed_size, config.max_piece_len)?;
    let mut lls = Vec::new();
    let em_round = |cands: CandidateSet, lls: &mut Vec<f64>| -> Result<CandidateSet> {
        let mut cands = cands;
        for _ in 0..config.em_iters_per_round.max(1) {
            let (next, ll) = em_step_words(&cands, &words)?;
            lls.push(ll);
            cands = next;
        }
        Ok(cands)
    };
    while cands.len() > target {
        cands = em_round(cands, &mut lls)?;
        let shrink = ((cands.len() as f64) * config.keep_fraction).ceil() as usize;
        let next_size = shrink.min(cands.len() - 1).max(target);
        let before = cands.len();
        cands = prune_to(&cands, &words, next_size);
        log::debug!("unigram prune {before} -> {}", cands.len());
        if cands.len() == before {
            break;
        }
    }
    cands = em_round(cands, &mut lls)?;

    let mut learned: Vec<(String, f64)> = cands.pieces.into_iter().map(|c| (c.surface, c.log_prob)).collect();
    learned.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let vocab = Vocabulary::new(VocabKind::Unigram, learned, MergeTable::default())?;
    Ok(UnigramTraining { vocab, log_likelihoods: lls })
}
