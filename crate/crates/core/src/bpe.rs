//! Byte-pair-encoding trainer and merge-replay encoder.
//!
//! Training splits every pretokenized word into characters and repeatedly
//! merges the most frequent adjacent pair. Equal-frequency pairs are ordered
//! by their concatenated surface in code-point order (so `▁`-initial pairs
//! lose to ASCII ones), then by the left surface. Merges never cross a word
//! boundary.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vocab::{is_reserved_surface, pretokenize, split_words, MergeTable, Segment, VocabKind, Vocabulary, NUM_RESERVED};

pub const DEFAULT_VOCAB_SIZE: usize = 32_000;
pub const MIN_MERGE_FREQUENCY: u64 = 2;

/// Pretokenized word (with its leading `▁`) to corpus frequency.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordCounts(BTreeMap<String, u64>);

impl WordCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, word: &str, count: u64) {
        if count > 0 {
            *self.0.entry(word.to_string()).or_insert(0) += count;
        }
    }

    /// Counts the words of one normalized text, line by line.
    pub fn add_text(&mut self, text: &str) {
        for line in text.split('\n') {
            let marked = pretokenize(line);
            for w in split_words(&marked) {
                self.add(w, 1);
            }
        }
    }

    pub fn merge(&mut self, other: WordCounts) {
        for (w, c) in other.0 {
            *self.0.entry(w).or_insert(0) += c;
        }
    }

    pub fn get(&self, word: &str) -> Option<u64> {
        self.0.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    /// Words in code-point order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.0.iter().map(|(w, &c)| (w.as_str(), c))
    }

    /// Distinct characters, in code-point order.
    pub fn alphabet(&self) -> Vec<char> {
        let set: std::collections::BTreeSet<char> = self.0.keys().flat_map(|w| w.chars()).collect();
        set.into_iter().collect()
    }
}

impl FromIterator<(String, u64)> for WordCounts {
    fn from_iter<I: IntoIterator<Item = (String, u64)>>(iter: I) -> Self {
        let mut wc = WordCounts::new();
        for (w, c) in iter {
            wc.add(&w, c);
        }
        wc
    }
}

/// Exact word multiset of a normalized corpus. Shards are reduced by integer
/// addition, so the result does not depend on the thread count.
pub fn count_words<S: AsRef<str> + Sync>(docs: &[S]) -> WordCounts {
    docs.par_chunks(256)
        .map(|chunk| {
            let mut wc = WordCounts::new();
            for d in chunk {
                wc.add_text(d.as_ref());
            }
            wc
        })
        .reduce(WordCounts::new, |mut a, b| {
            a.merge(b);
            a
        })
}

type Pair = (u32, u32);

#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    concat: String,
    left: String,
    pair: Pair,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.concat.cmp(&self.concat))
            .then_with(|| other.left.cmp(&self.left))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Word {
    symbols: Vec<u32>,
    count: u64,
}

impl Word {
    fn pairs(&self) -> impl Iterator<Item = Pair> + '_ {
        self.symbols.windows(2).map(|w| (w[0], w[1]))
    }

    /// Merges all non-overlapping occurrences, left to right.
    fn apply(&mut self, pair: Pair, merged: u32) -> bool {
        let mut out = Vec::with_capacity(self.symbols.len());
        let mut i = 0;
        let mut changed = false;
        while i < self.symbols.len() {
            if i + 1 < self.symbols.len() && (self.symbols[i], self.symbols[i + 1]) == pair {
                out.push(merged);
                i += 2;
                changed = true;
            } else {
                out.push(self.symbols[i]);
                i += 1;
            }
        }
        self.symbols = out;
        changed
    }
}

/// Result of a traced training run.
#[derive(Debug, Clone)]
pub struct BpeTraining {
    pub vocab: Vocabulary,
    /// Corpus frequency of each merge at the moment it was chosen.
    pub merge_frequencies: Vec<u64>,
    /// Final segmentation of every training word, as surfaces.
    pub segmentations: BTreeMap<String, Vec<String>>,
}

pub fn train_bpe(counts: &WordCounts, vocab_size: usize) -> Result<Vocabulary> {
    Ok(train_bpe_traced(counts, vocab_size)?.vocab)
}

pub fn train_bpe_traced(counts: &WordCounts, vocab_size: usize) -> Result<BpeTraining> {
    let mut char_freq: HashMap<char, u64> = HashMap::new();
    for (w, c) in counts.iter() {
        for ch in w.chars() {
            *char_freq.entry(ch).or_insert(0) += c;
        }
    }
    let minimum = NUM_RESERVED + char_freq.len();
    if vocab_size < minimum {
        return Err(Error::VocabTooSmall { requested: vocab_size, minimum });
    }

    let mut chars: Vec<(char, u64)> = char_freq.into_iter().collect();
    chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut surfaces: Vec<String> = chars.iter().map(|(c, _)| c.to_string()).collect();
    let mut surface_ids: HashMap<String, u32> =
        surfaces.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();

    let mut words: Vec<Word> = counts
        .iter()
        .map(|(w, count)| Word { symbols: w.chars().map(|c| surface_ids[&c.to_string()]).collect(), count })
        .collect();

    let mut pair_counts: HashMap<Pair, u64> = HashMap::new();
    let mut occurs_in: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, word) in words.iter().enumerate() {
        for p in word.pairs() {
            *pair_counts.entry(p).or_insert(0) += word.count;
            occurs_in.entry(p).or_default().insert(wi);
        }
    }

    let candidate = |p: Pair, count: u64, surfaces: &[String]| {
        let left = surfaces[p.0 as usize].clone();
        let concat = format!("{left}{}", surfaces[p.1 as usize]);
        Candidate { count, concat, left, pair: p }
    };
    let mut heap: BinaryHeap<Candidate> =
        pair_counts.iter().map(|(&p, &c)| candidate(p, c, &surfaces)).collect();

    let mut merges = MergeTable::default();
    let mut merge_frequencies = Vec::new();
    let mut blocked: HashSet<Pair> = HashSet::new();

    while NUM_RESERVED + surfaces.len() < vocab_size {
        let Some(top) = heap.pop() else { break };
        let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count || blocked.contains(&top.pair) {
            continue;
        }
        if current < MIN_MERGE_FREQUENCY {
            break;
        }
        if is_reserved_surface(&top.concat) {
            blocked.insert(top.pair);
            continue;
        }
        let merged = match surface_ids.get(&top.concat) {
            Some(&id) => id,
            None => {
                let id = surfaces.len() as u32;
                surfaces.push(top.concat.clone());
                surface_ids.insert(top.concat.clone(), id);
                id
            }
        };
        merges.merges.push((top.left.clone(), surfaces[top.pair.1 as usize].clone()));
        merge_frequencies.push(current);

        let mut affected: Vec<usize> = occurs_in.remove(&top.pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        let mut touched: HashSet<Pair> = HashSet::new();
        for wi in affected {
            let word = &mut words[wi];
            let before: Vec<Pair> = word.pairs().collect();
            if !word.apply(top.pair, merged) {
                continue;
            }
            for p in before {
                if let Some(c) = pair_counts.get_mut(&p) {
                    *c -= word.count;
                }
                touched.insert(p);
            }
            for p in word.pairs() {
                *pair_counts.entry(p).or_insert(0) += word.count;
                occurs_in.entry(p).or_default().insert(wi);
                touched.insert(p);
            }
        }
        pair_counts.remove(&top.pair);
        let mut touched: Vec<Pair> = touched.into_iter().collect();
        touched.sort_unstable();
        for p in touched {
            match pair_counts.get(&p).copied() {
                Some(0) => {
                    pair_counts.remove(&p);
                }
                Some(c) => heap.push(candidate(p, c, &surfaces)),
                None => {}
            }
        }
    }

    let learned: Vec<(String, f64)> =
        surfaces.iter().enumerate().map(|(rank, s)| (s.clone(), -(rank as f64))).collect();
    let vocab = Vocabulary::new(VocabKind::Bpe, learned, merges)?;
    let segmentations = counts
        .iter()
        .zip(&words)
        .map(|((w, _), word)| (w.to_string(), word.symbols.iter().map(|&s| surfaces[s as usize].clone()).collect()))
        .collect();
    Ok(BpeTraining { vocab, merge_frequencies, segmentations })
}

/// Merge replay for one pretokenized word: start from characters and apply
/// the lowest-rank applicable merge (leftmost first) until none applies.
/// Characters unknown to the vocabulary fall back to bytes and never merge.
pub(crate) fn segment_word(vocab: &Vocabulary, word: &str) -> Vec<Segment> {
    let mut buf = [0u8; 4];
    let mut syms: Vec<Segment> = word
        .chars()
        .map(|c| match vocab.learned_id(c.encode_utf8(&mut buf)) {
            Some(id) => Segment::Piece { id, chars: 1 },
            None => Segment::Fallback(c),
        })
        .collect();
    loop {
        let mut best: Option<(u32, usize, u32)> = None;
        for i in 0..syms.len().saturating_sub(1) {
            if let (Segment::Piece { id: l, .. }, Segment::Piece { id: r, .. }) = (syms[i], syms[i + 1]) {
                if let Some((rank, merged)) = vocab.merge_rank(l, r) {
                    if best.is_none_or(|(br, _, _)| rank < br) {
                        best = Some((rank, i, merged));
                    }
                }
            }
        }
        let Some((_, i, merged)) = best else { break };
        let chars = match (syms[i], syms[i + 1]) {
            (Segment::Piece { chars: a, .. }, Segment::Piece { chars: b, .. }) => a + b,
            _ => unreachable!("only piece pairs are merge candidates"),
        };
        syms[i] = Segment::Piece { id: merged, chars };
        syms.remove(i + 1);
    }
    syms
}

/// Encodes text with a BPE vocabulary (merge replay per word).
pub fn encode_bpe(vocab: &Vocabulary, text: &str) -> crate::vocab::TokenSequence {
    debug_assert_eq!(vocab.kind(), VocabKind::Bpe);
    vocab.encode(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(&str, u64)]) -> WordCounts {
        pairs.iter().map(|(w, c)| (w.to_string(), *c)).collect()
    }

    fn surfaces(v: &Vocabulary, text: &str) -> Vec<String> {
        v.encode(text).ids.iter().map(|&id| v.piece(id).unwrap().surface.clone()).collect()
    }

    #[test]
    fn count_words_examples() {
        let wc = count_words(&["low low lower"]);
        assert_eq!(wc, counts(&[("▁low", 2), ("▁lower", 1)]));
        assert!(count_words::<&str>(&[]).is_empty());
        let shards = count_words(&["low low", "lower"]);
        assert_eq!(shards, wc);
    }

    #[test]
    fn first_merge_uses_codepoint_tiebreak() {
        let wc = counts(&[("▁low", 2), ("▁lower", 1)]);
        let t = train_bpe_traced(&wc, NUM_RESERVED + 6 + 3).unwrap();
        assert_eq!(t.vocab.merges().merges[0], ("l".to_string(), "o".to_string()));
        assert_eq!(t.merge_frequencies[0], 3);
        assert_eq!(t.vocab.merges().len(), 3);
    }

    #[test]
    fn repeated_pair_example() {
        let wc = counts(&[("▁aa", 5)]);
        let v = train_bpe(&wc, NUM_RESERVED + 2 + 2).unwrap();
        assert_eq!(
            v.merges().merges,
            vec![("a".to_string(), "a".to_string()), ("▁".to_string(), "aa".to_string())]
        );
    }

    #[test]
    fn single_character_corpus_has_no_merges() {
        let wc = counts(&[("▁", 4)]);
        let v = train_bpe(&wc, 1000).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), NUM_RESERVED + 1);
    }

    #[test]
    fn too_small_vocab_reports_minimum() {
        let wc = counts(&[("▁abc", 3)]);
        match train_bpe(&wc, 100) {
            Err(Error::VocabTooSmall { minimum, .. }) => assert_eq!(minimum, NUM_RESERVED + 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn singletons_are_not_merged() {
        let wc = counts(&[("▁xy", 1), ("▁zw", 1)]);
        let v = train_bpe(&wc, 1000).unwrap();
        assert!(v.merges().is_empty());
    }

    #[test]
    fn replay_matches_training_segmentation() {
        let wc = counts(&[("▁low", 2), ("▁lower", 1)]);
        let t = train_bpe_traced(&wc, NUM_RESERVED + 6 + 3).unwrap();
        assert_eq!(surfaces(&t.vocab, "low"), t.segmentations["▁low"]);
        assert_eq!(surfaces(&t.vocab, "lower"), t.segmentations["▁lower"]);
    }

    #[test]
    fn replay_without_marked_piece() {
        let v = Vocabulary::new(
            VocabKind::Bpe,
            vec![("▁".into(), 0.0), ("l".into(), -1.0), ("o".into(), -2.0), ("w".into(), -3.0), ("lo".into(), -4.0)],
            MergeTable { merges: vec![("l".into(), "o".into())] },
        )
        .unwrap();
        assert_eq!(surfaces(&v, "low"), vec!["▁", "lo", "w"]);
    }

    #[test]
    fn unseen_character_uses_byte_fallback() {
        let wc = counts(&[("▁ab", 3)]);
        let v = train_bpe(&wc, 1000).unwrap();
        let seq = v.encode("aж");
        assert!(seq.ids.contains(&Vocabulary::byte_id(0xD0)));
        assert_eq!(v.decode(&seq.ids).unwrap().text, "aж");
        assert!(v.encode("").is_empty());
    }

    #[test]
    fn frequencies_are_non_increasing() {
        let wc = count_words(&["низко летит низкий самолёт над низиной, низко и низко летит"]);
        let t = train_bpe_traced(&wc, 400).unwrap();
        assert!(t.merge_frequencies.windows(2).all(|w| w[0] >= w[1]), "{:?}", t.merge_frequencies);
    }
}
