//! Morphological quality of a tokenizer: root integrity and tokens-per-word,
//! plus the token-count efficiency projection between two tokenizers.
//!
//! Root integrity of a word is the best LCS between any of its tokens and the
//! root, divided by the root length. Boundary markers are stripped from
//! token surfaces first.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{pretokenize, Vocabulary, MARKER};

/// Longest common subsequence length over Unicode scalar values.
pub fn lcs_length(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &ca in &a {
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MorphRecord {
    pub word: String,
    pub root: String,
}

impl MorphRecord {
    pub fn new(word: impl Into<String>, root: impl Into<String>) -> Self {
        Self { word: word.into(), root: root.into() }
    }

    /// Roots longer than their word are accepted but flagged.
    pub fn is_suspicious(&self) -> bool {
        self.root.chars().count() > self.word.chars().count()
    }
}

/// `max_t lcs(t, root) / |root|`, or `None` for an empty root.
pub fn root_integrity<S: AsRef<str>>(root: &str, tokens: &[S]) -> Option<f64> {
    let root_len = root.chars().count();
    if root_len == 0 {
        return None;
    }
    let best = tokens
        .iter()
        .map(|t| {
            let stripped: String = t.as_ref().chars().filter(|&c| c != MARKER).collect();
            lcs_length(&stripped, root)
        })
        .max()
        .unwrap_or(0);
    Some(best as f64 / root_len as f64)
}

/// Token surfaces for morphology: markers stripped, byte-fallback runs
/// decoded and split into one string per character.
pub fn token_strings(vocab: &Vocabulary, ids: &[u32]) -> Vec<String> {
    let mut out = Vec::with_capacity(ids.len());
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut Vec<String>| {
        if !bytes.is_empty() {
            out.extend(String::from_utf8_lossy(bytes).chars().filter(|&c| c != MARKER).map(String::from));
            bytes.clear();
        }
    };
    for &id in ids {
        if let Some(b) = Vocabulary::byte_value(id) {
            bytes.push(b);
            continue;
        }
        flush(&mut bytes, &mut out);
        if let Some(p) = vocab.piece(id) {
            out.push(p.surface.chars().filter(|&c| c != MARKER).collect());
        }
    }
    flush(&mut bytes, &mut out);
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedDataset {
    pub records: Vec<MorphRecord>,
    /// Lines that were not `word<TAB>root`.
    pub malformed_lines: usize,
}

/// Parses `word\troot` lines. Malformed lines are counted, never fatal.
pub fn parse_dataset<R: BufRead>(mut reader: R) -> Result<ParsedDataset> {
    let mut out = ParsedDataset::default();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        match parse_record_line(&buf) {
            Some(Some(r)) => out.records.push(r),
            Some(None) => {}
            None => out.malformed_lines += 1,
        }
    }
    Ok(out)
}

/// `None` for malformed, `Some(None)` for a blank line.
pub fn parse_record_line(raw: &[u8]) -> Option<Option<MorphRecord>> {
    let line = std::str::from_utf8(raw).ok()?;
    let line = line.trim_end_matches(['\n', '\r']);
    if line.trim().is_empty() {
        return Some(None);
    }
    let mut cols = line.split('\t');
    let word = cols.next()?;
    let root = cols.next()?;
    if cols.next().is_some() || word.is_empty() {
        return None;
    }
    Some(Some(MorphRecord::new(word, root)))
}

/// Parses `word\tcount` lines into frequency weights; malformed lines are skipped.
pub fn parse_frequencies<R: BufRead>(reader: R) -> Result<HashMap<String, f64>> {
    let mut out = HashMap::new();
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => continue,
            Err(e) => return Err(e.into()),
        };
        let mut cols = line.split('\t');
        if let (Some(w), Some(c), None) = (cols.next(), cols.next(), cols.next()) {
            if let Ok(c) = c.trim().parse::<f64>() {
                if c.is_finite() && c >= 0.0 {
                    *out.entry(w.to_string()).or_insert(0.0) += c;
                }
            }
        }
    }
    Ok(out)
}

/// Stable content hash (FNV-1a, hex) used to detect mismatched datasets.
pub fn dataset_hash(records: &[MorphRecord]) -> String {
    let mut sorted: Vec<&MorphRecord> = records.iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut h: u64 = 0xcbf29ce484222325;
    for r in sorted {
        for b in r.word.bytes().chain(*b"\t").chain(r.root.bytes()).chain(*b"\n") {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokensPerWord {
    /// Token count to total weight (record count when unweighted).
    pub histogram: BTreeMap<usize, f64>,
    pub mean: f64,
    pub median: f64,
}

/// Token totals of one tokenizer over a running-text sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleStats {
    pub sample_hash: String,
    pub total_tokens: u64,
    pub total_words: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub tokenizer_name: String,
    pub vocab_size: usize,
    pub mean_root_integrity: f64,
    /// Same metric with words encoded without the word-start marker.
    pub mean_root_integrity_unmarked: f64,
    pub tokens_per_word: TokensPerWord,
    pub evaluated: usize,
    pub weighted: bool,
    pub skipped_empty_root: usize,
    pub skipped_zero_weight: usize,
    pub malformed_lines: usize,
    pub suspicious_records: usize,
    pub dataset_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleStats>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions<'a> {
    /// Frequency weights per word; `None` means every unique record weighs 1.
    pub word_freq: Option<&'a HashMap<String, f64>>,
    pub malformed_lines: usize,
}

/// Evaluates root integrity and tokens-per-word. Records are de-duplicated
/// and sorted first, which makes the result independent of record order.
pub fn evaluate_tokenizer(
    name: &str,
    vocab: &Vocabulary,
    records: &[MorphRecord],
    options: &EvalOptions<'_>,
) -> TokenizerReport {
    let mut sorted: Vec<&MorphRecord> = records.iter().collect();
    sorted.sort();
    sorted.dedup();

    let mut skipped_empty_root = 0;
    let mut skipped_zero_weight = 0;
    let mut suspicious = 0;
    let mut total_weight = 0.0;
    let mut integrity_sum = 0.0;
    let mut unmarked_sum = 0.0;
    let mut token_sum = 0.0;
    let mut histogram: BTreeMap<usize, f64> = BTreeMap::new();
    let mut evaluated = 0;

    for r in sorted {
        let weight = match options.word_freq {
            Some(freq) => freq.get(&r.word).copied().unwrap_or(0.0),
            None => 1.0,
        };
        if r.root.is_empty() {
            skipped_empty_root += 1;
            continue;
        }
        if weight <= 0.0 {
            skipped_zero_weight += 1;
            continue;
        }
        if r.is_suspicious() {
            suspicious += 1;
        }
        let marked = vocab.encode(&r.word);
        let unmarked = vocab.encode_pretokenized(&r.word);
        let tokens = token_strings(vocab, &marked.ids);
        let integrity = root_integrity(&r.root, &tokens).expect("root is non-empty");
        let integrity_unmarked =
            root_integrity(&r.root, &token_strings(vocab, &unmarked.ids)).expect("root is non-empty");
        evaluated += 1;
        total_weight += weight;
        integrity_sum += weight * integrity;
        unmarked_sum += weight * integrity_unmarked;
        token_sum += weight * marked.len() as f64;
        *histogram.entry(marked.len()).or_insert(0.0) += weight;
    }

    let mean = |s: f64| if total_weight > 0.0 { s / total_weight } else { 0.0 };
    let median = weighted_median(&histogram, total_weight);
    TokenizerReport {
        tokenizer_name: name.to_string(),
        vocab_size: vocab.len(),
        mean_root_integrity: mean(integrity_sum),
        mean_root_integrity_unmarked: mean(unmarked_sum),
        tokens_per_word: TokensPerWord { histogram, mean: mean(token_sum), median },
        evaluated,
        weighted: options.word_freq.is_some(),
        skipped_empty_root,
        skipped_zero_weight,
        malformed_lines: options.malformed_lines,
        suspicious_records: suspicious,
        dataset_hash: dataset_hash(records),
        sample: None,
    }
}

fn weighted_median(histogram: &BTreeMap<usize, f64>, total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (&k, &w) in histogram {
        acc += w;
        if acc >= total / 2.0 {
            return k as f64;
        }
    }
    histogram.keys().next_back().map_or(0.0, |&k| k as f64)
}

/// Token and word totals of a vocabulary over a text sample.
pub fn measure_sample<S: AsRef<str>>(vocab: &Vocabulary, texts: &[S]) -> SampleStats {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut tokens = 0u64;
    let mut words = 0u64;
    for t in texts {
        let t = t.as_ref();
        for b in t.bytes().chain([0u8]) {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        for line in t.split('\n') {
            tokens += vocab.encode(line).len() as u64;
            words += pretokenize(line).chars().filter(|&c| c == MARKER).count() as u64;
        }
    }
    SampleStats { sample_hash: format!("{h:016x}"), total_tokens: tokens, total_words: words }
}

/// Projected gains from replacing a tokenizer, derived from token counts alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyProjection {
    pub old_tokens: u64,
    pub new_tokens: u64,
    /// `old_tokens / new_tokens`.
    pub token_ratio: f64,
    /// `(token_ratio − 1) × 100`, assuming generation time linear in tokens.
    pub projected_speedup_percent: f64,
    /// Per-sequence cache memory of old over new (linear in token count).
    pub projected_memory_ratio: f64,
    pub label: String,
}

pub fn efficiency_projection(old_tokens: u64, new_tokens: u64) -> Result<EfficiencyProjection> {
    if old_tokens == 0 || new_tokens == 0 {
        return Err(Error::Config("efficiency projection needs non-zero token totals".into()));
    }
    let ratio = old_tokens as f64 / new_tokens as f64;
    Ok(EfficiencyProjection {
        old_tokens,
        new_tokens,
        token_ratio: ratio,
        projected_speedup_percent: (ratio - 1.0) * 100.0,
        projected_memory_ratio: ratio,
        label: "projection from token counts (not a measurement)".into(),
    })
}

/// Projection between two reports measured on the same sample.
pub fn project_reports(old: &TokenizerReport, new: &TokenizerReport) -> Result<EfficiencyProjection> {
    let (Some(a), Some(b)) = (&old.sample, &new.sample) else {
        return Err(Error::Config("both reports need sample token totals".into()));
    };
    if a.sample_hash != b.sample_hash {
        return Err(Error::Config("reports were measured on different corpus samples".into()));
    }
    efficiency_projection(a.total_tokens, b.total_tokens)
}
