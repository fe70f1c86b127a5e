//! Corpus ingestion: text normalization, script filtering and MinHash/LSH
//! near-duplicate removal.
//!
//! Documents travel as JSON lines (`{"id": .., "text": .., "source": ..}`).
//! Signatures are computed in parallel, but the LSH index is updated strictly
//! in input order, so the surviving set never depends on the worker count.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::vocab::MARKER;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, source: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), source: source.into() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub doc_count: u64,
    pub word_count: u64,
    pub byte_count: u64,
    pub dropped_dupes: u64,
    pub dropped_filtered: u64,
    /// Documents with no shingle of the configured width; they are kept unindexed.
    pub too_short: u64,
}

impl CorpusStats {
    fn count_survivor(&mut self, doc: &Document) {
        self.doc_count += 1;
        self.word_count += doc.text.split_whitespace().count() as u64;
        self.byte_count += doc.text.len() as u64;
    }
}

/// Validates UTF-8 and normalizes. The error names the first bad byte offset.
pub fn normalize_bytes(raw: &[u8]) -> Result<String> {
    match std::str::from_utf8(raw) {
        Ok(s) => Ok(normalize_text(s)),
        Err(e) => Err(Error::InvalidUtf8 { offset: e.valid_up_to() }),
    }
}

/// NFC, single spaces, single newlines, no blank lines, trimmed.
///
/// Every non-newline whitespace character (tabs, NBSP, the `▁` boundary
/// marker) becomes a plain space and other control characters are removed
/// before composition, so the result is a fixed point of this function.
pub fn normalize_text(raw: &str) -> String {
    let mapped: String = raw
        .chars()
        .filter_map(|c| match c {
            '\n' | '\r' => Some('\n'),
            MARKER => Some(' '),
            c if c.is_whitespace() => Some(' '),
            c if c.is_control() => None,
            c => Some(c),
        })
        .collect();
    let composed: String = mapped.nfc().collect();
    collapse_whitespace(&composed)
}

fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.split('\n') {
        let mut words = line.split(' ').filter(|w| !w.is_empty()).peekable();
        if words.peek().is_none() {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        let mut first = true;
        for w in words {
            if !first {
                out.push(' ');
            }
            out.push_str(w);
            first = false;
        }
    }
    out
}

/// Whether a character survives the Cyrillic/Latin script filter.
pub fn is_allowed_char(c: char) -> bool {
    let cp = c as u32;
    c.is_whitespace()
        || matches!(cp,
            0x21..=0x7E            // ASCII letters, digits, punctuation
            | 0xA0..=0xFF          // Latin-1 letters and punctuation
            | 0x100..=0x24F        // Latin Extended-A/B
            | 0x1E00..=0x1EFF      // Latin Extended Additional
            | 0x400..=0x52F        // Cyrillic + Supplement
            | 0x1C80..=0x1C8F      // Cyrillic Extended-C
            | 0x2DE0..=0x2DFF      // Cyrillic Extended-A
            | 0xA640..=0xA69F      // Cyrillic Extended-B
            | 0x2010..=0x2027      // dashes, quotes, bullets, ellipsis
            | 0x2030..=0x205E      // per mille, primes, guillemets
            | 0x20A0..=0x20BF      // currency signs
            | 0x2116               // numero sign
        )
}

/// Drops characters outside the allowed scripts, then re-normalizes.
pub fn filter_script(text: &str) -> String {
    let kept: String = text.chars().filter(|&c| is_allowed_char(c)).collect();
    normalize_text(&kept)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub values: Vec<u64>,
    pub num_perm: usize,
}

impl MinHashSignature {
    /// Fraction of positions where both signatures hold the same minimum.
    pub fn agreement(&self, other: &MinHashSignature) -> f64 {
        assert_eq!(self.num_perm, other.num_perm, "signatures from different hashers");
        let same = self.values.iter().zip(&other.values).filter(|(a, b)| a == b).count();
        same as f64 / self.num_perm as f64
    }
}

const MERSENNE_61: u64 = (1 << 61) - 1;

/// Family of `num_perm` universal hash functions `(a·x + b) mod (2^61 − 1)`
/// over 64-bit shingle fingerprints.
#[derive(Debug, Clone)]
pub struct MinHasher {
    shingle_k: usize,
    coeffs: Vec<(u64, u64)>,
}

impl MinHasher {
    pub fn new(num_perm: usize, shingle_k: usize, seed: u64) -> Result<Self> {
        if num_perm < 16 {
            return Err(Error::Config(format!("num_perm must be >= 16, got {num_perm}")));
        }
        if shingle_k == 0 {
            return Err(Error::Config("shingle_k must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..num_perm)
            .map(|_| (rng.random_range(1..MERSENNE_61), rng.random_range(0..MERSENNE_61)))
            .collect();
        Ok(Self { shingle_k, coeffs })
    }

    pub fn num_perm(&self) -> usize {
        self.coeffs.len()
    }

    /// Returns `None` when the text has fewer than `shingle_k` characters
    /// ("too short to dedup").
    pub fn signature(&self, text: &str) -> Option<MinHashSignature> {
        let shingles = shingle_set(text, self.shingle_k);
        if shingles.is_empty() {
            return None;
        }
        let mut values = vec![u64::MAX; self.coeffs.len()];
        for &x in &shingles {
            let x = x % MERSENNE_61;
            for (slot, &(a, b)) in values.iter_mut().zip(&self.coeffs) {
                let h = ((a as u128 * x as u128 + b as u128) % MERSENNE_61 as u128) as u64;
                if h < *slot {
                    *slot = h;
                }
            }
        }
        Some(MinHashSignature { values, num_perm: self.coeffs.len() })
    }
}

/// FNV-1a fingerprints of all character k-shingles.
pub fn shingle_set(text: &str, k: usize) -> HashSet<u64> {
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
    let n_chars = bounds.len() - 1;
    if k == 0 || n_chars < k {
        return HashSet::new();
    }
    (0..=n_chars - k).map(|i| fnv1a(&text.as_bytes()[bounds[i]..bounds[i + k]])).collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn minhash_signature(
    text: &str,
    num_perm: usize,
    shingle_k: usize,
    seed: u64,
) -> Result<Option<MinHashSignature>> {
    Ok(MinHasher::new(num_perm, shingle_k, seed)?.signature(text))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    pub threshold: f64,
    pub num_perm: usize,
    pub bands: usize,
    pub rows: usize,
    pub shingle_k: usize,
    pub seed: u64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self { threshold: 0.8, num_perm: 128, bands: 16, rows: 8, shingle_k: 5, seed: 0 }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold must be in (0, 1], got {}", self.threshold)));
        }
        if self.bands * self.rows != self.num_perm {
            return Err(Error::Config(format!(
                "bands ({}) x rows ({}) must equal num_perm ({})",
                self.bands, self.rows, self.num_perm
            )));
        }
        Ok(())
    }
}

/// Streaming LSH deduplicator. First-seen document of a cluster wins.
pub struct Deduper {
    config: DedupConfig,
    hasher: MinHasher,
    buckets: HashMap<(usize, u64), Vec<usize>>,
    kept: Vec<MinHashSignature>,
    stats: CorpusStats,
}

impl Deduper {
    pub fn new(config: DedupConfig) -> Result<Self> {
        config.validate()?;
        let hasher = MinHasher::new(config.num_perm, config.shingle_k, config.seed)?;
        Ok(Self { config, hasher, buckets: HashMap::new(), kept: Vec::new(), stats: CorpusStats::default() })
    }

    /// Processes one batch; returns the survivors in input order.
    pub fn process(&mut self, batch: Vec<Document>) -> Vec<Document> {
        let sigs: Vec<Option<MinHashSignature>> =
            batch.par_iter().map(|d| self.hasher.signature(&d.text)).collect();
        let mut out = Vec::with_capacity(batch.len());
        for (doc, sig) in batch.into_iter().zip(sigs) {
            match sig {
                None => {
                    self.stats.too_short += 1;
                    self.stats.count_survivor(&doc);
                    out.push(doc);
                }
                Some(sig) => {
                    if self.is_duplicate(&sig) {
                        self.stats.dropped_dupes += 1;
                    } else {
                        self.insert(sig);
                        self.stats.count_survivor(&doc);
                        out.push(doc);
                    }
                }
            }
        }
        out
    }

    fn band_keys<'a>(&self, sig: &'a MinHashSignature) -> impl Iterator<Item = (usize, u64)> + 'a {
        let rows = self.config.rows;
        sig.values.chunks(rows).enumerate().map(|(band, chunk)| {
            let mut bytes = Vec::with_capacity(chunk.len() * 8);
            for v in chunk {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            (band, fnv1a(&bytes))
        })
    }

    fn is_duplicate(&self, sig: &MinHashSignature) -> bool {
        let mut seen = HashSet::new();
        for key in self.band_keys(sig) {
            if let Some(ids) = self.buckets.get(&key) {
                for &idx in ids {
                    if seen.insert(idx) && self.kept[idx].agreement(sig) >= self.config.threshold {
                        return true;
                    }
                }
            }
        }
        false
    }

    fn insert(&mut self, sig: MinHashSignature) {
        let idx = self.kept.len();
        let keys: Vec<_> = self.band_keys(&sig).collect();
        for key in keys {
            self.buckets.entry(key).or_default().push(idx);
        }
        self.kept.push(sig);
    }

    pub fn stats(&self) -> CorpusStats {
        self.stats
    }
}

pub fn dedup_corpus(
    docs: impl IntoIterator<Item = Document>,
    config: DedupConfig,
) -> Result<(Vec<Document>, CorpusStats)> {
    let mut deduper = Deduper::new(config)?;
    let out = deduper.process(docs.into_iter().collect());
    Ok((out, deduper.stats()))
}

/// Normalizes and script-filters a batch, dropping documents left empty.
pub fn clean_documents(docs: impl IntoIterator<Item = Document>) -> (Vec<Document>, CorpusStats) {
    let mut stats = CorpusStats::default();
    let docs: Vec<Document> = docs.into_iter().collect();
    let cleaned: Vec<Document> = docs
        .into_par_iter()
        .map(|mut d| {
            d.text = filter_script(&normalize_text(&d.text));
            d
        })
        .collect();
    let mut out = Vec::with_capacity(cleaned.len());
    for d in cleaned {
        if d.text.is_empty() {
            stats.dropped_filtered += 1;
        } else {
            stats.count_survivor(&d);
            out.push(d);
        }
    }
    (out, stats)
}

/// Parses one JSON-lines document record from raw bytes.
pub fn parse_document_line(line: &[u8], line_no: usize) -> Result<Document> {
    if let Err(e) = std::str::from_utf8(line) {
        return Err(Error::Data {
            line: line_no,
            msg: format!("invalid UTF-8 at byte offset {}", e.valid_up_to()),
        });
    }
    serde_json::from_slice(line).map_err(|e| Error::Data { line: line_no, msg: e.to_string() })
}

/// Reads a JSON-lines corpus; blank lines are skipped, duplicate ids rejected.
pub fn read_documents<R: BufRead>(mut reader: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut ids = HashSet::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let line = trim_line_end(&buf);
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let doc = parse_document_line(line, line_no)?;
        if !ids.insert(doc.id.clone()) {
            return Err(Error::Data { line: line_no, msg: format!("duplicate document id {:?}", doc.id) });
        }
        docs.push(doc);
    }
    Ok(docs)
}

fn trim_line_end(buf: &[u8]) -> &[u8] {
    let mut end = buf.len();
    while end > 0 && (buf[end - 1] == b'\n' || buf[end - 1] == b'\r') {
        end -= 1;
    }
    &buf[..end]
}

pub fn write_documents<W: Write>(mut writer: W, docs: &[Document]) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut writer, d)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("a  b\t c"), "a b c");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("x\n\n\ny"), "x\ny");
        assert_eq!(normalize_text("  lead and trail \n"), "lead and trail");
        assert_eq!(normalize_text("a \n b"), "a\nb");
        assert_eq!(normalize_text("cr\r\nlf"), "cr\nlf");
    }

    #[test]
    fn normalize_composes_to_nfc() {
        // и + combining breve -> й
        assert_eq!(normalize_text("и\u{306}"), "й");
    }

    #[test]
    fn invalid_utf8_reports_offset() {
        let err = normalize_bytes(b"abc\xffdef").unwrap_err();
        assert!(matches!(err, Error::InvalidUtf8 { offset: 3 }));
    }

    #[test]
    fn filter_examples() {
        assert_eq!(filter_script("привет 😀 world"), "привет world");
        assert_eq!(filter_script("abc"), "abc");
        assert_eq!(filter_script("你好 test"), "test");
        assert_eq!(filter_script("цена: 5 €, «ок»!"), "цена: 5 €, «ок»!");
    }

    #[test]
    fn cjk_block_is_dropped_entirely() {
        // CJK Unified Ideographs, U+4E00..U+9FFF.
        for cp in (0x4E00u32..=0x9FFF).step_by(97) {
            let c = char::from_u32(cp).unwrap();
            assert!(!is_allowed_char(c), "{cp:#x} should be filtered");
        }
    }

    #[test]
    fn signature_is_deterministic() {
        let a = minhash_signature("the same text again", 64, 5, 7).unwrap().unwrap();
        let b = minhash_signature("the same text again", 64, 5, 7).unwrap().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.len(), 64);
    }

    #[test]
    fn short_text_has_no_signature() {
        assert!(minhash_signature("abcd", 32, 5, 0).unwrap().is_none());
        assert!(minhash_signature("abcde", 32, 5, 0).unwrap().is_some());
    }

    #[test]
    fn hasher_rejects_bad_config() {
        assert!(MinHasher::new(8, 5, 0).is_err());
        assert!(MinHasher::new(32, 0, 0).is_err());
    }

    #[test]
    fn disjoint_texts_rarely_agree() {
        let h = MinHasher::new(128, 5, 1).unwrap();
        let a = h.signature("aaaaaaaaaaaaaaaaaaaaaaabbbbbbbbbbb").unwrap();
        let b = h.signature("zyxwvutsrqponmlkjihgfedcba").unwrap();
        assert!(a.agreement(&b) < 0.05);
    }

    #[test]
    fn bands_rows_mismatch_is_config_error() {
        let cfg = DedupConfig { bands: 10, ..DedupConfig::default() };
        assert!(matches!(dedup_corpus(vec![], cfg), Err(Error::Config(_))));
    }

    #[test]
    fn exact_duplicate_is_dropped() {
        let text = "Документы были дедуплицированы с помощью MinHash.";
        let docs = vec![Document::new("a", text, "t"), Document::new("b", text, "t")];
        let (out, stats) = dedup_corpus(docs, DedupConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, "a");
        assert_eq!(stats.dropped_dupes, 1);
        assert_eq!(stats.doc_count, 1);
    }

    #[test]
    fn unrelated_documents_survive() {
        let docs = vec![
            Document::new("a", "Съешь же ещё этих мягких французских булок.", ""),
            Document::new("b", "The quick brown fox jumps over the lazy dog.", ""),
        ];
        let (out, stats) = dedup_corpus(docs, DedupConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(stats.dropped_dupes, 0);
    }

    #[test]
    fn too_short_documents_are_kept() {
        let docs = vec![Document::new("a", "abc", ""), Document::new("b", "abc", "")];
        let (out, stats) = dedup_corpus(docs, DedupConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(stats.too_short, 2);
    }

    #[test]
    fn jsonl_reader_rejects_duplicate_ids_and_bad_utf8() {
        let input = b"{\"id\":\"1\",\"text\":\"a\",\"source\":\"s\"}\n{\"id\":\"1\",\"text\":\"b\",\"source\":\"s\"}\n";
        assert!(matches!(read_documents(&input[..]), Err(Error::Data { line: 2, .. })));
        let bad = b"{\"id\":\"1\",\"text\":\"\xff\"}\n";
        assert!(matches!(read_documents(&bad[..]), Err(Error::Data { line: 1, .. })));
    }

    #[test]
    fn jsonl_round_trip() {
        let docs = vec![Document::new("x", "текст\nс переводом", "wiki"), Document::new("y", "b", "")];
        let mut buf = Vec::new();
        write_documents(&mut buf, &docs).unwrap();
        assert_eq!(read_documents(&buf[..]).unwrap(), docs);
    }

    #[test]
    fn clean_drops_emptied_documents() {
        let docs = vec![Document::new("a", "😀😀", ""), Document::new("b", " ok  ok ", "")];
        let (out, stats) = clean_documents(docs);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "ok ok");
        assert_eq!(stats.dropped_filtered, 1);
        assert_eq!(stats.word_count, 2);
    }
}
