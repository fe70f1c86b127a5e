//! Vocabulary model shared by the BPE and Unigram tokenizers.
//!
//! Id layout is fixed: `0..3` are `<unk>`, `<s>`, `</s>`; `3..259` are the
//! byte-fallback pieces `<0x00>`..`<0xFF>`; learned pieces follow. Byte
//! fallback is always available, so encoding never fails.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{bpe, unigram};

/// Word-boundary marker, U+2581.
pub const MARKER: char = '\u{2581}';
pub const MARKER_STR: &str = "\u{2581}";

pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const SPECIAL_SURFACES: [&str; 3] = ["<unk>", "<s>", "</s>"];
pub const BYTE_BASE: u32 = 3;
/// Specials plus the 256 byte pieces.
pub const NUM_RESERVED: usize = 3 + 256;

const MAGIC: &str = "VOCAB";
const VERSION: &str = "v1";

pub fn byte_surface(b: u8) -> String {
    format!("<0x{b:02X}>")
}

pub fn is_reserved_surface(s: &str) -> bool {
    if SPECIAL_SURFACES.contains(&s) {
        return true;
    }
    s.len() == 6
        && s.starts_with("<0x")
        && s.ends_with('>')
        && s[3..5].chars().all(|c| c.is_ascii_digit() || ('A'..='F').contains(&c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Bpe,
    Unigram,
}

impl fmt::Display for VocabKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabKind::Bpe => "bpe",
            VocabKind::Unigram => "unigram",
        })
    }
}

impl FromStr for VocabKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpe" => Ok(VocabKind::Bpe),
            "unigram" => Ok(VocabKind::Unigram),
            other => Err(Error::Config(format!("unknown vocabulary kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Piece {
    pub surface: String,
    /// Log-probability for Unigram, negative rank for BPE, 0 for reserved pieces.
    pub score: f64,
    pub id: u32,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.surface == other.surface && self.id == other.id && self.score.to_bits() == other.score.to_bits()
    }
}

/// BPE merge rules; rank is the list position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    pub merges: Vec<(String, String)>,
}

impl MergeTable {
    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }
}

/// Token ids plus per-token `(start, end)` character spans into the
/// pretokenized (marker-bearing) text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    /// Number of U+FFFD substitutions made for invalid byte runs or `<unk>`.
    pub replacements: usize,
}

/// One unit of a word segmentation before conversion to ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Segment {
    Piece { id: u32, chars: usize },
    Fallback(char),
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    kind: VocabKind,
    pieces: Vec<Piece>,
    merges: MergeTable,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
    min_score: f64,
    merge_ranks: HashMap<(u32, u32), (u32, u32)>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.pieces == other.pieces && self.merges == other.merges
    }
}

impl Vocabulary {
    /// Builds a vocabulary from learned pieces; reserved pieces are prepended.
    pub fn new(kind: VocabKind, learned: Vec<(String, f64)>, merges: MergeTable) -> Result<Self> {
        let mut pieces = Vec::with_capacity(NUM_RESERVED + learned.len());
        for s in SPECIAL_SURFACES {
            pieces.push((s.to_string(), 0.0));
        }
        for b in 0..=255u8 {
            pieces.push((byte_surface(b), 0.0));
        }
        for (surface, score) in learned {
            if is_reserved_surface(&surface) {
                return Err(Error::InvalidVocab(format!("learned piece {surface:?} collides with a reserved piece")));
            }
            pieces.push((surface, score));
        }
        Self::from_full(kind, pieces, merges)
    }

    /// Vocabulary with nothing but specials and byte fallback.
    pub fn byte_fallback_only(kind: VocabKind) -> Self {
        Self::new(kind, Vec::new(), MergeTable::default()).expect("reserved layout is valid")
    }

    fn from_full(kind: VocabKind, raw: Vec<(String, f64)>, merges: MergeTable) -> Result<Self> {
        if raw.len() < NUM_RESERVED {
            return Err(Error::InvalidVocab(format!("{} pieces, reserved layout needs {NUM_RESERVED}", raw.len())));
        }
        let mut index = HashMap::with_capacity(raw.len());
        let mut pieces = Vec::with_capacity(raw.len());
        let mut max_piece_chars = 1;
        let mut min_score = 0.0f64;
        for (i, (surface, score)) in raw.into_iter().enumerate() {
            let expected = expected_reserved(i);
            match &expected {
                Some(exp) if *exp != surface => {
                    return Err(Error::InvalidVocab(format!("id {i} must be {exp:?}, found {surface:?}")));
                }
                None if is_reserved_surface(&surface) => {
                    return Err(Error::InvalidVocab(format!("reserved surface {surface:?} at learned id {i}")));
                }
                _ => {}
            }
            if surface.is_empty() {
                return Err(Error::InvalidVocab(format!("empty surface at id {i}")));
            }
            if !score.is_finite() {
                return Err(Error::InvalidVocab(format!("non-finite score at id {i}")));
            }
            if kind == VocabKind::Unigram && score > 0.0 {
                return Err(Error::InvalidVocab(format!("unigram score {score} > 0 at id {i}")));
            }
            if index.insert(surface.clone(), i as u32).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate surface {surface:?}")));
            }
            if expected.is_none() {
                max_piece_chars = max_piece_chars.max(surface.chars().count());
                min_score = min_score.min(score);
            }
            pieces.push(Piece { surface, score, id: i as u32 });
        }
        if kind == VocabKind::Unigram && !merges.is_empty() {
            return Err(Error::InvalidVocab("unigram vocabulary cannot carry merges".into()));
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.merges.iter().enumerate() {
            let lookup = |s: &str| index.get(s).copied().filter(|&id| id as usize >= NUM_RESERVED);
            let (Some(l), Some(r)) = (lookup(left), lookup(right)) else {
                return Err(Error::InvalidVocab(format!("merge {rank} ({left:?}, {right:?}) references unknown piece")));
            };
            let Some(m) = lookup(&format!("{left}{right}")) else {
                return Err(Error::InvalidVocab(format!("merge {rank} result {left}{right:?} not in vocabulary")));
            };
            if merge_ranks.insert((l, r), (rank as u32, m)).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate merge ({left:?}, {right:?})")));
            }
        }
        Ok(Self { kind, pieces, merges, index, max_piece_chars, min_score, merge_ranks })
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    /// Pieces after the reserved block.
    pub fn learned(&self) -> &[Piece] {
        &self.pieces[NUM_RESERVED..]
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn piece(&self, id: u32) -> Option<&Piece> {
        self.pieces.get(id as usize)
    }

    /// Id of any piece, reserved ones included.
    pub fn id_of(&self, surface: &str) -> Option<u32> {
        self.index.get(surface).copied()
    }

    /// Id of a learned piece; reserved surfaces never match text.
    pub fn learned_id(&self, surface: &str) -> Option<u32> {
        self.id_of(surface).filter(|&id| id as usize >= NUM_RESERVED)
    }

    pub fn byte_id(b: u8) -> u32 {
        BYTE_BASE + b as u32
    }

    pub fn byte_value(id: u32) -> Option<u8> {
        (BYTE_BASE..BYTE_BASE + 256).contains(&id).then(|| (id - BYTE_BASE) as u8)
    }

    pub fn max_piece_chars(&self) -> usize {
        self.max_piece_chars
    }

    /// Lowest learned score (0 when nothing is learned).
    pub fn min_score(&self) -> f64 {
        self.min_score
    }

    pub(crate) fn merge_rank(&self, left: u32, right: u32) -> Option<(u32, u32)> {
        self.merge_ranks.get(&(left, right)).copied()
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        self.encode_pretokenized(&pretokenize(text))
    }

    /// Encodes text that already carries boundary markers.
    pub fn encode_pretokenized(&self, marked: &str) -> TokenSequence {
        let mut seq = TokenSequence::default();
        let mut pos = 0;
        for word in split_words(marked) {
            for seg in self.segment_word(word) {
                match seg {
                    Segment::Piece { id, chars } => {
                        seq.ids.push(id);
                        seq.offsets.push((pos, pos + chars));
                        pos += chars;
                    }
                    Segment::Fallback(c) => {
                        let mut buf = [0u8; 4];
                        for (j, b) in c.encode_utf8(&mut buf).bytes().enumerate() {
                            seq.ids.push(Self::byte_id(b));
                            seq.offsets.push(if j == 0 { (pos, pos + 1) } else { (pos + 1, pos + 1) });
                        }
                        pos += 1;
                    }
                }
            }
        }
        seq
    }

    pub(crate) fn segment_word(&self, word: &str) -> Vec<Segment> {
        match self.kind {
            VocabKind::Bpe => bpe::segment_word(self, word),
            VocabKind::Unigram => unigram::segment_word(self, word),
        }
    }

    /// Decodes ids back to text: markers become spaces and the leading
    /// marker added by [`pretokenize`] is dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<Decoded> {
        let marked = self.decode_marked(ids)?;
        let spaced: String = marked.text.chars().map(|c| if c == MARKER { ' ' } else { c }).collect();
        let text = spaced.strip_prefix(' ').map(str::to_string).unwrap_or(spaced);
        Ok(Decoded { text, replacements: marked.replacements })
    }

    /// Decodes to the marker-bearing form without touching markers.
    pub fn decode_marked(&self, ids: &[u32]) -> Result<Decoded> {
        let mut out = String::new();
        let mut bytes = Vec::new();
        let mut replacements = 0;
        let flush = |bytes: &mut Vec<u8>, out: &mut String, replacements: &mut usize| {
            if bytes.is_empty() {
                return;
            }
            match std::str::from_utf8(bytes) {
                Ok(s) => out.push_str(s),
                Err(_) => {
                    let lossy = String::from_utf8_lossy(bytes);
                    *replacements += lossy.chars().filter(|&c| c == '\u{FFFD}').count();
                    out.push_str(&lossy);
                }
            }
            bytes.clear();
        };
        for (position, &id) in ids.iter().enumerate() {
            if id as usize >= self.pieces.len() {
                return Err(Error::IdOutOfRange { position, id, size: self.pieces.len() });
            }
            if let Some(b) = Self::byte_value(id) {
                bytes.push(b);
                continue;
            }
            flush(&mut bytes, &mut out, &mut replacements);
            match id {
                UNK_ID => {
                    out.push('\u{FFFD}');
                    replacements += 1;
                }
                BOS_ID | EOS_ID => {}
                _ => out.push_str(&self.pieces[id as usize].surface),
            }
        }
        flush(&mut bytes, &mut out, &mut replacements);
        Ok(Decoded { text: out, replacements })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC} {VERSION} kind={} size={}", self.kind, self.pieces.len())?;
        for p in &self.pieces {
            writeln!(w, "{}\t{}\t{}", p.id, escape(&p.surface), p.score)?;
        }
        if self.kind == VocabKind::Bpe {
            writeln!(w, "MERGES {}", self.merges.len())?;
            for (l, r) in &self.merges.merges {
                writeln!(w, "{}\t{}", escape(l), escape(r))?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(data).map_err(|e| {
            let line = data[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
            Error::VocabParse { line, msg: "invalid UTF-8".into() }
        })?;
        parse_vocab(text)
    }
}

fn expected_reserved(id: usize) -> Option<String> {
    match id {
        0..=2 => Some(SPECIAL_SURFACES[id].to_string()),
        3..=258 => Some(byte_surface((id - 3) as u8)),
        _ => None,
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::VocabParse { line, msg: msg.into() }
}

fn parse_vocab(text: &str) -> Result<Vocabulary> {
    let Some(body) = text.strip_suffix('\n') else {
        let line = text.split('\n').count();
        return Err(parse_err(line, "truncated: missing final newline"));
    };
    let lines: Vec<&str> = body.split('\n').collect();
    let header = lines[0];
    let mut fields = header.split(' ');
    if fields.next() != Some(MAGIC) {
        return Err(parse_err(1, "bad magic, expected VOCAB"));
    }
    match fields.next() {
        Some(VERSION) => {}
        other => return Err(parse_err(1, format!("unsupported version {other:?}"))),
    }
    let kind: VocabKind = fields
        .next()
        .and_then(|f| f.strip_prefix("kind="))
        .ok_or_else(|| parse_err(1, "missing kind="))?
        .parse()
        .map_err(|_| parse_err(1, "unknown kind"))?;
    let size: usize = fields
        .next()
        .and_then(|f| f.strip_prefix("size="))
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| parse_err(1, "missing or malformed size="))?;
    if fields.next().is_some() {
        return Err(parse_err(1, "trailing header fields"));
    }
    if size < NUM_RESERVED {
        return Err(parse_err(1, format!("size {size} smaller than reserved block {NUM_RESERVED}")));
    }

    let mut raw = Vec::with_capacity(size);
    let mut seen: HashMap<String, usize> = HashMap::with_capacity(size);
    for i in 0..size {
        let line_no = i + 2;
        let line = *lines.get(i + 1).ok_or_else(|| parse_err(line_no, format!("truncated: expected {size} pieces")))?;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(line_no, format!("expected 3 tab-separated fields, found {}", cols.len())));
        }
        if cols[0].parse::<usize>().ok() != Some(i) {
            return Err(parse_err(line_no, format!("expected id {i}, found {:?}", cols[0])));
        }
        let surface = unescape(cols[1]).map_err(|m| parse_err(line_no, m))?;
        let score: f64 = cols[2].parse().map_err(|_| parse_err(line_no, format!("malformed score {:?}", cols[2])))?;
        if !score.is_finite() {
            return Err(parse_err(line_no, "non-finite score"));
        }
        if let Some(first) = seen.insert(surface.clone(), line_no) {
            return Err(parse_err(line_no, format!("duplicate surface {surface:?} (first on line {first})")));
        }
        if let Some(exp) = expected_reserved(i) {
            if exp != surface {
                return Err(parse_err(line_no, format!("id {i} must be {exp:?}")));
            }
        }
        raw.push((surface, score));
    }

    let mut rest = lines[size + 1..].iter().enumerate().map(|(j, l)| (size + 2 + j, *l));
    let mut merges = MergeTable::default();
    if kind == VocabKind::Bpe {
        let (line_no, line) = rest.next().ok_or_else(|| parse_err(size + 2, "truncated: missing MERGES section"))?;
        let count: usize = line
            .strip_prefix("MERGES ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| parse_err(line_no, "expected `MERGES <count>`"))?;
        for k in 0..count {
            let (line_no, line) =
                rest.next().ok_or_else(|| parse_err(size + 3 + k, format!("truncated: expected {count} merges")))?;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 {
                return Err(parse_err(line_no, "merge lines need exactly 2 fields"));
            }
            let l = unescape(cols[0]).map_err(|m| parse_err(line_no, m))?;
            let r = unescape(cols[1]).map_err(|m| parse_err(line_no, m))?;
            merges.merges.push((l, r));
        }
    }
    if let Some((line_no, _)) = rest.next() {
        return Err(parse_err(line_no, "unexpected trailing content"));
    }
    Vocabulary::from_full(kind, raw, merges).map_err(|e| match e {
        Error::InvalidVocab(msg) => parse_err(0, msg),
        other => other,
    })
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some(other) => return Err(format!("unknown escape \\{other}")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

/// Replaces each space with the boundary marker and prefixes the first word
/// with one, so `"a b"` becomes `"▁a▁b"`.
pub fn pretokenize(text: &str) -> String {
    if text.is_empty() {
        return String::new();
    }
    let mut out = String::with_capacity(text.len() + 3);
    out.push(MARKER);
    for c in text.chars() {
        out.push(if c == ' ' { MARKER } else { c });
    }
    out
}

/// Splits marked text into words, each starting at a marker (except
/// possibly the first).
pub fn split_words(marked: &str) -> impl Iterator<Item = &str> {
    let mut starts: Vec<usize> = marked.match_indices(MARKER).map(|(i, _)| i).filter(|&i| i > 0).collect();
    starts.insert(0, 0);
    starts.push(marked.len());
    let bounds: Vec<(usize, usize)> = starts.windows(2).map(|w| (w[0], w[1])).filter(|(a, b)| a < b).collect();
    bounds.into_iter().map(move |(a, b)| &marked[a..b])
}
