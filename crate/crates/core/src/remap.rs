//! Embedding and LM-head surgery for a vocabulary swap.
//!
//! Each new token is tokenized with the old vocabulary and its row becomes
//! the mean of the old rows it decomposes into. Means are accumulated in
//! `f64` in ascending decomposition order and stored as `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, BYTE_BASE, MARKER, MARKER_STR, NUM_RESERVED};

const MAGIC: &[u8; 4] = b"EMB1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixRole {
    Embedding,
    LmHead,
}

impl MatrixRole {
    fn code(self) -> u8 {
        match self {
            MatrixRole::Embedding => 0,
            MatrixRole::LmHead => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MatrixRole::Embedding),
            1 => Some(MatrixRole::LmHead),
            _ => None,
        }
    }
}

/// Dense `vocab_size × dim` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub role: MatrixRole,
    vocab_size: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn zeros(role: MatrixRole, vocab_size: usize, dim: usize) -> Self {
        Self { role, vocab_size, dim, data: vec![0.0; vocab_size * dim] }
    }

    pub fn from_vec(role: MatrixRole, vocab_size: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != vocab_size * dim {
            return Err(Error::MatrixFormat(format!(
                "{} values for a {vocab_size}x{dim} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i / dim.max(1), col: i % dim.max(1) });
        }
        Ok(Self { role, vocab_size, dim, data })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn with_role(mut self, role: MatrixRole) -> Self {
        self.role = role;
        self
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.dim == other.dim
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.vocab_size as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[self.role.code()])?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::MatrixFormat(format!("header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::MatrixFormat("bad magic, expected EMB1".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::MatrixFormat(format!("unsupported version {version}")));
        }
        let vocab_size = u32_at(8) as usize;
        let dim = u32_at(12) as usize;
        let role = MatrixRole::from_code(bytes[16])
            .ok_or_else(|| Error::MatrixFormat(format!("unknown role byte {}", bytes[16])))?;
        let payload = &bytes[HEADER_LEN..];
        let expected = (vocab_size as u64) * (dim as u64) * 4;
        if payload.len() as u64 != expected {
            return Err(Error::MatrixFormat(format!(
                "header declares {vocab_size}x{dim} ({expected} payload bytes), found {}",
                payload.len()
            )));
        }
        let data: Vec<f32> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Self::from_vec(role, vocab_size, dim, data)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemapKind {
    /// Surface exists verbatim in the old vocabulary (or a reserved piece).
    ExactCopy,
    /// Plain old-tokenizer decomposition.
    Averaged,
    /// Word-internal piece whose marked first token was swapped for its
    /// unmarked twin (or whose lone marker token was dropped).
    MarkerAdjusted,
    /// Word-internal piece that had to keep a word-initial first token.
    FallbackOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapEntry {
    pub old_ids: Vec<u32>,
    pub kind: RemapKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapPlan {
    pub entries: Vec<RemapEntry>,
    pub old_vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemapReport {
    pub exact_copy_count: usize,
    pub averaged_count: usize,
    pub marker_adjusted_count: usize,
    pub fallback_only_count: usize,
    pub mean_k: f64,
}

impl RemapPlan {
    pub fn report(&self) -> RemapReport {
        let count = |k: RemapKind| self.entries.iter().filter(|e| e.kind == k).count();
        let total_k: usize = self.entries.iter().map(|e| e.old_ids.len()).sum();
        RemapReport {
            exact_copy_count: count(RemapKind::ExactCopy),
            averaged_count: count(RemapKind::Averaged),
            marker_adjusted_count: count(RemapKind::MarkerAdjusted),
            fallback_only_count: count(RemapKind::FallbackOnly),
            mean_k: if self.entries.is_empty() { 0.0 } else { total_k as f64 / self.entries.len() as f64 },
        }
    }

    fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.old_ids.is_empty() {
                return Err(Error::Internal(format!("empty decomposition for new id {i}")));
            }
            if let Some(&bad) = e.old_ids.iter().find(|&&id| id as usize >= self.old_vocab_size) {
                return Err(Error::Internal(format!("new id {i} maps to old id {bad} outside the old vocabulary")));
            }
        }
        Ok(())
    }
}

/// Decomposes every new piece into old ids.
///
/// Reserved pieces map positionally. A marked piece is tokenized as-is. A
/// marker-less piece is tokenized as the old tokenizer would see a word
/// (with the implicit leading marker); then the leading marker is removed
/// again: a lone marker token or marker byte run is dropped, and a marked
/// first piece is replaced by its unmarked twin when the old vocabulary has
/// one. If it has none the marked piece is kept and the entry is flagged.
pub fn plan_remap(old_vocab: &Vocabulary, new_vocab: &Vocabulary) -> Result<(RemapPlan, RemapReport)> {
    let entries: Vec<RemapEntry> = new_vocab
        .pieces()
        .par_iter()
        .map(|p| plan_piece(old_vocab, p.id, &p.surface))
        .collect();
    let plan = RemapPlan { entries, old_vocab_size: old_vocab.len() };
    plan.validate()?;
    let report = plan.report();
    Ok((plan, report))
}

fn plan_piece(old: &Vocabulary, new_id: u32, surface: &str) -> RemapEntry {
    if (new_id as usize) < NUM_RESERVED {
        return RemapEntry { old_ids: vec![new_id], kind: RemapKind::ExactCopy };
    }
    if let Some(id) = old.learned_id(surface) {
        return RemapEntry { old_ids: vec![id], kind: RemapKind::ExactCopy };
    }
    if surface.starts_with(MARKER) {
        let ids = old.encode_pretokenized(surface).ids;
        return RemapEntry { old_ids: ids, kind: RemapKind::Averaged };
    }

    let mut ids = old.encode_pretokenized(&format!("{MARKER_STR}{surface}")).ids;
    let marker_bytes: Vec<u32> = MARKER_STR.bytes().map(Vocabulary::byte_id).collect();
    let first = old.piece(ids[0]).map(|p| p.surface.as_str()).unwrap_or("");
    if first == MARKER_STR && ids.len() > 1 {
        ids.remove(0);
        return RemapEntry { old_ids: ids, kind: RemapKind::MarkerAdjusted };
    }
    if ids.len() > marker_bytes.len() && ids.starts_with(&marker_bytes) {
        ids.drain(..marker_bytes.len());
        return RemapEntry { old_ids: ids, kind: RemapKind::MarkerAdjusted };
    }
    match first.strip_prefix(MARKER) {
        Some(stripped) if !stripped.is_empty() => match old.learned_id(stripped) {
            Some(twin) => {
                ids[0] = twin;
                RemapEntry { old_ids: ids, kind: RemapKind::MarkerAdjusted }
            }
            None => RemapEntry { old_ids: ids, kind: RemapKind::FallbackOnly },
        },
        _ => RemapEntry { old_ids: ids, kind: RemapKind::Averaged },
    }
}

/// `row(i) = (1/K) Σ_j old_row(t_j)`. Exact copies are bit-identical to
/// their source row.
pub fn remap_matrix(old: &EmbeddingMatrix, plan: &RemapPlan) -> Result<EmbeddingMatrix> {
    plan.validate()?;
    if plan.old_vocab_size > old.vocab_size() {
        return Err(Error::Config(format!(
            "old matrix has {} rows, plan expects {}",
            old.vocab_size(),
            plan.old_vocab_size
        )));
    }
    let dim = old.dim();
    for e in &plan.entries {
        for &id in &e.old_ids {
            if old.row(id as usize).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteSource { id });
            }
        }
    }
    let rows: Vec<Vec<f32>> = plan
        .entries
        .par_iter()
        .map(|e| {
            if e.old_ids.len() == 1 {
                return old.row(e.old_ids[0] as usize).to_vec();
            }
            let mut acc = vec![0.0f64; dim];
            for &id in &e.old_ids {
                for (a, &v) in acc.iter_mut().zip(old.row(id as usize)) {
                    *a += v as f64;
                }
            }
            let k = e.old_ids.len() as f64;
            acc.into_iter().map(|a| (a / k) as f32).collect()
        })
        .collect();
    let data = rows.into_iter().flatten().collect();
    EmbeddingMatrix::from_vec(old.role, plan.entries.len(), dim, data)
}

pub fn remap_embeddings(old: &EmbeddingMatrix, plan: &RemapPlan) -> Result<EmbeddingMatrix> {
    Ok(remap_matrix(old, plan)?.with_role(MatrixRole::Embedding))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    /// Duplicate the new embedding matrix.
    Copy,
    /// Average old LM-head rows, like the embeddings.
    Hm,
}

impl std::str::FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(HeadVariant::Copy),
            "hm" => Ok(HeadVariant::Hm),
            other => Err(Error::Config(format!("unknown head variant {other:?} (expected copy or hm)"))),
        }
    }
}

pub fn init_lm_head(
    new_embeddings: Option<&EmbeddingMatrix>,
    old_head: Option<&EmbeddingMatrix>,
    plan: Option<&RemapPlan>,
    variant: HeadVariant,
) -> Result<EmbeddingMatrix> {
    match variant {
        HeadVariant::Copy => {
            let emb = new_embeddings
                .ok_or_else(|| Error::Config("head variant `copy` needs the new embedding matrix".into()))?;
            Ok(emb.clone().with_role(MatrixRole::LmHead))
        }
        HeadVariant::Hm => {
            let (head, plan) = old_head
                .zip(plan)
                .ok_or_else(|| Error::Config("head variant `hm` needs the old LM head and a remap plan".into()))?;
            Ok(remap_matrix(head, plan)?.with_role(MatrixRole::LmHead))
        }
    }
}

/// Ids of the byte pieces, handy for fixtures.
pub fn byte_ids() -> std::ops::Range<u32> {
    BYTE_BASE..BYTE_BASE + 256
}
