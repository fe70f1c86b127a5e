//! A tiny causal LM with a frozen body: `h = tanh(B · mean(E[ctx]))`,
//! `logits = H · h`. Only `E` (embeddings) and `H` (LM head) are trained.
//!
//! Parameters are stored as `f32`; every forward and backward pass runs in
//! `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::remap::{init_lm_head, plan_remap, remap_embeddings, EmbeddingMatrix, HeadVariant, MatrixRole, RemapReport};
use crate::vocab::{Vocabulary, BOS_ID, EOS_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBodyLM {
    pub embeddings: EmbeddingMatrix,
    pub head: EmbeddingMatrix,
    body: Vec<f32>,
    context_k: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    dim: usize,
    vocab_size: usize,
    context_k: usize,
    body: Vec<f32>,
}

fn normal_vec(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    if std == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("bad init std {std}: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng) as f32).collect())
}

/// A `dim × dim` body with entries `N(0, 1/dim)`.
pub fn random_body(dim: usize, seed: u64) -> Result<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0D1_B0D1);
    normal_vec(dim * dim, 1.0 / (dim as f64).sqrt(), &mut rng)
}

impl FrozenBodyLM {
    pub fn new(embeddings: EmbeddingMatrix, head: EmbeddingMatrix, body: Vec<f32>, context_k: usize) -> Result<Self> {
        let dim = embeddings.dim();
        if dim == 0 || embeddings.vocab_size() == 0 {
            return Err(Error::Config("embedding matrix is empty".into()));
        }
        if head.dim() != dim || head.vocab_size() != embeddings.vocab_size() {
            return Err(Error::Config(format!(
                "head is {}x{}, embeddings are {}x{dim}",
                head.vocab_size(),
                head.dim(),
                embeddings.vocab_size()
            )));
        }
        if body.len() != dim * dim {
            return Err(Error::Config(format!("body has {} entries, expected {dim}x{dim}", body.len())));
        }
        if let Some(i) = body.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i / dim, col: i % dim });
        }
        if context_k == 0 {
            return Err(Error::Config("context_k must be positive".into()));
        }
        Ok(Self {
            embeddings: embeddings.with_role(MatrixRole::Embedding),
            head: head.with_role(MatrixRole::LmHead),
            body,
            context_k,
        })
    }

    /// Random body plus `N(0, std²)` embeddings and head.
    pub fn random(vocab_size: usize, dim: usize, context_k: usize, std: f64, seed: u64) -> Result<Self> {
        Self::random_layers(random_body(dim, seed)?, vocab_size, context_k, std, seed)
    }

    /// Fresh `N(0, std²)` embeddings and head around an existing body.
    pub fn random_layers(body: Vec<f32>, vocab_size: usize, context_k: usize, std: f64, seed: u64) -> Result<Self> {
        let dim = (body.len() as f64).sqrt() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = EmbeddingMatrix::from_vec(MatrixRole::Embedding, vocab_size, dim, normal_vec(vocab_size * dim, std, &mut rng)?)?;
        let head = EmbeddingMatrix::from_vec(MatrixRole::LmHead, vocab_size, dim, normal_vec(vocab_size * dim, std, &mut rng)?)?;
        Self::new(emb, head, body, context_k)
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.vocab_size()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn context_k(&self) -> usize {
        self.context_k
    }

    pub fn body(&self) -> &[f32] {
        &self.body
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let size = self.vocab_size();
        match ids.iter().position(|&id| id as usize >= size) {
            Some(position) => Err(Error::IdOutOfRange { position, id: ids[position], size }),
            None => Ok(()),
        }
    }

    fn pooled(&self, context: &[u32]) -> Vec<f64> {
        let dim = self.dim();
        let mut u = vec![0.0f64; dim];
        for &id in context {
            for (a, &v) in u.iter_mut().zip(self.embeddings.row(id as usize)) {
                *a += v as f64;
            }
        }
        let k = context.len() as f64;
        u.iter_mut().for_each(|a| *a /= k);
        u
    }

    fn hidden(&self, u: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        (0..dim)
            .map(|i| {
                let row = &self.body[i * dim..(i + 1) * dim];
                row.iter().zip(u).map(|(&b, &x)| b as f64 * x).sum::<f64>().tanh()
            })
            .collect()
    }

    fn logits_of(&self, h: &[f64]) -> Vec<f64> {
        (0..self.vocab_size())
            .map(|v| self.head.row(v).iter().zip(h).map(|(&w, &x)| w as f64 * x).sum())
            .collect()
    }

    pub fn forward(&self, context: &[u32]) -> Result<Vec<f64>> {
        if context.len() != self.context_k {
            return Err(Error::Config(format!(
                "context has {} ids, model expects {}",
                context.len(),
                self.context_k
            )));
        }
        self.check_ids(context)?;
        Ok(self.logits_of(&self.hidden(&self.pooled(context))))
    }

    /// Cross-entropy of one example; adds `scale × ∂loss` into the gradient
    /// buffers when given.
    fn example(&self, context: &[u32], target: u32, grad: Option<(&mut [f64], &mut [f64], f64)>) -> f64 {
        let dim = self.dim();
        let u = self.pooled(context);
        let h = self.hidden(&u);
        let logits = self.logits_of(&h);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - logits[target as usize];
        if let Some((g_emb, g_head, scale)) = grad {
            let mut dh = vec![0.0f64; dim];
            for (v, &l) in logits.iter().enumerate() {
                let mut g = (l - lse).exp();
                if v == target as usize {
                    g -= 1.0;
                }
                let g = g * scale;
                let head_row = self.head.row(v);
                let g_row = &mut g_head[v * dim..(v + 1) * dim];
                for j in 0..dim {
                    g_row[j] += g * h[j];
                    dh[j] += g * head_row[j] as f64;
                }
            }
            let dz: Vec<f64> = dh.iter().zip(&h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
            let mut du = vec![0.0f64; dim];
            for (i, &dzi) in dz.iter().enumerate() {
                let row = &self.body[i * dim..(i + 1) * dim];
                for j in 0..dim {
                    du[j] += row[j] as f64 * dzi;
                }
            }
            let k = context.len() as f64;
            for &id in context {
                let g_row = &mut g_emb[id as usize * dim..(id as usize + 1) * dim];
                for j in 0..dim {
                    g_row[j] += du[j] / k;
                }
            }
        }
        loss
    }

    /// Mean cross-entropy over `(context, target)` pairs.
    pub fn loss(&self, examples: &[(Vec<u32>, u32)]) -> Result<f64> {
        self.loss_and_gradient_inner(examples, false).map(|(l, _)| l)
    }

    pub fn loss_and_gradient(&self, examples: &[(Vec<u32>, u32)]) -> Result<(f64, Gradient)> {
        self.loss_and_gradient_inner(examples, true).map(|(l, g)| (l, g.expect("gradient requested")))
    }

    fn loss_and_gradient_inner(&self, examples: &[(Vec<u32>, u32)], with_grad: bool) -> Result<(f64, Option<Gradient>)> {
        if examples.is_empty() {
            return Err(Error::Config("no examples".into()));
        }
        for (ctx, target) in examples {
            if ctx.len() != self.context_k {
                return Err(Error::Config(format!("context has {} ids, model expects {}", ctx.len(), self.context_k)));
            }
            self.check_ids(ctx)?;
            self.check_ids(std::slice::from_ref(target))?;
        }
        let n = self.vocab_size() * self.dim();
        let scale = 1.0 / examples.len() as f64;
        let mut grad = with_grad.then(|| Gradient { embeddings: vec![0.0; n], head: vec![0.0; n] });
        let mut total = 0.0;
        for (ctx, target) in examples {
            let g = grad.as_mut().map(|g| (g.embeddings.as_mut_slice(), g.head.as_mut_slice(), scale));
            total += self.example(ctx, *target, g);
        }
        Ok((total * scale, grad))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.embeddings.save(dir.join("embeddings.emb"))?;
        self.head.save(dir.join("head.emb"))?;
        let meta = ModelMeta {
            dim: self.dim(),
            vocab_size: self.vocab_size(),
            context_k: self.context_k,
            body: self.body.clone(),
        };
        fs::write(dir.join("model.json"), serde_json::to_vec(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: ModelMeta = serde_json::from_slice(&fs::read(dir.join("model.json"))?)?;
        let emb = EmbeddingMatrix::load(dir.join("embeddings.emb"))?;
        let head = EmbeddingMatrix::load(dir.join("head.emb"))?;
        if emb.dim() != meta.dim || emb.vocab_size() != meta.vocab_size {
            return Err(Error::Config("model.json disagrees with embeddings.emb".into()));
        }
        Self::new(emb, head, meta.body, meta.context_k)
    }
}

/// Dense gradients, row-major like the parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub embeddings: Vec<f64>,
    pub head: Vec<f64>,
}

/// Next-token examples for one block: position `i` is predicted from the
/// `k` preceding ids of the block, left-padded with `<s>`.
pub fn block_examples(block: &[u32], context_k: usize) -> Vec<(Vec<u32>, u32)> {
    (0..block.len())
        .map(|i| {
            let mut ctx = vec![BOS_ID; context_k.saturating_sub(i)];
            ctx.extend_from_slice(&block[i.saturating_sub(context_k)..i]);
            (ctx, block[i])
        })
        .collect()
}

/// Concatenated token stream, each document terminated by `</s>`.
pub fn encode_corpus<S: AsRef<str> + Sync>(vocab: &Vocabulary, texts: &[S]) -> Vec<u32> {
    let encoded: Vec<Vec<u32>> = texts.par_iter().map(|t| vocab.encode(t.as_ref()).ids).collect();
    let mut out = Vec::with_capacity(encoded.iter().map(|e| e.len() + 1).sum());
    for ids in encoded {
        out.extend(ids);
        out.push(EOS_ID);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Blocks per step.
    pub batch_size: usize,
    pub block_size: usize,
    pub warmup_steps: usize,
    pub max_epochs: f64,
    /// Evaluation interval as a fraction of an epoch.
    pub eval_every: f64,
    pub seed: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            batch_size: 8,
            block_size: 128,
            warmup_steps: 50,
            max_epochs: 3.0,
            eval_every: 0.25,
            seed: 0,
            patience: 3,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.block_size == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, block_size and patience must be positive".into()));
        }
        if !(self.max_epochs.is_finite() && self.max_epochs > 0.0) {
            return Err(Error::Config(format!("max_epochs must be positive, got {}", self.max_epochs)));
        }
        if !(self.eval_every > 0.0 && self.eval_every <= 1.0) {
            return Err(Error::Config(format!("eval_every must be in (0, 1], got {}", self.eval_every)));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    fn rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the evaluation with the lowest validation loss.
    pub model: FrozenBodyLM,
    pub curve: Vec<LossPoint>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub steps: usize,
    pub stopped_early: bool,
}

pub fn write_curve_csv<W: Write>(mut w: W, curve: &[LossPoint]) -> Result<()> {
    writeln!(w, "step,train_loss,val_loss")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.step, p.train_loss, p.val_loss)?;
    }
    Ok(())
}

/// Borrowed token blocks.
pub type Blocks<'a> = Vec<&'a [u32]>;

/// Splits a token stream into training blocks and the held-out tail (last
/// tenth).
pub fn split_corpus(tokens: &[u32], block_size: usize) -> Result<(Blocks<'_>, Blocks<'_>)> {
    if tokens.len() < 10 * block_size {
        return Err(Error::Config(format!(
            "corpus has {} tokens, need at least {} (10 blocks)",
            tokens.len(),
            10 * block_size
        )));
    }
    let cut = tokens.len() - tokens.len() / 10;
    Ok((tokens[..cut].chunks(block_size).collect(), tokens[cut..].chunks(block_size).collect()))
}

/// Mean cross-entropy over every position of the given blocks.
pub fn evaluate(model: &FrozenBodyLM, blocks: &[&[u32]]) -> Result<f64> {
    model.check_ids(&blocks.concat())?;
    let sums: Vec<(f64, usize)> = blocks
        .par_iter()
        .map(|b| {
            let ex = block_examples(b, model.context_k);
            (ex.iter().map(|(c, t)| model.example(c, *t, None)).sum::<f64>(), ex.len())
        })
        .collect();
    let (total, n) = sums.into_iter().fold((0.0, 0usize), |(a, n), (s, m)| (a + s, n + m));
    Ok(total / n as f64)
}

fn batch_step(model: &FrozenBodyLM, batch: &[&[u32]]) -> (f64, Gradient) {
    let n = model.vocab_size() * model.dim();
    let total: usize = batch.iter().map(|b| b.len()).sum();
    let scale = 1.0 / total as f64;
    let parts: Vec<(f64, Gradient)> = batch
        .par_iter()
        .map(|b| {
            let mut g = Gradient { embeddings: vec![0.0; n], head: vec![0.0; n] };
            let mut loss = 0.0;
            for (ctx, t) in block_examples(b, model.context_k) {
                loss += model.example(&ctx, t, Some((&mut g.embeddings, &mut g.head, scale)));
            }
            (loss * scale, g)
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut loss, mut grad) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grad.embeddings.iter_mut().zip(&g.embeddings).for_each(|(a, b)| *a += b);
        grad.head.iter_mut().zip(&g.head).for_each(|(a, b)| *a += b);
    }
    (loss, grad)
}

fn apply(model: &mut FrozenBodyLM, grad: &Gradient, rate: f64) {
    for (p, g) in model.embeddings.as_mut_slice().iter_mut().zip(&grad.embeddings) {
        *p = (*p as f64 - rate * g) as f32;
    }
    for (p, g) in model.head.as_mut_slice().iter_mut().zip(&grad.head) {
        *p = (*p as f64 - rate * g) as f32;
    }
}

/// SGD on embeddings and head with linear warmup and early stopping.
pub fn train(model: &FrozenBodyLM, tokens: &[u32], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    model.check_ids(tokens)?;
    let (train_blocks, val_blocks) = split_corpus(tokens, config.block_size)?;
    let body_before = model.body.clone();

    let steps_per_epoch = train_blocks.len().div_ceil(config.batch_size);
    let mut total_steps = (config.max_epochs * steps_per_epoch as f64).ceil() as usize;
    if let Some(cap) = config.max_steps {
        total_steps = total_steps.min(cap);
    }
    let eval_interval = ((config.eval_every * steps_per_epoch as f64).round() as usize).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = model.clone();
    let initial_val = evaluate(&current, &val_blocks)?;
    let initial_train = evaluate(&current, &train_blocks[..config.batch_size.min(train_blocks.len())])?;
    let mut curve = vec![LossPoint { step: 0, train_loss: initial_train, val_loss: initial_val }];
    let mut best = (initial_val, 0usize, current.clone());
    let mut bad_evals = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = Vec::new();
    let mut window = (0.0, 0usize);
    let mut step = 0;

    while step < total_steps {
        if order.is_empty() {
            order = (0..train_blocks.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let take = config.batch_size.min(order.len());
        let batch: Vec<&[u32]> = order.split_off(order.len() - take).into_iter().rev().map(|i| train_blocks[i]).collect();
        let (loss, grad) = batch_step(&current, &batch);
        if !loss.is_finite() {
            return Err(Error::NanLoss { step });
        }
        apply(&mut current, &grad, config.rate_at(step));
        step += 1;
        window = (window.0 + loss, window.1 + 1);

        if step % eval_interval == 0 || step == total_steps {
            let val = evaluate(&current, &val_blocks)?;
            if !val.is_finite() {
                return Err(Error::NanLoss { step });
            }
            curve.push(LossPoint { step, train_loss: window.0 / window.1 as f64, val_loss: val });
            window = (0.0, 0);
            log::debug!("step {step}: val {val:.5}");
            if val < best.0 {
                best = (val, step, current.clone());
                bad_evals = 0;
            } else {
                bad_evals += 1;
                if bad_evals >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let (best_val, best_step, best_model) = best;
    if best_model.body.iter().zip(&body_before).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Internal("frozen body changed during training".into()));
    }
    Ok(TrainOutcome {
        model: best_model,
        curve,
        initial_val_loss: initial_val,
        best_val_loss: best_val,
        best_step,
        steps: step,
        stopped_early,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitComparison {
    pub remapped_initial: f64,
    pub remapped_final: f64,
    pub random_initial: f64,
    pub random_final: f64,
    pub remap: RemapReport,
    pub remapped_curve: Vec<LossPoint>,
    pub random_curve: Vec<LossPoint>,
}

/// Builds two new-vocabulary models around the old frozen body, one with
/// remapped embeddings and head (averaged old rows) and one with seeded
/// `N(0, random_std²)` layers, and trains both with the same config.
pub fn compare_inits<S: AsRef<str> + Sync>(
    old_model: &FrozenBodyLM,
    old_vocab: &Vocabulary,
    new_vocab: &Vocabulary,
    texts: &[S],
    config: &TrainConfig,
    random_std: f64,
) -> Result<InitComparison> {
    if old_model.vocab_size() != old_vocab.len() {
        return Err(Error::Config(format!(
            "old model has {} rows, old vocabulary has {} pieces",
            old_model.vocab_size(),
            old_vocab.len()
        )));
    }
    let (plan, report) = plan_remap(old_vocab, new_vocab)?;
    let emb = remap_embeddings(&old_model.embeddings, &plan)?;
    let head = init_lm_head(None, Some(&old_model.head), Some(&plan), HeadVariant::Hm)?;
    let remapped = FrozenBodyLM::new(emb, head, old_model.body.clone(), old_model.context_k)?;
    let random =
        FrozenBodyLM::random_layers(old_model.body.clone(), new_vocab.len(), old_model.context_k, random_std, config.seed)?;

    let tokens = encode_corpus(new_vocab, texts);
    let a = train(&remapped, &tokens, config)?;
    let b = train(&random, &tokens, config)?;
    Ok(InitComparison {
        remapped_initial: a.initial_val_loss,
        remapped_final: a.best_val_loss,
        random_initial: b.initial_val_loss,
        random_final: b.best_val_loss,
        remap: report,
        remapped_curve: a.curve,
        random_curve: b.curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_embeddings_give_zero_logits() {
        let mut m = FrozenBodyLM::random(10, 4, 3, 0.5, 1).unwrap();
        m.embeddings.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        assert!(m.forward(&[4, 5, 6]).unwrap().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn forward_rejects_bad_context() {
        let m = FrozenBodyLM::random(10, 4, 3, 0.5, 1).unwrap();
        assert!(m.forward(&[1, 2]).is_err());
        assert!(matches!(m.forward(&[1, 2, 10]), Err(Error::IdOutOfRange { position: 2, id: 10, size: 10 })));
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let mut m = FrozenBodyLM::random(10, 4, 3, 0.5, 1).unwrap();
        m.head.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        let loss = m.loss(&[(vec![1, 2, 3], 4), (vec![5, 6, 7], 8)]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn block_examples_pad_with_bos() {
        let ex = block_examples(&[7, 8, 9], 2);
        assert_eq!(ex, vec![(vec![BOS_ID, BOS_ID], 7), (vec![BOS_ID, 7], 8), (vec![7, 8], 9)]);
    }

    #[test]
    fn short_corpus_is_rejected() {
        let m = FrozenBodyLM::random(10, 4, 3, 0.5, 1).unwrap();
        let cfg = TrainConfig { block_size: 16, ..TrainConfig::default() };
        assert!(matches!(train(&m, &[3; 150], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn diverging_training_reports_step() {
        let m = FrozenBodyLM::random(10, 4, 3, 1.0, 1).unwrap();
        let cfg = TrainConfig { block_size: 8, learning_rate: 1e300, warmup_steps: 0, batch_size: 1, ..TrainConfig::default() };
        let tokens: Vec<u32> = (0..200).map(|i| 3 + (i % 7)).collect();
        match train(&m, &tokens, &cfg) {
            Err(Error::NanLoss { step }) => assert!(step >= 1),
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
