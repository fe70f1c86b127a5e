//! End-to-end acceptance criteria. Each test prints one `PASS`/`FAIL` line
//! with the measured quantity and runtime before asserting.

use std::collections::HashSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokadapt::bpe::{count_words, train_bpe};
use tokadapt::corpus::{dedup_corpus, normalize_text, DedupConfig, Document};
use tokadapt::morpho::{efficiency_projection, evaluate_tokenizer, EvalOptions, TokenizerReport};
use tokadapt::remap::{plan_remap, remap_embeddings, EmbeddingMatrix, MatrixRole, RemapKind};
use tokadapt::synth::{bilingual_corpora, Lexicon, TextGenerator};
use tokadapt::tinylm::{block_examples, compare_inits, encode_corpus, train, FrozenBodyLM, TrainConfig};
use tokadapt::unigram::{corpus_log_likelihood, em_step_with_likelihood, seed_candidates, train_unigram, UnigramConfig};
use tokadapt::vocab::{MergeTable, VocabKind, Vocabulary, MARKER};
use tokadapt::WordCounts;

fn verdict(id: u32, name: &str, ok: bool, detail: String, elapsed: Duration, budget: Duration) -> bool {
    let in_time = elapsed <= budget;
    let pass = ok && in_time;
    println!(
        "criterion {id:>2} [{}] {name}: {detail}; {:.2}s (budget {}s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

struct MorphSetup {
    bpe: TokenizerReport,
    unigram: TokenizerReport,
    records: usize,
    corpus_bytes: usize,
    elapsed: Duration,
}

fn morph_setup() -> &'static MorphSetup {
    static SETUP: OnceLock<MorphSetup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let start = Instant::now();
        let lexicon = Lexicon::generate(2024, 6);
        let records = lexicon.records(1500, 2024);
        let docs = TextGenerator::new(&lexicon, 2025).documents(5 * 1024 * 1024, "ru");
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let corpus_bytes = texts.iter().map(|t| t.len()).sum();
        let counts = count_words(&texts);
        let bpe = train_bpe(&counts, 2000).expect("bpe training");
        let unigram = train_unigram(&counts, &UnigramConfig::with_vocab_size(2000)).expect("unigram training");
        let opts = EvalOptions::default();
        MorphSetup {
            bpe: evaluate_tokenizer("bpe", &bpe, &records, &opts),
            unigram: evaluate_tokenizer("unigram", &unigram, &records, &opts),
            records: records.len(),
            corpus_bytes,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_01_unigram_preserves_roots_better_than_bpe() {
    let s = morph_setup();
    let margin = s.unigram.mean_root_integrity - s.bpe.mean_root_integrity;
    let ok = s.records >= 1000
        && s.corpus_bytes >= 5 * 1024 * 1024
        && s.bpe.vocab_size == 2000
        && s.unigram.vocab_size == 2000
        && margin > 0.0;
    let detail = format!(
        "root integrity unigram {:.4} vs bpe {:.4} (margin {margin:+.4}) over {} records, {:.1} MB corpus",
        s.unigram.mean_root_integrity,
        s.bpe.mean_root_integrity,
        s.records,
        s.corpus_bytes as f64 / 1048576.0
    );
    assert!(verdict(1, "root integrity ordering", ok, detail, s.elapsed, Duration::from_secs(600)));
}

#[test]
fn criterion_02_bpe_uses_no_more_tokens_per_word() {
    let s = morph_setup();
    let (b, u) = (s.bpe.tokens_per_word.mean, s.unigram.tokens_per_word.mean);
    let tie = (b - u).abs() < 0.02;
    let ok = b <= u || tie;
    let detail = format!("tokens/word bpe {b:.4} vs unigram {u:.4}{}", if tie && b > u { " (tie)" } else { "" });
    assert!(verdict(2, "token-length bias", ok, detail, s.elapsed, Duration::from_secs(600)));
}

#[test]
fn criterion_03_remap_matches_brute_force_mean() {
    let (old_texts, new_texts) = bilingual_corpora(31, 600, 0.2);
    let old_vocab = train_bpe(&count_words(&old_texts), 700).unwrap();
    let new_vocab = train_unigram(&count_words(&new_texts), &UnigramConfig::with_vocab_size(1000)).unwrap();
    assert_eq!(new_vocab.len(), 1000);
    let dim = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f32> = (0..old_vocab.len() * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let old = EmbeddingMatrix::from_vec(MatrixRole::Embedding, old_vocab.len(), dim, data).unwrap();

    let start = Instant::now();
    let (plan, report) = plan_remap(&old_vocab, &new_vocab).unwrap();
    let new = remap_embeddings(&old, &plan).unwrap();
    let mut mismatches = 0;
    let mut copies_broken = 0;
    for (i, entry) in plan.entries.iter().enumerate() {
        let got = new.row(i);
        for j in 0..dim {
            let mut sum = 0.0f64;
            for &t in &entry.old_ids {
                sum += old.as_slice()[t as usize * dim + j] as f64;
            }
            let want = (sum / entry.old_ids.len() as f64) as f32;
            if want.to_bits() != got[j].to_bits() {
                mismatches += 1;
            }
        }
        if entry.kind == RemapKind::ExactCopy {
            let src = old.row(entry.old_ids[0] as usize);
            if src.iter().zip(got).any(|(a, b)| a.to_bits() != b.to_bits()) {
                copies_broken += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = mismatches == 0 && copies_broken == 0 && report.averaged_count > 0;
    let detail = format!(
        "{} rows ({} exact copies, {} averaged, {} marker-adjusted), {mismatches} mismatched entries, {copies_broken} broken copies",
        plan.entries.len(),
        report.exact_copy_count,
        report.averaged_count,
        report.marker_adjusted_count
    );
    assert!(verdict(3, "remap oracle equivalence", ok, detail, elapsed, Duration::from_secs(1)));
}

fn best_segmentation_score(word: &[char], scores: &std::collections::HashMap<String, f64>) -> f64 {
    if word.is_empty() {
        return 0.0;
    }
    let mut best = f64::NEG_INFINITY;
    for len in 1..=word.len() {
        let head: String = word[..len].iter().collect();
        if let Some(&s) = scores.get(&head) {
            let rest = best_segmentation_score(&word[len..], scores);
            if s + rest > best {
                best = s + rest;
            }
        }
    }
    best
}

#[test]
fn criterion_04_viterbi_is_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let alphabet = ['▁', 'a', 'b', 'c', 'д', 'е'];
    let mut surfaces: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
    while surfaces.len() < 30 {
        let len = rng.random_range(2..=4);
        let mut s: String = (0..len).map(|_| alphabet[rng.random_range(1..alphabet.len())]).collect();
        if rng.random_bool(0.3) {
            s.insert(0, MARKER);
        }
        if !surfaces.contains(&s) {
            surfaces.push(s);
        }
    }
    let scored: Vec<(String, f64)> =
        surfaces.iter().map(|s| (s.clone(), -(rng.random_range(1..=64) as f64) / 8.0)).collect();
    let vocab = Vocabulary::new(VocabKind::Unigram, scored.clone(), MergeTable::default()).unwrap();
    let table: std::collections::HashMap<String, f64> = scored.into_iter().collect();

    let start = Instant::now();
    let mut agree = 0;
    let n = 500;
    for _ in 0..n {
        let len = rng.random_range(1..=10);
        let mut word: Vec<char> = (0..len).map(|_| alphabet[rng.random_range(1..alphabet.len())]).collect();
        if rng.random_bool(0.5) {
            word.insert(0, MARKER);
        }
        let text: String = word.iter().collect();
        let ids = vocab.encode_pretokenized(&text).ids;
        let got: f64 = ids.iter().map(|&id| vocab.piece(id).unwrap().score).sum();
        let rebuilt: String = ids.iter().map(|&id| vocab.piece(id).unwrap().surface.as_str()).collect();
        if rebuilt == text && got == best_segmentation_score(&word, &table) {
            agree += 1;
        }
    }
    let elapsed = start.elapsed();
    let detail = format!("{agree}/{n} words match exhaustive enumeration");
    assert!(verdict(4, "viterbi optimality", agree == n, detail, elapsed, Duration::from_secs(10)));
}

#[test]
fn criterion_05_em_is_monotone() {
    let lexicon = Lexicon::generate(5, 2);
    let mut gen = TextGenerator::new(&lexicon, 5);
    let mut counts = WordCounts::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    while counts.len() < 50 {
        let sentence = gen.sentence();
        for w in sentence.split(' ') {
            if counts.len() < 50 || counts.get(&format!("{MARKER}{w}")).is_some() {
                counts.add(&format!("{MARKER}{w}"), rng.random_range(1..20));
            }
        }
    }
    let start = Instant::now();
    let mut cands = seed_candidates(&counts, 120, 6).unwrap();
    let mut lls = Vec::new();
    for _ in 0..10 {
        let (next, ll) = em_step_with_likelihood(&cands, &counts).unwrap();
        lls.push(ll);
        cands = next;
    }
    lls.push(corpus_log_likelihood(&cands, &counts).unwrap());
    let elapsed = start.elapsed();
    let worst = lls.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    let ok = counts.len() == 50 && worst <= 1e-9;
    let detail = format!(
        "{} words, log-likelihood {:.3} -> {:.3}, largest decrease {:.2e}",
        counts.len(),
        lls[0],
        lls[lls.len() - 1],
        worst.max(0.0)
    );
    assert!(verdict(5, "EM monotonicity", ok, detail, elapsed, Duration::from_secs(5)));
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const POOL: &[char] = &[
        'а', 'б', 'в', 'г', 'д', 'е', 'ж', 'и', 'к', 'л', 'м', 'н', 'о', 'п', 'р', 'с', 'т', 'у', 'ы', 'я', 'А', 'Б',
        'a', 'b', 'c', 'd', 'e', 'k', 'o', 'x', 'Z', '0', '7', '.', ',', '!', '-', ' ', ' ', ' ', ' ', '\n',
    ];
    const RARE: &[char] = &['ß', 'ñ', '中', '文', '😀', '€', '∑', 'Ω', 'ē', '\u{2581}', '\u{0301}', '\u{00A0}', '\t'];
    let len = rng.random_range(0..60);
    let raw: String = (0..len)
        .map(|_| if rng.random_bool(0.1) { RARE[rng.random_range(0..RARE.len())] } else { POOL[rng.random_range(0..POOL.len())] })
        .collect();
    normalize_text(&raw)
}

#[test]
fn criterion_06_round_trip_is_lossless() {
    let (old_texts, new_texts) = bilingual_corpora(6, 300, 0.5);
    let mut texts = old_texts;
    texts.extend(new_texts);
    let counts = count_words(&texts);
    let bpe = train_bpe(&counts, 600).unwrap();
    let unigram = train_unigram(&counts, &UnigramConfig::with_vocab_size(600)).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples: Vec<String> = (0..10_000).map(|_| random_text(&mut rng)).collect();
    let start = Instant::now();
    let mut failures = Vec::new();
    for (kind, vocab) in [("bpe", &bpe), ("unigram", &unigram)] {
        for s in &samples {
            let back = vocab.decode(&vocab.encode(s).ids).unwrap().text;
            if &back != s {
                failures.push(format!("{kind}: {s:?} -> {back:?}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let fallback = samples.iter().filter(|s| unigram.encode(s).ids.iter().any(|&id| Vocabulary::byte_value(id).is_some())).count();
    let detail = format!(
        "{} failures over {} strings x 2 kinds ({fallback} strings exercise byte fallback){}",
        failures.len(),
        samples.len(),
        failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
    );
    assert!(verdict(6, "round-trip losslessness", failures.is_empty() && fallback > 0, detail, elapsed, Duration::from_secs(30)));
}

fn exact_jaccard(a: &str, b: &str) -> f64 {
    let grams = |s: &str| -> HashSet<String> {
        let cs: Vec<char> = s.chars().collect();
        cs.windows(5).map(|w| w.iter().collect()).collect()
    };
    let (ga, gb) = (grams(a), grams(b));
    let inter = ga.intersection(&gb).count();
    let union = ga.union(&gb).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn perturb(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<String> = text.split(' ').map(str::to_string).collect();
    let i = rng.random_range(0..words.len());
    words[i] = words[i].chars().rev().collect();
    words.join(" ")
}

#[test]
fn criterion_07_dedup_recall() {
    let lexicon = Lexicon::generate(7, 3);
    let mut gen = TextGenerator::new(&lexicon, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut texts: Vec<String> = Vec::new();
    while texts.len() < 90 {
        let t = format!("{} {}", gen.paragraph(), gen.paragraph());
        if t.chars().count() >= 600 {
            texts.push(t);
        }
    }
    let mut pairs = Vec::new();
    for i in 0..10 {
        let dup = perturb(&texts[i * 9], &mut rng);
        texts.push(dup);
        pairs.push((i * 9, texts.len() - 1));
    }
    let docs: Vec<Document> = texts.iter().enumerate().map(|(i, t)| Document::new(format!("d{i}"), t.clone(), "test")).collect();

    let planted_ok = pairs.iter().all(|&(a, b)| exact_jaccard(&texts[a], &texts[b]) >= 0.9);
    let start = Instant::now();
    let (kept, _) = dedup_corpus(docs, DedupConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let kept_ids: HashSet<usize> = kept.iter().map(|d| d.id[1..].parse().unwrap()).collect();
    let collapsed = pairs.iter().filter(|&&(a, b)| kept_ids.contains(&a) != kept_ids.contains(&b)).count();
    let mut bad_drops = 0;
    for i in (0..texts.len()).filter(|i| !kept_ids.contains(i)) {
        let best = kept_ids.iter().map(|&k| exact_jaccard(&texts[i], &texts[k])).fold(0.0, f64::max);
        if best < 0.5 {
            bad_drops += 1;
        }
    }
    let ok = planted_ok && collapsed >= 9 && bad_drops == 0;
    let detail = format!(
        "{collapsed}/10 planted pairs collapsed, {bad_drops} drops without a >=0.5 Jaccard match, {} of {} kept",
        kept.len(),
        texts.len()
    );
    assert!(verdict(7, "dedup recall", ok, detail, elapsed, Duration::from_secs(10)));
}

fn lm_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1.0,
        batch_size: 8,
        block_size: 64,
        warmup_steps: 10,
        max_epochs: 2.0,
        eval_every: 0.5,
        seed,
        patience: 2,
        max_steps: None,
    }
}

#[test]
fn criterion_08_remapped_init_beats_random() {
    let start = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let (old_texts, new_texts) = bilingual_corpora(100 + seed, 300, 0.2);
        let old_vocab = train_bpe(&count_words(&old_texts), 400).unwrap();
        let new_vocab = train_unigram(&count_words(&new_texts), &UnigramConfig::with_vocab_size(400)).unwrap();
        let old_tokens = encode_corpus(&old_vocab, &new_texts);
        let init = FrozenBodyLM::random(old_vocab.len(), 32, 8, 0.5, seed).unwrap();
        let old_model = train(&init, &old_tokens, &TrainConfig { max_epochs: 3.0, ..lm_config(seed) }).unwrap().model;
        let cmp = compare_inits(&old_model, &old_vocab, &new_vocab, &new_texts, &TrainConfig { max_epochs: 1.0, ..lm_config(seed) }, 0.02)
            .unwrap();
        if cmp.remapped_initial < cmp.random_initial {
            wins += 1;
        }
        lines.push(format!("seed {seed}: {:.3} vs {:.3}", cmp.remapped_initial, cmp.random_initial));
    }
    let elapsed = start.elapsed();
    let detail = format!("remapped < random initial val CE in {wins}/5 ({})", lines.join(", "));
    assert!(verdict(8, "initialization advantage", wins == 5, detail, elapsed, Duration::from_secs(120)));
}

#[test]
fn criterion_09_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut model = FrozenBodyLM::random(10, 4, 3, 0.7, 9).unwrap();
    let tokens: Vec<u32> = {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..12).map(|_| rng.random_range(0..10)).collect()
    };
    let examples = block_examples(&tokens, 3);
    let (_, grad) = model.loss_and_gradient(&examples).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = model.vocab_size() * model.dim();
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 40 {
        let in_head = rng.random_bool(0.5);
        let idx = rng.random_range(0..n);
        let analytic = if in_head { grad.head[idx] } else { grad.embeddings[idx] };
        if analytic.abs() < 1e-6 {
            continue;
        }
        let eps = 1e-3f32;
        fn slot(m: &mut FrozenBodyLM, in_head: bool, idx: usize) -> &mut f32 {
            if in_head {
                &mut m.head.as_mut_slice()[idx]
            } else {
                &mut m.embeddings.as_mut_slice()[idx]
            }
        }
        let orig = *slot(&mut model, in_head, idx);
        let (plus, minus) = (orig + eps, orig - eps);
        *slot(&mut model, in_head, idx) = plus;
        let lp = model.loss(&examples).unwrap();
        *slot(&mut model, in_head, idx) = minus;
        let lm = model.loss(&examples).unwrap();
        *slot(&mut model, in_head, idx) = orig;
        let numeric = (lp - lm) / (plus as f64 - minus as f64);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        checked += 1;
    }
    let elapsed = start.elapsed();
    let detail = format!("{checked} coordinates, worst relative error {worst:.2e}");
    assert!(verdict(9, "gradient check", worst <= 1e-4, detail, elapsed, Duration::from_secs(5)));
}

#[test]
fn criterion_10_efficiency_projection() {
    let start = Instant::now();
    let p = efficiency_projection(27_000, 17_000).unwrap();
    let elapsed = start.elapsed();
    let ok = (p.projected_speedup_percent - 58.8).abs() <= 0.1;
    let detail = format!("ratio {:.4}, projected speedup {:.2}%", p.token_ratio, p.projected_speedup_percent);
    assert!(verdict(10, "efficiency projection", ok, detail, elapsed, Duration::from_secs(1)));
}
