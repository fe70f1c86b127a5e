use std::collections::HashMap;
use std::sync::OnceLock;

use proptest::prelude::*;

use tokadapt::bpe::{count_words, train_bpe, train_bpe_traced, WordCounts};
use tokadapt::corpus::normalize_text;
use tokadapt::morpho::{root_integrity, token_strings};
use tokadapt::synth::{bilingual_corpora, transliterate};
use tokadapt::unigram::{
    corpus_log_likelihood, em_step, prune, prune_losses, prune_order, seed_candidates, train_unigram,
    train_unigram_traced, CandidateSet, UnigramConfig,
};
use tokadapt::vocab::{pretokenize, MergeTable, VocabKind, Vocabulary, MARKER, NUM_RESERVED};

fn corpus() -> &'static Vec<String> {
    static TEXTS: OnceLock<Vec<String>> = OnceLock::new();
    TEXTS.get_or_init(|| {
        let (old, new) = bilingual_corpora(77, 200, 0.5);
        old.into_iter().chain(new).collect()
    })
}

fn trained() -> &'static (Vocabulary, Vocabulary) {
    static VOCABS: OnceLock<(Vocabulary, Vocabulary)> = OnceLock::new();
    VOCABS.get_or_init(|| {
        let counts = count_words(corpus());
        (train_bpe(&counts, 500).unwrap(), train_unigram(&counts, &UnigramConfig::with_vocab_size(500)).unwrap())
    })
}

fn mixed_text() -> impl Strategy<Value = String> {
    let pieces = prop_oneof![
        6 => "[а-яё]{1,8}",
        3 => "[a-z]{1,8}",
        1 => "[А-ЯA-Z0-9]{1,3}",
        3 => Just(" ".to_string()),
        1 => Just("\n".to_string()),
        1 => "[.,!?;:-]",
        1 => Just("€".to_string()),
        1 => Just("😀".to_string()),
        1 => Just("中".to_string()),
        1 => any::<char>().prop_map(|c| c.to_string()),
    ];
    prop::collection::vec(pieces, 0..20).prop_map(|v| normalize_text(&v.concat()))
}

proptest! {
    #[test]
    fn decode_inverts_encode(s in mixed_text()) {
        let (bpe, uni) = trained();
        for vocab in [bpe, uni] {
            let seq = vocab.encode(&s);
            prop_assert_eq!(&vocab.decode(&seq.ids).unwrap().text, &s);
        }
    }

    #[test]
    fn encode_is_total(s in any::<String>()) {
        let (bpe, uni) = trained();
        for vocab in [bpe, uni] {
            let seq = vocab.encode(&s);
            prop_assert!(seq.ids.iter().all(|&id| (id as usize) < vocab.len()));
            prop_assert_eq!(seq.ids.len(), seq.offsets.len());
        }
    }

    #[test]
    fn offsets_partition_the_pretokenized_text(s in mixed_text()) {
        let (bpe, uni) = trained();
        let marked = pretokenize(&s);
        let n = marked.chars().count();
        for vocab in [bpe, uni] {
            let seq = vocab.encode(&s);
            let mut pos = 0;
            for &(a, b) in &seq.offsets {
                prop_assert!(a == pos || (a == pos && b == pos), "gap at {pos}: ({a}, {b})");
                prop_assert!(b >= a);
                pos = b;
            }
            prop_assert_eq!(pos, n);
            let rebuilt: String = seq
                .offsets
                .iter()
                .filter(|(a, b)| b > a)
                .map(|&(a, b)| marked.chars().skip(a).take(b - a).collect::<String>())
                .collect();
            prop_assert_eq!(rebuilt, marked.clone());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn vocabulary_file_round_trip(size in 360usize..480, kind in prop_oneof![Just(VocabKind::Bpe), Just(VocabKind::Unigram)]) {
        let counts = count_words(&corpus()[..60]);
        let vocab = match kind {
            VocabKind::Bpe => train_bpe(&counts, size).unwrap(),
            VocabKind::Unigram => train_unigram(&counts, &UnigramConfig::with_vocab_size(size)).unwrap(),
        };
        let mut buf = Vec::new();
        vocab.write_to(&mut buf).unwrap();
        let back = Vocabulary::from_bytes(&buf).unwrap();
        prop_assert_eq!(back.pieces(), vocab.pieces());
        prop_assert_eq!(back.merges(), vocab.merges());
        prop_assert_eq!(back.kind(), vocab.kind());
        for cut in [1, buf.len() / 3, buf.len() - 1] {
            prop_assert!(Vocabulary::from_bytes(&buf[..cut]).is_err());
        }
    }
}

#[test]
fn count_words_is_additive_over_shards() {
    let texts = corpus();
    let whole = count_words(texts);
    let mut sharded = count_words(&texts[..123]);
    sharded.merge(count_words(&texts[123..]));
    assert_eq!(whole, sharded);
}

#[test]
fn bpe_training_segmentation_equals_replay() {
    let counts = count_words(&corpus()[..150]);
    let run = train_bpe_traced(&counts, 600).unwrap();
    for (word, _) in counts.iter() {
        let ids = run.vocab.encode_pretokenized(word).ids;
        let surfaces: Vec<String> = ids.iter().map(|&id| run.vocab.piece(id).unwrap().surface.clone()).collect();
        assert_eq!(&surfaces, &run.segmentations[word], "word {word}");
    }
    assert!(run.merge_frequencies.windows(2).all(|w| w[0] >= w[1]));
    assert!(run.merge_frequencies.iter().all(|&f| f >= 2));
}

#[test]
fn bpe_vocab_size_is_exact_until_exhaustion() {
    let counts = count_words(&corpus()[..40]);
    assert_eq!(train_bpe(&counts, 450).unwrap().len(), 450);
    let exhausted = train_bpe(&counts, 1_000_000).unwrap();
    assert!(exhausted.len() < 1_000_000);
    let again = train_bpe(&counts, exhausted.len() + 10).unwrap();
    assert_eq!(again.len(), exhausted.len());
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn training_is_independent_of_worker_count() {
    let texts = corpus();
    let one = in_pool(1, || {
        let counts = count_words(texts);
        (train_bpe(&counts, 450).unwrap(), train_unigram(&counts, &UnigramConfig::with_vocab_size(450)).unwrap())
    });
    let four = in_pool(4, || {
        let counts = count_words(texts);
        (train_bpe(&counts, 450).unwrap(), train_unigram(&counts, &UnigramConfig::with_vocab_size(450)).unwrap())
    });
    assert_eq!(one.0.pieces(), four.0.pieces());
    assert_eq!(one.0.merges(), four.0.merges());
    assert_eq!(one.1.pieces(), four.1.pieces());
    let sample = &texts[3];
    assert_eq!(one.1.encode(sample), in_pool(3, || four.1.encode(sample)));
}

fn brute_force_best(word: &[char], scores: &HashMap<String, f64>) -> f64 {
    if word.is_empty() {
        return 0.0;
    }
    (1..=word.len())
        .filter_map(|len| {
            let head: String = word[..len].iter().collect();
            scores.get(&head).map(|s| s + brute_force_best(&word[len..], scores))
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn scored_vocab() -> impl Strategy<Value = Vec<(String, f64)>> {
    const ALPHABET: [&str; 5] = ["▁", "a", "b", "c", "д"];
    let piece = prop::collection::vec(prop::sample::select(&ALPHABET[1..]), 2..5)
        .prop_flat_map(|cs| (Just(cs.concat()), any::<bool>()))
        .prop_map(|(s, marked)| if marked { format!("{MARKER}{s}") } else { s });
    (prop::collection::btree_set(piece, 25), prop::collection::vec(1u32..=64, 30)).prop_map(move |(multi, scores)| {
        ALPHABET
            .iter()
            .map(|s| s.to_string())
            .chain(multi)
            .take(30)
            .zip(scores)
            .map(|(s, q)| (s, -(q as f64) / 8.0))
            .collect()
    })
}

proptest! {
    #[test]
    fn viterbi_matches_exhaustive_search(
        pieces in scored_vocab(),
        words in prop::collection::vec((any::<bool>(), prop::collection::vec(prop::sample::select(vec!['a', 'b', 'c', 'д']), 1..=10)), 1..20),
    ) {
        let vocab = Vocabulary::new(VocabKind::Unigram, pieces.clone(), MergeTable::default()).unwrap();
        let table: HashMap<String, f64> = pieces.into_iter().collect();
        for (marked, chars) in words {
            let mut word = chars;
            if marked {
                word.insert(0, MARKER);
            }
            let text: String = word.iter().collect();
            let ids = vocab.encode_pretokenized(&text).ids;
            let score: f64 = ids.iter().map(|&id| vocab.piece(id).unwrap().score).sum();
            prop_assert_eq!(score, brute_force_best(&word, &table));
        }
    }

    #[test]
    fn em_never_decreases_likelihood(words in prop::collection::btree_map("[abc]{1,6}", 1u64..20, 1..12)) {
        let counts: WordCounts = words.into_iter().map(|(w, c)| (format!("{MARKER}{w}"), c)).collect();
        let mut cands = seed_candidates(&counts, 40, 4).unwrap();
        let mut prev = corpus_log_likelihood(&cands, &counts).unwrap();
        for _ in 0..6 {
            cands = em_step(&cands, &counts).unwrap();
            let ll = corpus_log_likelihood(&cands, &counts).unwrap();
            prop_assert!(ll >= prev - 1e-9, "{prev} -> {ll}");
            prev = ll;
        }
    }
}

fn viterbi_score(word: &[char], cands: &CandidateSet, skip: Option<&str>) -> f64 {
    let table: HashMap<String, f64> = cands
        .iter()
        .filter(|c| Some(c.surface.as_str()) != skip)
        .map(|c| (c.surface.clone(), c.log_prob))
        .collect();
    brute_force_best(word, &table)
}

#[test]
fn prune_order_matches_leave_one_out_recomputation() {
    let counts: WordCounts = [("▁abab", 3u64), ("▁abc", 2), ("▁bca", 1)].into_iter().map(|(w, c)| (w.to_string(), c)).collect();
    let cands = em_step(&seed_candidates(&counts, 30, 4).unwrap(), &counts).unwrap();
    let words: Vec<(Vec<char>, f64)> = counts.iter().map(|(w, c)| (w.chars().collect(), c as f64)).collect();
    let oracle: HashMap<String, f64> = cands
        .iter()
        .filter(|c| c.surface.chars().count() > 1)
        .map(|c| {
            let loss = words
                .iter()
                .map(|(w, n)| n * (viterbi_score(w, &cands, None) - viterbi_score(w, &cands, Some(&c.surface))))
                .sum();
            (c.surface.clone(), loss)
        })
        .collect();
    let order = prune_order(&cands, &counts);
    assert_eq!(order.len(), oracle.len());
    let losses: Vec<f64> = order.iter().map(|s| oracle[s]).collect();
    assert!(losses.windows(2).all(|w| w[0] <= w[1] + 1e-9), "order {order:?} losses {losses:?}");

    let reported = prune_losses(&cands, &counts);
    for (c, l) in cands.iter().zip(reported) {
        match oracle.get(&c.surface) {
            Some(want) => assert!((l.unwrap() - want).abs() < 1e-9, "{}: {l:?} vs {want}", c.surface),
            None => assert!(l.is_none()),
        }
    }

    let pruned = prune(&cands, &counts, 0.5).unwrap();
    for c in ["▁", "a", "b", "c"] {
        assert!(pruned.contains(c));
    }
}

#[test]
fn trained_unigram_keeps_a_frequent_root() {
    let mut counts = WordCounts::new();
    for (w, c) in [
        ("низ", 30),
        ("низко", 40),
        ("низкий", 35),
        ("низкая", 25),
        ("низина", 15),
        ("снизу", 10),
        ("вниз", 20),
        ("летит", 30),
        ("лето", 20),
        ("высоко", 25),
        ("высокий", 20),
    ] {
        counts.add(&format!("{MARKER}{w}"), c);
    }
    let vocab = train_unigram(&counts, &UnigramConfig { vocab_size: NUM_RESERVED + 35, ..UnigramConfig::default() }).unwrap();
    assert!(vocab.id_of("низ").is_some() || vocab.id_of("▁низ").is_some(), "no root piece in {:?}", vocab.learned());
    for unseen in ["низкому", "низинами"] {
        let tokens = token_strings(&vocab, &vocab.encode(unseen).ids);
        assert_eq!(root_integrity("низ", &tokens), Some(1.0), "{unseen}: {tokens:?}");
    }
}

#[test]
fn doubling_counts_leaves_unigram_vocabulary_unchanged() {
    let counts = count_words(&corpus()[..80]);
    let doubled: WordCounts = counts.iter().map(|(w, c)| (w.to_string(), 2 * c)).collect();
    let cfg = UnigramConfig::with_vocab_size(400);
    let a = train_unigram(&counts, &cfg).unwrap();
    let b = train_unigram(&doubled, &cfg).unwrap();
    let surfaces = |v: &Vocabulary| v.pieces().iter().map(|p| p.surface.clone()).collect::<Vec<_>>();
    assert_eq!(surfaces(&a), surfaces(&b));
    for (p, q) in a.pieces().iter().zip(b.pieces()) {
        assert!((p.score - q.score).abs() < 1e-9, "{}: {} vs {}", p.surface, p.score, q.score);
    }
}

#[test]
fn unigram_training_is_reproducible_and_covers_corpus() {
    let counts = count_words(&corpus()[..100]);
    let cfg = UnigramConfig::with_vocab_size(420);
    let a = train_unigram_traced(&counts, &cfg).unwrap();
    let b = train_unigram(&counts, &cfg).unwrap();
    assert_eq!(a.vocab.pieces(), b.pieces());
    assert_eq!(a.vocab.len(), 420);
    for (word, _) in counts.iter() {
        let ids = a.vocab.encode_pretokenized(word).ids;
        assert!(ids.iter().all(|&id| Vocabulary::byte_value(id).is_none()), "{word} needed byte fallback");
    }
}

#[test]
fn unseen_script_round_trips_through_bytes() {
    let (bpe, uni) = trained();
    let text = format!("{} ∑ 中文 {}", transliterate("привет"), "ǅ");
    for vocab in [bpe, uni] {
        let seq = vocab.encode(&text);
        assert!(seq.ids.iter().any(|&id| Vocabulary::byte_value(id).is_some()));
        assert_eq!(vocab.decode(&seq.ids).unwrap().text, text);
    }
}
