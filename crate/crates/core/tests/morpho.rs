use proptest::prelude::*;

use tokadapt::bpe::{count_words, train_bpe};
use tokadapt::morpho::{
    dataset_hash, efficiency_projection, evaluate_tokenizer, lcs_length, measure_sample, parse_dataset, project_reports,
    root_integrity, EvalOptions, MorphRecord,
};
use tokadapt::synth::{Lexicon, TextGenerator};
use tokadapt::unigram::{train_unigram, UnigramConfig};

fn lcs_oracle(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) | (_, None) => 0,
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                1 + lcs_oracle(ra, rb)
            } else {
                lcs_oracle(ra, b).max(lcs_oracle(a, rb))
            }
        }
    }
}

fn short() -> impl Strategy<Value = String> {
    "[абвгк]{0,8}"
}

proptest! {
    #[test]
    fn lcs_matches_recursive_oracle(a in short(), b in short()) {
        let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        prop_assert_eq!(lcs_length(&a, &b), lcs_oracle(&ca, &cb));
    }

    #[test]
    fn lcs_laws(a in "[a-eа-д]{0,20}", b in "[a-eа-д]{0,20}", c in "[a-eа-д]{0,5}") {
        prop_assert_eq!(lcs_length(&a, &b), lcs_length(&b, &a));
        prop_assert_eq!(lcs_length(&a, &a), a.chars().count());
        let extended = format!("{}{}", a, c);
        prop_assert!(lcs_length(&extended, &b) >= lcs_length(&a, &b));
        prop_assert!(lcs_length(&a, &b) <= a.chars().count().min(b.chars().count()));
    }

    #[test]
    fn root_integrity_is_a_fraction(root in "[а-д]{1,6}", tokens in prop::collection::vec("[а-дa]{1,5}", 1..6)) {
        let r = root_integrity(&root, &tokens).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        let word: String = tokens.concat();
        prop_assert_eq!(root_integrity(&word, std::slice::from_ref(&word)), Some(1.0));
    }
}

fn setup() -> (Vec<MorphRecord>, Vec<String>) {
    let lexicon = Lexicon::generate(41, 4);
    let records = lexicon.records(400, 41);
    let texts: Vec<String> = TextGenerator::new(&lexicon, 42).documents(300_000, "d").into_iter().map(|d| d.text).collect();
    (records, texts)
}

#[test]
fn evaluation_ignores_record_order_and_duplicates() {
    let (records, texts) = setup();
    let vocab = train_bpe(&count_words(&texts), 600).unwrap();
    let base = evaluate_tokenizer("bpe", &vocab, &records, &EvalOptions::default());
    let mut shuffled = records.clone();
    shuffled.reverse();
    shuffled.extend(records[..50].iter().cloned());
    let other = evaluate_tokenizer("bpe", &vocab, &shuffled, &EvalOptions::default());
    assert_eq!(base.mean_root_integrity, other.mean_root_integrity);
    assert_eq!(base.tokens_per_word, other.tokens_per_word);
    assert_eq!(base.evaluated, records.len());
    assert_eq!(dataset_hash(&records), dataset_hash(&shuffled[..records.len()]));
}

#[test]
fn unigram_keeps_roots_together_more_often_on_desk_data() {
    let (records, texts) = setup();
    let counts = count_words(&texts);
    let bpe = train_bpe(&counts, 800).unwrap();
    let uni = train_unigram(&counts, &UnigramConfig::with_vocab_size(800)).unwrap();
    let rb = evaluate_tokenizer("bpe", &bpe, &records, &EvalOptions::default());
    let ru = evaluate_tokenizer("unigram", &uni, &records, &EvalOptions::default());
    assert!(ru.mean_root_integrity > rb.mean_root_integrity, "{} vs {}", ru.mean_root_integrity, rb.mean_root_integrity);
}

#[test]
fn projection_from_reports_uses_sample_totals() {
    let (records, texts) = setup();
    let counts = count_words(&texts);
    let small = train_bpe(&counts, 350).unwrap();
    let large = train_bpe(&counts, 900).unwrap();
    let mut a = evaluate_tokenizer("small", &small, &records, &EvalOptions::default());
    let mut b = evaluate_tokenizer("large", &large, &records, &EvalOptions::default());
    a.sample = Some(measure_sample(&small, &texts[..50]));
    b.sample = Some(measure_sample(&large, &texts[..50]));
    let p = project_reports(&a, &b).unwrap();
    let (ta, tb) = (a.sample.as_ref().unwrap().total_tokens, b.sample.as_ref().unwrap().total_tokens);
    assert!(ta > tb);
    assert_eq!(p.token_ratio, ta as f64 / tb as f64);
    assert_eq!(efficiency_projection(100, 100).unwrap().projected_speedup_percent, 0.0);
    assert_eq!(efficiency_projection(200, 100).unwrap().projected_speedup_percent, 100.0);

    b.sample = Some(measure_sample(&large, &texts[..40]));
    assert!(project_reports(&a, &b).is_err());
}

#[test]
fn tsv_parsing_tolerates_noise() {
    let data = "книгами\tкниг\n# comment\n\nплохая строка\nводой\tвод\textra\nлесу\t\n".as_bytes();
    let parsed = parse_dataset(data).unwrap();
    assert_eq!(parsed.records, vec![MorphRecord::new("книгами", "книг"), MorphRecord::new("лесу", "")]);
    assert_eq!(parsed.malformed_lines, 3);
}
