#![no_main]

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use tokadapt::bpe::{count_words, train_bpe};
use tokadapt::corpus::normalize_text;
use tokadapt::unigram::{train_unigram, UnigramConfig};
use tokadapt::vocab::Vocabulary;

const TEXTS: &[&str] = &[
    "книгами книга книгу книге о книгах",
    "водой вода воду воды в воде",
    "the reading of books and the water",
    "низкий низкому низко низина",
];

fn vocabs() -> &'static (Vocabulary, Vocabulary) {
    static V: OnceLock<(Vocabulary, Vocabulary)> = OnceLock::new();
    V.get_or_init(|| {
        let counts = count_words(TEXTS);
        let bpe = train_bpe(&counts, 320).expect("bpe");
        let uni = train_unigram(&counts, &UnigramConfig::with_vocab_size(320)).expect("unigram");
        (bpe, uni)
    })
}

fuzz_target!(|data: &[u8]| {
    let Ok(raw) = std::str::from_utf8(data) else { return };
    let text = normalize_text(raw);
    let (bpe, uni) = vocabs();
    for vocab in [bpe, uni] {
        let seq = vocab.encode(&text);
        assert_eq!(vocab.decode(&seq.ids).expect("valid ids").text, text);
    }
});
