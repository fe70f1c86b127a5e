#![no_main]

use libfuzzer_sys::fuzz_target;
use tokadapt::bpe::{count_words, train_bpe};
use tokadapt::vocab::Vocabulary;

fuzz_target!(|data: &[u8]| {
    static VOCAB: std::sync::OnceLock<Vocabulary> = std::sync::OnceLock::new();
    let vocab = VOCAB.get_or_init(|| train_bpe(&count_words(&["книгами водой books water"]), 320).expect("bpe"));
    let ids: Vec<u32> = data.chunks(2).map(|c| c.iter().fold(0u32, |a, &b| a << 8 | b as u32)).collect();
    match vocab.decode(&ids) {
        Ok(d) => assert!(ids.iter().all(|&i| (i as usize) < vocab.len()) && d.text.len() <= ids.len() * 64),
        Err(_) => assert!(ids.iter().any(|&i| (i as usize) >= vocab.len())),
    }
});
