#![no_main]

use libfuzzer_sys::fuzz_target;
use tokadapt::vocab::Vocabulary;

fuzz_target!(|data: &[u8]| {
    if let Ok(vocab) = Vocabulary::from_bytes(data) {
        let mut buf = Vec::new();
        vocab.write_to(&mut buf).expect("serialize loaded vocabulary");
        let again = Vocabulary::from_bytes(&buf).expect("reload serialized vocabulary");
        assert!(again == vocab);
    }
});
