#![no_main]

use libfuzzer_sys::fuzz_target;
use tokadapt::morpho::{parse_dataset, parse_frequencies, root_integrity};

fuzz_target!(|data: &[u8]| {
    if let Ok(parsed) = parse_dataset(data) {
        let lines = data.split(|&b| b == b'\n').count();
        assert!(parsed.records.len() + parsed.malformed_lines <= lines);
        for r in parsed.records.iter().filter(|r| !r.root.is_empty()) {
            let v = root_integrity(&r.root, &[r.word.as_str()]).expect("non-empty root");
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let _ = parse_frequencies(data);
});
