#![no_main]

use libfuzzer_sys::fuzz_target;
use tokadapt::corpus::{filter_script, normalize_bytes, normalize_text};

fuzz_target!(|data: &[u8]| {
    if let Ok(once) = normalize_bytes(data) {
        assert_eq!(normalize_text(&once), once);
        let filtered = filter_script(&once);
        assert_eq!(filter_script(&normalize_text(&filtered)), filtered);
    }
});
