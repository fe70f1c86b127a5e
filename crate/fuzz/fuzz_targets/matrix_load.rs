#![no_main]

use libfuzzer_sys::fuzz_target;
use tokadapt::remap::EmbeddingMatrix;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = EmbeddingMatrix::from_bytes(data) {
        assert!(m.as_slice().iter().all(|v| v.is_finite()));
        let mut buf = Vec::new();
        m.write_to(&mut buf).expect("serialize");
        assert!(EmbeddingMatrix::from_bytes(&buf).expect("reload").bitwise_eq(&m));
    }
});
