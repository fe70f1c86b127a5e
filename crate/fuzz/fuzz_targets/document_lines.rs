#![no_main]

use libfuzzer_sys::fuzz_target;
use tokadapt::corpus::{parse_document_line, read_documents, write_documents};

fuzz_target!(|data: &[u8]| {
    let _ = parse_document_line(data, 1);
    if let Ok(docs) = read_documents(data) {
        let mut buf = Vec::new();
        write_documents(&mut buf, &docs).expect("serialize");
        assert_eq!(read_documents(buf.as_slice()).expect("reload"), docs);
    }
});
