#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use tokadapt_cli::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(mut cfg) = serde_json::from_slice::<PipelineConfig>(data) {
        cfg.resolve(Path::new("/nonexistent-base"));
        let _ = cfg.validate();
    }
});
