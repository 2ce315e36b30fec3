#![no_main]

use libfuzzer_sys::fuzz_target;
use ordcap::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = PipelineConfig::from_json_slice(data) {
        let back = PipelineConfig::from_json_slice(c.to_json().as_bytes()).expect("round trip");
        assert_eq!(back, c);
    }
});
