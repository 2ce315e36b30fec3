#![no_main]

use libfuzzer_sys::fuzz_target;
use ordcap::corpus::CorpusManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = CorpusManifest::from_json_slice(data) {
        let back = CorpusManifest::from_json_slice(m.to_json().as_bytes()).expect("round trip");
        assert_eq!(back, m);
    }
});
