#![no_main]

use libfuzzer_sys::fuzz_target;
use ordcap::corpus::Vocabulary;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = Vocabulary::from_json_slice(data) {
        let back = Vocabulary::from_json_slice(v.to_json().as_bytes()).expect("round trip");
        assert_eq!(back, v);
        for w in v.words() {
            assert_eq!(v.token(v.id(w)), Some(w.as_str()));
        }
    }
});
