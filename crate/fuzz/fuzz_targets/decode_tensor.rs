#![no_main]

use libfuzzer_sys::fuzz_target;
use ordcap::corpus::{decode_tensor, encode_tensor};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_tensor(data) {
        let bytes = encode_tensor(&t);
        let again = decode_tensor(&bytes).expect("re-encoded tensor decodes");
        assert_eq!(encode_tensor(&again), bytes);
    }
});
