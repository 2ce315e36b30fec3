#![no_main]

use libfuzzer_sys::fuzz_target;
use ordcap::corpus::tokenize;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let tokens = tokenize(text);
        assert!(tokens.iter().all(|t| !t.is_empty()));
        // tokenizing is idempotent on its own output
        assert_eq!(tokenize(&tokens.join(" ")), tokens);
    }
});
