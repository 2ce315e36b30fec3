#![no_main]

use libfuzzer_sys::fuzz_target;
use ordcap::topics::LdaModel;

fuzz_target!(|data: &[u8]| {
    let _ = LdaModel::check_header(data);
});
