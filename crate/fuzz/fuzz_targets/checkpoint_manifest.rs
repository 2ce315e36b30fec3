#![no_main]

use libfuzzer_sys::fuzz_target;
use ordcap::checkpoint::CheckpointManifest;

fuzz_target!(|data: &[u8]| {
    let _ = CheckpointManifest::from_json_slice(data);
});
