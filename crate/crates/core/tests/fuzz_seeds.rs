//! Replays the checked-in fuzz seeds through the same entry points and
//! invariants as the fuzz targets, so stable builds exercise them too.

use std::fs;
use std::path::PathBuf;

use ordcap::checkpoint::CheckpointManifest;
use ordcap::corpus::{decode_tensor, encode_tensor, tokenize, CorpusManifest, Vocabulary};
use ordcap::pipeline::PipelineConfig;
use ordcap::topics::LdaModel;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Seeds taken from real artifacts must parse; the rest may be rejected.
fn must_parse(name: &str) -> bool {
    [
        "seed_fc",
        "seed_spatial",
        "seed_matrix",
        "seed_synth",
        "seed_trained",
        "seed_decoder",
        "seed_ordernet",
        "seed_partial",
        "seed_optionals",
    ]
    .iter()
    .any(|p| name.starts_with(p))
}

#[test]
fn decode_tensor_seeds() {
    for (name, bytes) in seeds("decode_tensor") {
        match decode_tensor(&bytes) {
            Ok(t) => {
                let again = encode_tensor(&t);
                assert_eq!(encode_tensor(&decode_tensor(&again).unwrap()), again, "{name}");
            }
            Err(e) => assert!(!must_parse(&name), "{name}: {e}"),
        }
    }
}

#[test]
fn corpus_manifest_seeds() {
    for (name, bytes) in seeds("corpus_manifest") {
        match CorpusManifest::from_json_slice(&bytes) {
            Ok(m) => assert_eq!(
                CorpusManifest::from_json_slice(m.to_json().as_bytes()).unwrap(),
                m,
                "{name}"
            ),
            Err(e) => assert!(!must_parse(&name), "{name}: {e}"),
        }
    }
}

#[test]
fn vocabulary_seeds() {
    for (name, bytes) in seeds("vocabulary") {
        match Vocabulary::from_json_slice(&bytes) {
            Ok(v) => {
                assert_eq!(
                    Vocabulary::from_json_slice(v.to_json().as_bytes()).unwrap(),
                    v,
                    "{name}"
                );
                for w in v.words() {
                    assert_eq!(v.token(v.id(w)), Some(w.as_str()));
                }
            }
            Err(e) => assert!(!must_parse(&name), "{name}: {e}"),
        }
    }
}

#[test]
fn pipeline_config_seeds() {
    for (name, bytes) in seeds("pipeline_config") {
        match PipelineConfig::from_json_slice(&bytes) {
            Ok(c) => assert_eq!(
                PipelineConfig::from_json_slice(c.to_json().as_bytes()).unwrap(),
                c,
                "{name}"
            ),
            Err(e) => assert!(!must_parse(&name), "{name}: {e}"),
        }
    }
}

#[test]
fn checkpoint_manifest_seeds() {
    for (name, bytes) in seeds("checkpoint_manifest") {
        if let Err(e) = CheckpointManifest::from_json_slice(&bytes) {
            assert!(!must_parse(&name), "{name}: {e}");
        }
    }
}

#[test]
fn lda_header_seeds() {
    for (name, bytes) in seeds("lda_header") {
        if let Err(e) = LdaModel::check_header(&bytes) {
            assert!(!must_parse(&name), "{name}: {e}");
        }
    }
}

#[test]
fn tokenize_seeds() {
    for (name, bytes) in seeds("tokenize") {
        let text = String::from_utf8(bytes).unwrap();
        let once = tokenize(&text);
        assert!(once.iter().all(|t| !t.is_empty()), "{name}");
        assert_eq!(tokenize(&once.join(" ")), once, "{name}");
    }
}
