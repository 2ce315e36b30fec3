//! Checkpoints: a JSON manifest of named tensors next to one `OCF1` file per
//! tensor. Adam moments are stored as `adam.m.<name>` / `adam.v.<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::numerics::{Adam, ParamStore, Tensor};

pub const FORMAT: &str = "ordcap-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamEntry {
    pub lr: f64,
    pub step_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub adam: Option<AdamEntry>,
    /// Model-specific settings, opaque to this module.
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointManifest {
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let m: Self = serde_json::from_slice(bytes).map_err(Error::from_json)?;
        if m.format != FORMAT {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format `{}`",
                m.format
            )));
        }
        let mut names = std::collections::BTreeSet::new();
        for t in &m.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Validation(format!("duplicate tensor `{}`", t.name)));
            }
            if t.shape.is_empty() || t.shape.contains(&0) {
                return Err(Error::Validation(format!(
                    "tensor `{}` has empty shape {:?}",
                    t.name, t.shape
                )));
            }
            if t.file.contains("..") || Path::new(&t.file).is_absolute() {
                return Err(Error::Validation(format!(
                    "tensor file `{}` escapes the checkpoint",
                    t.file
                )));
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: Option<Adam>,
    pub epoch: usize,
    pub extra: serde_json::Value,
}

fn file_name(stem: &str, name: &str) -> String {
    format!("{stem}.{name}.ocf")
}

/// Writes `<stem>.json` and the tensor files into `dir`.
pub fn save(dir: &Path, stem: &str, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut put = |name: String, t: &Tensor| -> Result<()> {
        let file = file_name(stem, &name);
        write_tensor(&dir.join(&file), t)?;
        tensors.push(TensorEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
        Ok(())
    };
    for (name, t) in ck.params.iter() {
        put(name.clone(), t)?;
    }
    let adam = match &ck.adam {
        Some(a) => {
            let (m, v) = a.state();
            for (prefix, moments) in [("adam.m", m), ("adam.v", v)] {
                for (name, buf) in moments {
                    let shape = ck.params.require(name)?.shape().to_vec();
                    put(format!("{prefix}.{name}"), &Tensor::new(shape, buf.clone())?)?;
                }
            }
            Some(AdamEntry {
                lr: a.lr,
                step_count: a.step_count(),
            })
        }
        None => None,
    };
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        seed: ck.params.seed(),
        epoch: ck.epoch,
        tensors,
        adam,
        extra: ck.extra.clone(),
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializes")).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path, stem: &str) -> Result<Checkpoint> {
    let path = dir.join(format!("{stem}.json"));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = CheckpointManifest::from_json_slice(&bytes)?;
    let mut params = ParamStore::new(manifest.seed);
    let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
    for entry in &manifest.tensors {
        let t = read_tensor(&dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: shape {:?}, manifest says {:?}",
                entry.file,
                t.shape(),
                entry.shape
            )));
        }
        if let Some(name) = entry.name.strip_prefix("adam.m.") {
            m.insert(name.to_string(), t.into_data());
        } else if let Some(name) = entry.name.strip_prefix("adam.v.") {
            v.insert(name.to_string(), t.into_data());
        } else {
            params.insert(&entry.name, t);
        }
    }
    let adam = manifest.adam.map(|a| Adam::restore(a.lr, a.step_count, m, v));
    Ok(Checkpoint {
        params,
        adam,
        epoch: manifest.epoch,
        extra: manifest.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Init;

    #[test]
    fn round_trip_with_adam_state() {
        let mut p = ParamStore::new(4);
        p.declare("w", &[2, 3], Init::Glorot).unwrap();
        p.declare("b", &[3], Init::Constant(0.5)).unwrap();
        let mut adam = Adam::new(0.01);
        for (_, t) in p.iter_mut() {
            let g = vec![0.25; t.len()];
            t.set_grad(g).unwrap();
        }
        adam.step(&mut p).unwrap();
        p.round_to_f32();
        adam.round_to_f32();
        let ck = Checkpoint {
            params: p.clone(),
            adam: Some(adam.clone()),
            epoch: 3,
            extra: serde_json::json!({"d": 2}),
        };
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), "net", &ck).unwrap();
        let back = load(dir.path(), "net").unwrap();
        assert!(back.params.values_equal(&p));
        assert_eq!(back.adam.unwrap(), adam);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.extra["d"], 2);
    }

    #[test]
    fn manifest_validation() {
        assert!(matches!(
            CheckpointManifest::from_json_slice(b"{"),
            Err(Error::Parse { .. })
        ));
        let bad = br#"{"format":"other","seed":0,"epoch":0,"tensors":[]}"#;
        assert!(matches!(
            CheckpointManifest::from_json_slice(bad),
            Err(Error::Validation(_))
        ));
        let escape = br#"{"format":"ordcap-checkpoint-v1","seed":0,"epoch":0,
            "tensors":[{"name":"w","file":"../w.ocf","shape":[1]}]}"#;
        assert!(matches!(
            CheckpointManifest::from_json_slice(escape),
            Err(Error::Validation(_))
        ));
    }
}
