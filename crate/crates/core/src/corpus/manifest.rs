use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{load_features, ImageFeatures};
use crate::error::{Error, Result};

/// Captions kept per image; later captions in file order are dropped.
pub const MAX_CAPTIONS_PER_IMAGE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub image_id: String,
    pub fc: String,
    pub spatial: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub image_id: String,
    pub caption: String,
}

/// Images, their captions and split assignment. Feature paths are stored as
/// written and resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl CorpusManifest {
    /// Validates references and trims captions beyond the per-image limit.
    pub fn new(images: Vec<ImageEntry>, annotations: Vec<Annotation>) -> Result<Self> {
        let mut m = Self {
            images,
            annotations,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let raw: CorpusManifest = serde_json::from_slice(bytes).map_err(Error::from_json)?;
        Self::new(raw.images, raw.annotations)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    fn validate(&mut self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut dupes = Vec::new();
        for img in &self.images {
            if !ids.insert(img.image_id.as_str()) {
                dupes.push(img.image_id.clone());
            }
        }
        if !dupes.is_empty() {
            return Err(Error::Validation(format!("duplicate image ids: {}", dupes.join(", "))));
        }
        let unknown: BTreeSet<&str> = self
            .annotations
            .iter()
            .map(|a| a.image_id.as_str())
            .filter(|id| !ids.contains(id))
            .collect();
        if !unknown.is_empty() {
            let list: Vec<&str> = unknown.into_iter().collect();
            return Err(Error::Validation(format!(
                "annotations reference unknown image ids: {}",
                list.join(", ")
            )));
        }
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        self.annotations.retain(|a| {
            let n = seen.entry(a.image_id.clone()).or_default();
            *n += 1;
            *n <= MAX_CAPTIONS_PER_IMAGE
        });
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::from_json_slice(&bytes)?.with_base_dir(dir))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn captions_of(&self, image_id: &str) -> Vec<&str> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .map(|a| a.caption.as_str())
            .collect()
    }

    /// Captions grouped per image, in manifest image order.
    pub fn captions_by_image(&self) -> Vec<Vec<&str>> {
        let index: BTreeMap<&str, usize> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| (img.image_id.as_str(), i))
            .collect();
        let mut out = vec![Vec::new(); self.images.len()];
        for a in &self.annotations {
            out[index[a.image_id.as_str()]].push(a.caption.as_str());
        }
        out
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, img)| img.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Loads every image's features, validating shapes against
    /// `[d_fc]` and `[grid_n × d_loc]`. Runs on the current rayon pool.
    pub fn load_all_features(&self, d_fc: usize, grid_n: usize, d_loc: usize) -> Result<Vec<ImageFeatures>> {
        use rayon::prelude::*;
        self.images
            .par_iter()
            .map(|img| {
                let fc = load_features(&self.resolve(&img.fc), &[d_fc])?;
                let spatial = load_features(&self.resolve(&img.spatial), &[grid_n, d_loc])?;
                ImageFeatures::new(fc, spatial)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(id: &str) -> String {
        format!(r#"{{"image_id":"{id}","fc":"{id}.fc","spatial":"{id}.sp","split":"train"}}"#)
    }

    fn caption(id: &str, i: usize) -> String {
        format!(r#"{{"image_id":"{id}","caption":"caption {i}"}}"#)
    }

    #[test]
    fn trims_to_five_captions_in_file_order() {
        let mut anns: Vec<String> = (0..5).map(|i| caption("a", i)).collect();
        anns.extend((0..7).map(|i| caption("b", i)));
        let json = format!(
            r#"{{"images":[{},{}],"annotations":[{}]}}"#,
            image("a"),
            image("b"),
            anns.join(",")
        );
        let m = CorpusManifest::from_json_slice(json.as_bytes()).unwrap();
        assert_eq!(m.images.len(), 2);
        assert_eq!(m.captions_of("a").len(), 5);
        let b = m.captions_of("b");
        assert_eq!(b, vec!["caption 0", "caption 1", "caption 2", "caption 3", "caption 4"]);
    }

    #[test]
    fn empty_annotations_are_valid() {
        let json = format!(r#"{{"images":[{}],"annotations":[]}}"#, image("a"));
        let m = CorpusManifest::from_json_slice(json.as_bytes()).unwrap();
        assert!(m.annotations.is_empty());
    }

    #[test]
    fn unknown_image_reference_names_the_id() {
        let json = format!(
            r#"{{"images":[{}],"annotations":[{}]}}"#,
            image("a"),
            caption("ghost", 0)
        );
        match CorpusManifest::from_json_slice(json.as_bytes()) {
            Err(Error::Validation(msg)) => assert!(msg.contains("ghost"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = CorpusManifest::from_json_slice(b"{\n  \"images\": [,]\n}").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn save_then_load_is_identity() {
        let json = format!(
            r#"{{"images":[{},{}],"annotations":[{},{}]}}"#,
            image("a"),
            image("b"),
            caption("a", 0),
            caption("b", 1)
        );
        let m = CorpusManifest::from_json_slice(json.as_bytes()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = CorpusManifest::load(&path).unwrap();
        assert_eq!(back.images, m.images);
        assert_eq!(back.annotations, m.annotations);
        assert_eq!(back.to_json(), m.to_json());
    }
}
