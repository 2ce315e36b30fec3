use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::DEFAULT_MAX_LEN;
use crate::decoder::{DecoderConfig, DecoderMode, ZOrder};
use crate::error::{Error, Result};
use crate::ordernet::{EmbedMap, OrderNetConfig, DEFAULT_MARGIN};
use crate::topics::{ClassifierConfig, LdaConfig};

/// Base values a configuration starts from before file and flag overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    /// Full-size constants: ResNet-152 features, 80 topics, 1024-wide embeddings.
    #[default]
    Paper,
    /// Small dims matching the synthetic corpus defaults.
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Usage(format!("unknown profile `{other}` (paper|desk)"))),
        }
    }
}

/// Every tunable of the pipeline as one flat JSON object. Keys map
/// one-to-one onto CLI flags (`d_emb` ↔ `--d-emb`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Path of the corpus `manifest.json`.
    pub corpus: PathBuf,
    /// Root under which stage artifacts are written.
    pub work_dir: PathBuf,
    pub seed: u64,
    pub mode: DecoderMode,

    pub d_fc: usize,
    pub d_loc: usize,
    pub grid_n: usize,

    pub n_topics: usize,
    pub vocab_cap: usize,
    pub lda_iters: usize,
    /// `null` means `50 / n_topics`.
    pub lda_alpha: Option<f64>,
    pub lda_beta: f64,

    pub clf_layers: usize,
    pub clf_hidden: usize,
    pub clf_lr: f64,
    pub clf_momentum: f64,
    pub clf_plateau_factor: f64,
    pub clf_plateau_patience: f64,
    pub clf_epochs: usize,
    /// `null` trains full-batch.
    pub clf_batch: Option<usize>,

    pub d_emb: usize,
    pub d_gru: usize,
    pub oe_d_word: usize,
    pub margin: f64,
    pub embed_map: EmbedMap,
    pub oe_lr: f64,
    pub oe_batch: usize,
    pub oe_epochs: usize,

    /// Minimum training-caption count for a word to enter the decoder vocabulary.
    pub min_count: usize,
    pub max_len: usize,
    pub d_h: usize,
    pub d_word: usize,
    pub d_down: usize,
    pub d_att: usize,
    pub mlp_width: usize,
    pub z_order: ZOrder,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let lda = LdaConfig::default();
        let clf = ClassifierConfig::default();
        let oe = OrderNetConfig::default();
        let dec = DecoderConfig::default();
        Self {
            corpus: PathBuf::from("corpus/manifest.json"),
            work_dir: PathBuf::from("runs"),
            seed: 0,
            mode: DecoderMode::TOeAtt,
            d_fc: 2048,
            d_loc: 512,
            grid_n: 49,
            n_topics: lda.n_topics,
            vocab_cap: lda.vocab_cap,
            lda_iters: lda.iters,
            lda_alpha: lda.alpha,
            lda_beta: lda.beta,
            clf_layers: clf.layers,
            clf_hidden: clf.hidden,
            clf_lr: clf.lr,
            clf_momentum: clf.momentum,
            clf_plateau_factor: clf.plateau_factor,
            clf_plateau_patience: clf.plateau_patience,
            clf_epochs: clf.epochs,
            clf_batch: clf.batch_size,
            d_emb: oe.d_emb,
            d_gru: oe.d_gru,
            oe_d_word: oe.d_word,
            margin: DEFAULT_MARGIN,
            embed_map: oe.embed_map,
            oe_lr: oe.lr,
            oe_batch: oe.batch_size,
            oe_epochs: oe.epochs,
            min_count: 5,
            max_len: DEFAULT_MAX_LEN,
            d_h: dec.d_h,
            d_word: dec.d_word,
            d_down: dec.d_down,
            d_att: dec.d_att,
            mlp_width: dec.mlp,
            z_order: dec.z_order,
            lr: dec.lr,
            batch: dec.batch_size,
            epochs: dec.epochs,
        }
    }
}

impl PipelineConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::default(),
            Profile::Desk => Self {
                d_fc: 32,
                d_loc: 24,
                grid_n: 4,
                n_topics: 3,
                clf_hidden: 32,
                clf_epochs: 60,
                d_emb: 16,
                d_gru: 16,
                oe_d_word: 16,
                oe_lr: 0.01,
                oe_batch: 16,
                oe_epochs: 100,
                min_count: 1,
                d_h: 32,
                d_word: 16,
                d_down: 8,
                d_att: 16,
                mlp_width: 64,
                lr: 0.01,
                batch: 32,
                epochs: 30,
                ..Self::default()
            },
        }
    }

    /// Builds a config from a profile, then a flat JSON document, then
    /// `key=value` overrides, later layers winning. Override values for
    /// string keys are taken verbatim; others are read as JSON.
    pub fn layered(profile: Profile, file: Option<&[u8]>, overrides: &[(String, String)]) -> Result<Self> {
        let mut obj = match serde_json::to_value(Self::profile(profile)).expect("serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if let Some(bytes) = file {
            let doc: Value = serde_json::from_slice(bytes).map_err(Error::from_json)?;
            let Value::Object(doc) = doc else {
                return Err(Error::Validation("config file must be a JSON object".into()));
            };
            merge(&mut obj, doc)?;
        }
        let flags: Map<String, Value> = overrides
            .iter()
            .map(|(k, v)| {
                let parsed = match obj.get(k) {
                    Some(Value::String(_)) => Value::String(v.clone()),
                    _ => serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone())),
                };
                (k.clone(), parsed)
            })
            .collect();
        merge(&mut obj, flags)?;
        let cfg: Self =
            serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        Self::layered(Profile::Paper, Some(bytes), &[])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializes")
    }

    /// Names of every config key, sorted.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()).expect("serializes") {
            Value::Object(m) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_fc", self.d_fc),
            ("d_loc", self.d_loc),
            ("grid_n", self.grid_n),
            ("n_topics", self.n_topics),
            ("vocab_cap", self.vocab_cap),
            ("clf_layers", self.clf_layers),
            ("clf_hidden", self.clf_hidden),
            ("d_emb", self.d_emb),
            ("d_gru", self.d_gru),
            ("oe_d_word", self.oe_d_word),
            ("oe_batch", self.oe_batch),
            ("min_count", self.min_count),
            ("d_h", self.d_h),
            ("d_word", self.d_word),
            ("d_down", self.d_down),
            ("d_att", self.d_att),
            ("mlp_width", self.mlp_width),
            ("batch", self.batch),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{k} must be ≥ 1")));
        }
        if self.clf_batch == Some(0) {
            return Err(Error::Validation("clf_batch must be ≥ 1".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Validation(
                "max_len must leave room for <start> and <end>".into(),
            ));
        }
        let positive = [
            ("margin", self.margin),
            ("lda_beta", self.lda_beta),
            ("lda_alpha", self.lda_alpha.unwrap_or(1.0)),
            ("clf_lr", self.clf_lr),
            ("clf_plateau_patience", self.clf_plateau_patience),
            ("oe_lr", self.oe_lr),
            ("lr", self.lr),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Validation(format!("{k} must be a positive number, got {v}")));
        }
        if !(0.0..1.0).contains(&self.clf_momentum) {
            return Err(Error::Validation("clf_momentum must lie in [0, 1)".into()));
        }
        if !(self.clf_plateau_factor > 0.0 && self.clf_plateau_factor < 1.0) {
            return Err(Error::Validation("clf_plateau_factor must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn lda(&self) -> LdaConfig {
        LdaConfig {
            n_topics: self.n_topics,
            iters: self.lda_iters,
            alpha: self.lda_alpha,
            beta: self.lda_beta,
            vocab_cap: self.vocab_cap,
            seed: self.seed,
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            layers: self.clf_layers,
            hidden: self.clf_hidden,
            lr: self.clf_lr,
            momentum: self.clf_momentum,
            plateau_factor: self.clf_plateau_factor,
            plateau_patience: self.clf_plateau_patience,
            epochs: self.clf_epochs,
            batch_size: self.clf_batch,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn ordernet(&self) -> OrderNetConfig {
        OrderNetConfig {
            d_emb: self.d_emb,
            d_gru: self.d_gru,
            d_word: self.oe_d_word,
            margin: self.margin,
            lr: self.oe_lr,
            batch_size: self.oe_batch,
            epochs: self.oe_epochs,
            seed: self.seed.wrapping_add(2),
            embed_map: self.embed_map,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            mode: self.mode,
            z_order: self.z_order,
            d_h: self.d_h,
            d_word: self.d_word,
            d_down: self.d_down,
            d_att: self.d_att,
            mlp: self.mlp_width,
            lr: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            seed: self.seed.wrapping_add(3),
            max_len: self.max_len,
        }
    }

    /// The values of `keys` as a JSON object with sorted keys.
    pub(crate) fn subset(&self, keys: &[&str]) -> Value {
        let full = serde_json::to_value(self).expect("serializes");
        Value::Object(keys.iter().map(|&k| (k.to_string(), full[k].clone())).collect())
    }
}

fn merge(into: &mut Map<String, Value>, from: Map<String, Value>) -> Result<()> {
    for (k, v) in from {
        if !into.contains_key(&k) {
            return Err(Error::Usage(format!("unknown config key `{k}`")));
        }
        into.insert(k, v);
    }
    Ok(())
}
