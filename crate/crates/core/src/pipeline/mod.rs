//! Stage orchestration. Each stage reads its upstream artifacts from disk and
//! writes its own into `work_dir/<stage>/<key>/`, where the key hashes the
//! corpus manifest, the config values the stage and its upstreams depend on,
//! and the seed.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use config::{PipelineConfig, Profile};

use crate::checkpoint::{self, Checkpoint};
use crate::corpus::{read_tensor, write_tensor, CorpusManifest, ImageFeatures, Split, Vocabulary};
use crate::decoder::{
    mu_sweep, AttentionTrace, Decoder, DecoderMode, DecoderSample, DecoderTrainer, GenerateOptions, GuideInput,
    SweepRow,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::numerics::Tensor;
use crate::ordernet::{caption_recall, OrderNet, OrderSample, OrderTrainer};
use crate::topics::{
    classifier_train, eval_prf, lda_train, threshold_at, threshold_topics, Prf, TopicClassifier, DECISION_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "lda")]
    Lda,
    #[serde(rename = "topic-clf")]
    TopicClf,
    #[serde(rename = "ordernet")]
    OrderNet,
    #[serde(rename = "decoder")]
    Decoder,
    #[serde(rename = "eval")]
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Lda,
        Stage::TopicClf,
        Stage::OrderNet,
        Stage::Decoder,
        Stage::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Lda => "lda",
            Stage::TopicClf => "topic-clf",
            Stage::OrderNet => "ordernet",
            Stage::Decoder => "decoder",
            Stage::Eval => "eval",
        }
    }

    /// The stage this one reads from; the decoder skips the ordernet in
    /// topic mode.
    pub fn upstream(self, mode: DecoderMode) -> Option<Stage> {
        match self {
            Stage::Lda => None,
            Stage::TopicClf => Some(Stage::Lda),
            Stage::OrderNet => Some(Stage::TopicClf),
            Stage::Decoder if mode.uses_embeddings() => Some(Stage::OrderNet),
            Stage::Decoder => Some(Stage::TopicClf),
            Stage::Eval => Some(Stage::Decoder),
        }
    }

    /// Config keys whose values change this stage's outputs.
    fn keys(self) -> &'static [&'static str] {
        match self {
            Stage::Lda => &[
                "seed",
                "n_topics",
                "vocab_cap",
                "lda_iters",
                "lda_alpha",
                "lda_beta",
                "min_count",
            ],
            Stage::TopicClf => &[
                "d_fc",
                "d_loc",
                "grid_n",
                "clf_layers",
                "clf_hidden",
                "clf_lr",
                "clf_momentum",
                "clf_plateau_factor",
                "clf_plateau_patience",
                "clf_epochs",
                "clf_batch",
            ],
            Stage::OrderNet => &[
                "d_emb",
                "d_gru",
                "oe_d_word",
                "margin",
                "embed_map",
                "oe_lr",
                "oe_batch",
                "oe_epochs",
                "max_len",
            ],
            Stage::Decoder => &[
                "mode",
                "max_len",
                "d_h",
                "d_word",
                "d_down",
                "d_att",
                "mlp_width",
                "z_order",
                "lr",
                "batch",
                "epochs",
            ],
            Stage::Eval => &[],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown stage `{s}` (lda|topic-clf|ordernet|decoder|eval)")))
    }
}

const META: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: Stage,
    pub key: String,
    pub seed: u64,
    pub upstream: Option<(Stage, String)>,
    pub config: Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A config bound to its corpus, with stage keys resolved.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub manifest: CorpusManifest,
    corpus_hash: String,
}

impl Pipeline {
    pub fn open(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let bytes = fs::read(&cfg.corpus).map_err(|e| Error::io(&cfg.corpus, e))?;
        let base = cfg.corpus.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = CorpusManifest::from_json_slice(&bytes)?.with_base_dir(base);
        Ok(Self {
            cfg: cfg.clone(),
            manifest,
            corpus_hash: hex(&Sha256::digest(&bytes)),
        })
    }

    pub fn key(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        h.update(stage.as_str());
        h.update([0]);
        match stage.upstream(self.cfg.mode) {
            Some(up) => h.update(self.key(up)),
            None => h.update(&self.corpus_hash),
        }
        h.update([0]);
        h.update(self.cfg.subset(stage.keys()).to_string());
        hex(&h.finalize())[..16].to_string()
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.cfg.work_dir.join(stage.as_str()).join(self.key(stage))
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stage_dir(stage).join(META).is_file()
    }

    /// Directory of a finished stage, or a dependency error naming it.
    pub fn require(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.join(META).is_file() {
            Ok(dir)
        } else {
            Err(Error::Dependency {
                stage: stage.as_str().into(),
                detail: format!("no finished artifacts at {}", dir.display()),
            })
        }
    }

    /// Runs one stage. Its upstream must already be on disk. Outputs are
    /// staged in a scratch directory and moved into place once complete.
    pub fn run_stage(&self, stage: Stage, log: &mut dyn FnMut(String)) -> Result<PathBuf> {
        let upstream = match stage.upstream(self.cfg.mode) {
            Some(up) => Some((up, self.require(up)?)),
            None => None,
        };
        let dir = self.stage_dir(stage);
        let scratch = dir.with_extension("partial");
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
        }
        fs::create_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
        let outcome = match stage {
            Stage::Lda => self.run_lda(&scratch),
            Stage::TopicClf => self.run_topic_clf(&scratch, log),
            Stage::OrderNet => self.run_ordernet(&scratch, log),
            Stage::Decoder => self.run_decoder(&scratch, log),
            Stage::Eval => self.run_eval(&scratch),
        };
        if let Err(e) = outcome {
            let _ = fs::remove_dir_all(&scratch);
            return Err(e);
        }
        let meta = StageMeta {
            stage,
            key: self.key(stage),
            seed: self.cfg.seed,
            upstream: upstream.map(|(up, _)| (up, self.key(up))),
            config: self.cfg.subset(stage.keys()),
        };
        write_text(
            &scratch.join(META),
            &serde_json::to_string_pretty(&meta).expect("serializes"),
        )?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::rename(&scratch, &dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    /// Runs `stage` after any missing upstream stages, reusing finished ones.
    pub fn run_through(&self, stage: Stage, log: &mut dyn FnMut(String)) -> Result<PathBuf> {
        if let Some(up) = stage.upstream(self.cfg.mode) {
            if !self.is_complete(up) {
                self.run_through(up, log)?;
            }
        }
        self.run_stage(stage, log)
    }

    fn load_features(&self) -> Result<Vec<ImageFeatures>> {
        self.manifest
            .load_all_features(self.cfg.d_fc, self.cfg.grid_n, self.cfg.d_loc)
    }

    fn documents(&self, indices: &[usize]) -> Vec<String> {
        let caps = self.manifest.captions_by_image();
        indices.iter().map(|&i| caps[i].join("\n")).collect()
    }

    fn run_lda(&self, out: &Path) -> Result<()> {
        let train = self.manifest.indices_in(Split::Train);
        if train.is_empty() {
            return Err(Error::Data("corpus has no training images".into()));
        }
        let lda = lda_train(&self.documents(&train), &self.cfg.lda())?;
        lda.save(out)?;
        // held-out images get fold-in estimates so topic-eval has gold labels
        let all: Vec<usize> = (0..self.manifest.images.len()).collect();
        let held: Vec<usize> = all.iter().copied().filter(|i| !train.contains(i)).collect();
        let inferred = lda.infer(&self.documents(&held), self.cfg.lda_iters, self.cfg.seed)?;
        let k = self.cfg.n_topics;
        let mut rows = vec![Vec::new(); all.len()];
        for (r, &i) in train.iter().enumerate() {
            rows[i] = lda.doc_topic.row(r).to_vec();
        }
        for (r, &i) in held.iter().enumerate() {
            rows[i] = inferred.row(r).to_vec();
        }
        write_tensor(
            &out.join("doc_topic_all.ocf"),
            &Tensor::matrix(all.len(), k, rows.concat())?,
        )?;
        let caps = self.manifest.captions_by_image();
        let vocab = Vocabulary::build(
            train.iter().flat_map(|&i| caps[i].iter().copied()),
            self.cfg.min_count,
            None,
        )?;
        write_text(&out.join("vocab.json"), &vocab.to_json())
    }

    fn run_topic_clf(&self, out: &Path, log: &mut dyn FnMut(String)) -> Result<()> {
        let lda_dir = self.require(Stage::Lda)?;
        let doc_topic = read_tensor(&lda_dir.join("doc_topic_all.ocf"))?;
        let features = self.load_features()?;
        check_rows(&doc_topic, features.len(), self.cfg.n_topics, "doc_topic_all.ocf")?;
        let train = self.manifest.indices_in(Split::Train);
        let x: Vec<Tensor> = train.iter().map(|&i| features[i].fc.clone()).collect();
        let y: Vec<Vec<u8>> = train.iter().map(|&i| threshold_topics(doc_topic.row(i))).collect();
        let (clf, curve) = classifier_train(&x, &y, self.cfg.n_topics, &self.cfg.classifier())?;
        for (e, loss) in curve.iter().enumerate() {
            log(format!("stage=topic-clf epoch={} loss={loss}", e + 1));
        }
        let ck = Checkpoint {
            params: clf.params.clone(),
            adam: None,
            epoch: curve.len(),
            extra: json!({ "d_in": clf.d_in, "n_topics": clf.n_topics, "layers": clf.layers }),
        };
        checkpoint::save(out, "classifier", &ck)?;
        let probs = predict_all(&clf, &features)?;
        write_tensor(&out.join("topics.ocf"), &probs)?;
        write_text(
            &out.join("loss.json"),
            &serde_json::to_string(&curve).expect("serializes"),
        )
    }

    fn topic_probs(&self) -> Result<Tensor> {
        let dir = self.require(Stage::TopicClf)?;
        let probs = read_tensor(&dir.join("topics.ocf"))?;
        check_rows(&probs, self.manifest.images.len(), self.cfg.n_topics, "topics.ocf")?;
        Ok(probs)
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        let path = self.require(Stage::Lda)?.join("vocab.json");
        Vocabulary::from_json_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)
    }

    fn order_samples(&self, features: &[ImageFeatures], indices: &[usize]) -> Result<Vec<OrderSample>> {
        let probs = self.topic_probs()?;
        let caps = self.manifest.captions_by_image();
        let pick = |v: &[ImageFeatures]| indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let topics: Vec<Tensor> = indices
            .iter()
            .map(|&i| Tensor::vector(probs.row(i).to_vec()))
            .collect::<Result<_>>()?;
        let captions: Vec<Vec<&str>> = indices.iter().map(|&i| caps[i].clone()).collect();
        OrderSample::build_all(&pick(features), &captions, &topics, &self.vocab()?, self.cfg.max_len)
    }

    fn run_ordernet(&self, out: &Path, log: &mut dyn FnMut(String)) -> Result<()> {
        let features = self.load_features()?;
        let train = self.manifest.indices_in(Split::Train);
        let data = self.order_samples(&features, &train)?;
        let vocab = self.vocab()?;
        let cfg = self.cfg.ordernet();
        let mut trainer = OrderTrainer::new(&data, vocab.len(), &cfg)?;
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let loss = trainer.run_epoch(&data)?;
            log(format!("stage=ordernet epoch={} loss={loss}", trainer.epoch));
            losses.push(loss);
        }
        checkpoint::save(out, "ordernet", &trainer.checkpoint())?;
        let all: Vec<usize> = (0..features.len()).collect();
        let everything = self.order_samples(&features, &all)?;
        let fcs: Vec<&Tensor> = everything.iter().map(|s| &s.fc).collect();
        let topics: Vec<&Tensor> = everything.iter().map(|s| &s.topics).collect();
        write_tensor(&out.join("image_emb.ocf"), &stack(&trainer.net.embed_images(&fcs)?)?)?;
        write_tensor(&out.join("topic_emb.ocf"), &stack(&trainer.net.embed_topics(&topics)?)?)?;
        write_text(
            &out.join("loss.json"),
            &serde_json::to_string(&losses).expect("serializes"),
        )
    }

    pub fn load_ordernet(&self) -> Result<OrderNet> {
        let dir = self.require(Stage::OrderNet)?;
        Ok(OrderTrainer::from_checkpoint(checkpoint::load(&dir, "ordernet")?, &self.cfg.ordernet())?.net)
    }

    /// Decoder training or evaluation samples for the images in `indices`.
    fn decoder_samples(&self, features: &[ImageFeatures], indices: &[usize]) -> Result<Vec<DecoderSample>> {
        let n = features.len();
        let guides: Vec<GuideInput> = if self.cfg.mode.uses_embeddings() {
            let dir = self.require(Stage::OrderNet)?;
            let (img, top) = (
                read_tensor(&dir.join("image_emb.ocf"))?,
                read_tensor(&dir.join("topic_emb.ocf"))?,
            );
            check_rows(&img, n, self.cfg.d_emb, "image_emb.ocf")?;
            check_rows(&top, n, self.cfg.d_emb, "topic_emb.ocf")?;
            indices
                .iter()
                .map(|&i| {
                    Ok(GuideInput {
                        image: Tensor::vector(img.row(i).to_vec())?,
                        topic: Tensor::vector(top.row(i).to_vec())?,
                    })
                })
                .collect::<Result<_>>()?
        } else {
            let probs = self.topic_probs()?;
            indices
                .iter()
                .map(|&i| {
                    Ok(GuideInput {
                        image: features[i].fc.clone(),
                        topic: Tensor::vector(probs.row(i).to_vec())?,
                    })
                })
                .collect::<Result<_>>()?
        };
        let vocab = self.vocab()?;
        let caps = self.manifest.captions_by_image();
        indices
            .iter()
            .zip(guides)
            .map(|(&i, guide)| {
                Ok(DecoderSample {
                    features: features[i].clone(),
                    guide,
                    captions: caps[i]
                        .iter()
                        .map(|c| vocab.encode(c, self.cfg.max_len))
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    }

    fn run_decoder(&self, out: &Path, log: &mut dyn FnMut(String)) -> Result<()> {
        let features = self.load_features()?;
        let data = self.decoder_samples(&features, &self.manifest.indices_in(Split::Train))?;
        let vocab = self.vocab()?;
        let cfg = self.cfg.decoder();
        let mut trainer = DecoderTrainer::new(&data, vocab.len(), &cfg)?;
        let mut lines = String::new();
        for _ in 0..cfg.epochs {
            let e = trainer.run_epoch(&data)?;
            log(format!(
                "stage=decoder epoch={} loss={} lambda_eff={} mu_eff={}",
                e.epoch, e.loss, e.lambda_eff, e.mu_eff
            ));
            lines.push_str(&serde_json::to_string(&e).expect("serializes"));
            lines.push('\n');
        }
        checkpoint::save(out, "decoder", &trainer.checkpoint())?;
        write_text(&out.join("log.jsonl"), &lines)
    }

    pub fn load_decoder(&self) -> Result<Decoder> {
        let dir = self.require(Stage::Decoder)?;
        Ok(DecoderTrainer::from_checkpoint(checkpoint::load(&dir, "decoder")?, &self.cfg.decoder())?.decoder)
    }

    /// Decoder inputs and reference captions for one split.
    pub fn split_samples(&self, split: Split) -> Result<(Vec<usize>, Vec<DecoderSample>, Vec<Vec<String>>)> {
        let indices = self.manifest.indices_in(split);
        if indices.is_empty() {
            return Err(Error::Data(format!("split {split:?} has no images")));
        }
        let features = self.load_features()?;
        let samples = self.decoder_samples(&features, &indices)?;
        let caps = self.manifest.captions_by_image();
        let refs = indices
            .iter()
            .map(|&i| caps[i].iter().map(|c| c.to_string()).collect())
            .collect();
        Ok((indices, samples, refs))
    }

    /// Greedy captions (and attention traces) for every image of a split.
    pub fn sample(&self, split: Split, opts: &GenerateOptions) -> Result<Vec<(String, String, AttentionTrace)>> {
        let decoder = self.load_decoder()?;
        let vocab = self.vocab()?;
        let (indices, samples, _) = self.split_samples(split)?;
        let images: Vec<_> = samples.iter().map(|s| &s.features).collect();
        let guides: Vec<_> = samples.iter().map(|s| &s.guide).collect();
        let out = decoder.generate_all(&images, &guides, opts)?;
        Ok(indices
            .iter()
            .zip(out)
            .map(|(&i, (seq, trace))| (self.manifest.images[i].image_id.clone(), vocab.decode(seq.ids()), trace))
            .collect())
    }

    fn run_eval(&self, out: &Path) -> Result<()> {
        let opts = GenerateOptions {
            max_len: self.cfg.max_len,
            mu: None,
        };
        let (_, _, refs) = self.split_samples(Split::Test)?;
        let sampled = self.sample(Split::Test, &opts)?;
        let captions: Vec<&str> = sampled.iter().map(|(_, c, _)| c.as_str()).collect();
        let ids: Vec<&str> = sampled.iter().map(|(id, _, _)| id.as_str()).collect();
        let report = evaluate(&captions, &refs)?;
        write_text(&out.join("report.json"), &report.to_json())?;
        write_text(&out.join("per_image.csv"), &report.per_image_csv(&ids)?)?;
        let rows: Vec<Value> = sampled
            .iter()
            .map(|(id, c, _)| json!({ "image_id": id, "caption": c }))
            .collect();
        write_text(
            &out.join("captions.json"),
            &serde_json::to_string_pretty(&rows).expect("serializes"),
        )
    }

    pub fn load_report(&self) -> Result<EvalReport> {
        let path = self.require(Stage::Eval)?.join("report.json");
        serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?).map_err(Error::from_json)
    }

    /// Classifier decisions against thresholded LDA topics on one split.
    pub fn topic_eval(&self, split: Split, beta: f64) -> Result<Prf> {
        let probs = self.topic_probs()?;
        let gold = read_tensor(&self.require(Stage::Lda)?.join("doc_topic_all.ocf"))?;
        check_rows(
            &gold,
            self.manifest.images.len(),
            self.cfg.n_topics,
            "doc_topic_all.ocf",
        )?;
        let idx = self.manifest.indices_in(split);
        if idx.is_empty() {
            return Err(Error::Data(format!("split {split:?} has no images")));
        }
        let pred: Vec<Vec<u8>> = idx
            .iter()
            .map(|&i| threshold_at(probs.row(i), DECISION_THRESHOLD))
            .collect();
        let gold: Vec<Vec<u8>> = idx.iter().map(|&i| threshold_topics(gold.row(i))).collect();
        eval_prf(&pred, &gold, beta)
    }

    /// Caption-retrieval recall at each `k` on one split.
    pub fn embed_eval(&self, split: Split, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
        let net = self.load_ordernet()?;
        let features = self.load_features()?;
        let samples = self.order_samples(&features, &self.manifest.indices_in(split))?;
        if samples.is_empty() {
            return Err(Error::Data(format!("split {split:?} has no images")));
        }
        Ok(ks.iter().copied().zip(caption_recall(&net, &samples, ks)?).collect())
    }

    pub fn mu_sweep(&self, split: Split, mu_values: &[f64]) -> Result<Vec<SweepRow>> {
        let decoder = self.load_decoder()?;
        let (_, samples, refs) = self.split_samples(split)?;
        mu_sweep(&decoder, &samples, &refs, &self.vocab()?, mu_values, self.cfg.max_len)
    }
}

fn predict_all(clf: &TopicClassifier, features: &[ImageFeatures]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = features
        .iter()
        .map(|f| Ok(clf.probs(&f.fc)?.into_data()))
        .collect::<Result<_>>()?;
    Tensor::matrix(rows.len(), clf.n_topics, rows.concat())
}

fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::matrix(rows.len(), rows.first().map_or(0, Vec::len), rows.concat())
}

fn check_rows(t: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
    if t.shape() != [rows, cols] {
        return Err(Error::Format(format!(
            "{what} has shape {:?}, expected [{rows}, {cols}]",
            t.shape()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs `stage` for `cfg`; see [`Pipeline::run_stage`].
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<PathBuf> {
    Pipeline::open(cfg)?.run_stage(stage, &mut |_| {})
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: DecoderMode,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub const CSV_HEADER: &'static str = "mode,bleu1,bleu4,rouge_l,cider";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.mode, r.bleu1, r.bleu4, r.rouge_l, r.cider
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializes")
    }

    /// Writes `ablation.csv` and `ablation.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("ablation.csv"), &self.to_csv())?;
        write_text(&dir.join("ablation.json"), &self.to_json())
    }
}

/// Trains and evaluates one decoder per mode on shared upstream artifacts.
/// Rows follow the order of `modes`.
pub fn ablation(cfg: &PipelineConfig, modes: &[DecoderMode], log: &mut dyn FnMut(String)) -> Result<AblationReport> {
    if modes.is_empty() {
        return Err(Error::Usage("ablation needs at least one mode".into()));
    }
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let p = Pipeline::open(&PipelineConfig { mode, ..cfg.clone() })?;
        if !p.is_complete(Stage::Eval) {
            p.run_through(Stage::Eval, log)?;
        }
        let r = p.load_report()?;
        log(format!(
            "stage=ablation mode={mode} bleu1={} bleu4={}",
            r.bleu[0], r.bleu[3]
        ));
        rows.push(AblationRow {
            mode,
            bleu1: r.bleu[0],
            bleu4: r.bleu[3],
            rouge_l: r.rouge_l,
            cider: r.cider,
        });
    }
    Ok(AblationReport { rows })
}
