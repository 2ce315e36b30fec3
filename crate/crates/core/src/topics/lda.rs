//! Latent Dirichlet allocation by collapsed Gibbs sampling.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_tensor, tokenize, write_tensor, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Paper-scale defaults: 80 topics, 100 sweeps, top-5000 vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaConfig {
    pub n_topics: usize,
    pub iters: usize,
    /// Document-topic prior; `None` means `50 / K`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub vocab_cap: usize,
    pub seed: u64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        Self {
            n_topics: 80,
            iters: 100,
            alpha: None,
            beta: 0.01,
            vocab_cap: 5000,
            seed: 0,
        }
    }
}

impl LdaConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.n_topics as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub n_topics: usize,
    /// Word list; column `w` of `topic_word` is `words[w]`.
    pub words: Vec<String>,
    /// `[K × V]`, rows sum to 1.
    pub topic_word: Tensor,
    /// `[D × K]`, rows sum to 1.
    pub doc_topic: Tensor,
    pub alpha: f64,
    pub beta: f64,
    pub vocab_cap: usize,
}

/// Sampler state; exposed so invariants can be checked sweep by sweep.
#[derive(Debug, Clone)]
pub struct GibbsSampler {
    docs: Vec<Vec<usize>>,
    z: Vec<Vec<usize>>,
    doc_topic: Vec<Vec<usize>>,
    topic_word: Vec<Vec<usize>>,
    topic_total: Vec<usize>,
    alpha: f64,
    beta: f64,
    vocab: usize,
    rng: ChaCha8Rng,
}

impl GibbsSampler {
    pub fn new(docs: Vec<Vec<usize>>, vocab: usize, k: usize, alpha: f64, beta: f64, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::contract("LDA needs at least one topic"));
        }
        if docs.is_empty() || docs.iter().all(Vec::is_empty) {
            return Err(Error::Data("LDA corpus has no tokens".into()));
        }
        if let Some(d) = docs.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("document {d} is empty after vocabulary capping")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut doc_topic = vec![vec![0; k]; docs.len()];
        let mut topic_word = vec![vec![0; vocab]; k];
        let mut topic_total = vec![0; k];
        let z: Vec<Vec<usize>> = docs
            .iter()
            .enumerate()
            .map(|(d, doc)| {
                doc.iter()
                    .map(|&w| {
                        let t = rng.gen_range(0..k);
                        doc_topic[d][t] += 1;
                        topic_word[t][w] += 1;
                        topic_total[t] += 1;
                        t
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            docs,
            z,
            doc_topic,
            topic_word,
            topic_total,
            alpha,
            beta,
            vocab,
            rng,
        })
    }

    pub fn sweep(&mut self) {
        let k = self.topic_total.len();
        let vbeta = self.vocab as f64 * self.beta;
        let mut weights = vec![0.0; k];
        for d in 0..self.docs.len() {
            for i in 0..self.docs[d].len() {
                let w = self.docs[d][i];
                let old = self.z[d][i];
                self.doc_topic[d][old] -= 1;
                self.topic_word[old][w] -= 1;
                self.topic_total[old] -= 1;

                let mut total = 0.0;
                for (t, wt) in weights.iter_mut().enumerate() {
                    *wt = (self.doc_topic[d][t] as f64 + self.alpha) * (self.topic_word[t][w] as f64 + self.beta)
                        / (self.topic_total[t] as f64 + vbeta);
                    total += *wt;
                }
                let mut u = self.rng.gen::<f64>() * total;
                let mut new = k - 1;
                for (t, &wt) in weights.iter().enumerate() {
                    if u < wt {
                        new = t;
                        break;
                    }
                    u -= wt;
                }

                self.z[d][i] = new;
                self.doc_topic[d][new] += 1;
                self.topic_word[new][w] += 1;
                self.topic_total[new] += 1;
            }
        }
    }

    pub fn token_count(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    /// Sum of per-topic assignment counts; equals [`Self::token_count`].
    pub fn assigned_count(&self) -> usize {
        self.topic_total.iter().sum()
    }

    pub fn topic_word_counts(&self) -> &[Vec<usize>] {
        &self.topic_word
    }

    fn estimates(&self) -> Result<(Tensor, Tensor)> {
        let k = self.topic_total.len();
        let vbeta = self.vocab as f64 * self.beta;
        let mut phi = Vec::with_capacity(k * self.vocab);
        for t in 0..k {
            let denom = self.topic_total[t] as f64 + vbeta;
            phi.extend(self.topic_word[t].iter().map(|&c| (c as f64 + self.beta) / denom));
        }
        let kalpha = k as f64 * self.alpha;
        let mut theta = Vec::with_capacity(self.docs.len() * k);
        for (d, counts) in self.doc_topic.iter().enumerate() {
            let denom = self.docs[d].len() as f64 + kalpha;
            theta.extend(counts.iter().map(|&c| (c as f64 + self.alpha) / denom));
        }
        Ok((
            Tensor::matrix(k, self.vocab, phi)?,
            Tensor::matrix(self.docs.len(), k, theta)?,
        ))
    }
}

/// One document per entry; the documents are concatenated caption text.
pub fn lda_train(documents: &[String], cfg: &LdaConfig) -> Result<LdaModel> {
    if documents.is_empty() {
        return Err(Error::Data("LDA corpus has no documents".into()));
    }
    let vocab = Vocabulary::build(documents.iter().map(String::as_str), 1, Some(cfg.vocab_cap))?;
    let words: Vec<String> = vocab.words().to_vec();
    let offset = crate::corpus::SPECIALS.len();
    let docs: Vec<Vec<usize>> = documents
        .iter()
        .map(|d| {
            tokenize(d)
                .iter()
                .filter_map(|t| vocab.get(t))
                .map(|i| i - offset)
                .collect()
        })
        .collect();
    let alpha = cfg.alpha();
    let mut sampler = GibbsSampler::new(docs, words.len(), cfg.n_topics, alpha, cfg.beta, cfg.seed)?;
    for _ in 0..cfg.iters {
        sampler.sweep();
    }
    let (topic_word, doc_topic) = sampler.estimates()?;
    Ok(LdaModel {
        n_topics: cfg.n_topics,
        words,
        topic_word,
        doc_topic,
        alpha,
        beta: cfg.beta,
        vocab_cap: cfg.vocab_cap,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LdaHeader {
    n_topics: usize,
    vocab_size: usize,
    n_docs: usize,
    alpha: f64,
    beta: f64,
    vocab_cap: usize,
    words: Vec<String>,
    topic_word: String,
    doc_topic: String,
}

fn renormalize_rows(t: Tensor) -> Result<Tensor> {
    let (rows, cols) = t.dims2();
    let mut data = t.into_data();
    for row in data.chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        if s <= 0.0 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Data("probability row is not a distribution".into()));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::matrix(rows, cols, data)
}

impl LdaModel {
    /// Top `n` word indices of a topic, most probable first.
    pub fn top_words(&self, topic: usize, n: usize) -> Vec<usize> {
        let row = self.topic_word.row(topic);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx.truncate(n);
        idx
    }

    /// Fold-in Gibbs sampling for unseen documents against the fixed
    /// topic-word table. Returns `[D × K]`; a document with no in-vocabulary
    /// token gets the uniform prior mean.
    pub fn infer(&self, documents: &[String], iters: usize, seed: u64) -> Result<Tensor> {
        let k = self.n_topics;
        let index: std::collections::HashMap<&str, usize> =
            self.words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(documents.len() * k);
        let mut weights = vec![0.0; k];
        for doc in documents {
            let words: Vec<usize> = tokenize(doc)
                .iter()
                .filter_map(|t| index.get(t.as_str()).copied())
                .collect();
            let mut counts = vec![0usize; k];
            let mut z: Vec<usize> = words
                .iter()
                .map(|_| {
                    let t = rng.gen_range(0..k);
                    counts[t] += 1;
                    t
                })
                .collect();
            for _ in 0..iters {
                for (i, &w) in words.iter().enumerate() {
                    counts[z[i]] -= 1;
                    let mut total = 0.0;
                    for (t, wt) in weights.iter_mut().enumerate() {
                        *wt = (counts[t] as f64 + self.alpha) * self.topic_word.row(t)[w];
                        total += *wt;
                    }
                    let mut u = rng.gen::<f64>() * total;
                    let mut new = k - 1;
                    for (t, &wt) in weights.iter().enumerate() {
                        if u < wt {
                            new = t;
                            break;
                        }
                        u -= wt;
                    }
                    z[i] = new;
                    counts[new] += 1;
                }
            }
            let denom = words.len() as f64 + k as f64 * self.alpha;
            theta.extend(counts.iter().map(|&c| (c as f64 + self.alpha) / denom));
        }
        Tensor::matrix(documents.len(), k, theta)
    }

    /// Writes `lda.json` plus two `OCF1` tensors into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tensor(&dir.join("lda_topic_word.ocf"), &self.topic_word)?;
        write_tensor(&dir.join("lda_doc_topic.ocf"), &self.doc_topic)?;
        let header = LdaHeader {
            n_topics: self.n_topics,
            vocab_size: self.words.len(),
            n_docs: self.doc_topic.dims2().0,
            alpha: self.alpha,
            beta: self.beta,
            vocab_cap: self.vocab_cap,
            words: self.words.clone(),
            topic_word: "lda_topic_word.ocf".into(),
            doc_topic: "lda_doc_topic.ocf".into(),
        };
        let path = dir.join("lda.json");
        fs::write(&path, serde_json::to_string_pretty(&header).expect("serializes")).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("lda.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let header = Self::parse_header(&bytes)?;
        let topic_word = read_tensor(&dir.join(&header.topic_word))?;
        let doc_topic = read_tensor(&dir.join(&header.doc_topic))?;
        if topic_word.shape() != [header.n_topics, header.vocab_size]
            || doc_topic.shape() != [header.n_docs, header.n_topics]
        {
            return Err(Error::Format("LDA tensors disagree with lda.json header".into()));
        }
        Ok(Self {
            n_topics: header.n_topics,
            words: header.words,
            topic_word: renormalize_rows(topic_word)?,
            doc_topic: renormalize_rows(doc_topic)?,
            alpha: header.alpha,
            beta: header.beta,
            vocab_cap: header.vocab_cap,
        })
    }

    fn parse_header(bytes: &[u8]) -> Result<LdaHeader> {
        let header: LdaHeader = serde_json::from_slice(bytes).map_err(Error::from_json)?;
        if header.n_topics == 0 || header.vocab_size == 0 || header.n_docs == 0 {
            return Err(Error::Validation("LDA header has a zero dimension".into()));
        }
        if header.words.len() != header.vocab_size {
            return Err(Error::Validation(format!(
                "LDA header lists {} words for vocab_size {}",
                header.words.len(),
                header.vocab_size
            )));
        }
        if !(header.alpha > 0.0 && header.beta > 0.0) {
            return Err(Error::Validation("LDA priors must be positive".into()));
        }
        Ok(header)
    }

    /// Validates an `lda.json` header without touching tensor files.
    pub fn check_header(bytes: &[u8]) -> Result<()> {
        Self::parse_header(bytes).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs() -> Vec<String> {
        vec![
            "apple pear apple plum".into(),
            "car bus car train".into(),
            "apple plum pear pear".into(),
            "bus train car bus".into(),
        ]
    }

    #[test]
    fn single_topic_gives_all_ones() {
        let cfg = LdaConfig {
            n_topics: 1,
            iters: 5,
            ..LdaConfig::default()
        };
        let m = lda_train(&docs(), &cfg).unwrap();
        assert!(m.doc_topic.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn fold_in_follows_training_topics() {
        let cfg = LdaConfig {
            n_topics: 2,
            iters: 50,
            alpha: Some(0.1),
            seed: 3,
            ..LdaConfig::default()
        };
        let m = lda_train(&docs(), &cfg).unwrap();
        let theta = m.infer(&["pear plum apple".into(), "zebra".into()], 30, 1).unwrap();
        let fruit = m.doc_topic.row(0);
        let fruit_topic = if fruit[0] > fruit[1] { 0 } else { 1 };
        assert!(theta.row(0)[fruit_topic] > 0.9);
        assert!((theta.row(1)[0] - 0.5).abs() < 1e-12);
        for r in 0..2 {
            assert!((theta.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_model() {
        let cfg = LdaConfig {
            n_topics: 2,
            iters: 20,
            seed: 9,
            ..LdaConfig::default()
        };
        assert_eq!(lda_train(&docs(), &cfg).unwrap(), lda_train(&docs(), &cfg).unwrap());
    }

    #[test]
    fn rows_are_normalized() {
        let cfg = LdaConfig {
            n_topics: 3,
            iters: 10,
            ..LdaConfig::default()
        };
        let m = lda_train(&docs(), &cfg).unwrap();
        for t in [&m.topic_word, &m.doc_topic] {
            let (rows, _) = t.dims2();
            for r in 0..rows {
                let s: f64 = t.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(t.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn token_count_conserved_every_sweep() {
        let docs = vec![vec![0, 1, 2, 2], vec![3, 3, 1], vec![0, 4]];
        let mut s = GibbsSampler::new(docs, 5, 3, 0.1, 0.01, 1).unwrap();
        for _ in 0..25 {
            s.sweep();
            assert_eq!(s.assigned_count(), s.token_count());
            let per_word: usize = s.topic_word_counts().iter().flatten().sum();
            assert_eq!(per_word, 9);
        }
    }

    #[test]
    fn empty_corpus_is_data_error() {
        assert!(matches!(lda_train(&[], &LdaConfig::default()), Err(Error::Data(_))));
        assert!(matches!(
            lda_train(&["...".into()], &LdaConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = LdaConfig {
            n_topics: 2,
            iters: 10,
            ..LdaConfig::default()
        };
        let m = lda_train(&docs(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = LdaModel::load(dir.path()).unwrap();
        assert_eq!(back.words, m.words);
        for (a, b) in back.topic_word.data().iter().zip(m.topic_word.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let s: f64 = back.doc_topic.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}
