//! Corpus-level caption metrics with COCO-toolkit semantics: BLEU-1..4
//! (closest reference length, tiny-count smoothing), ROUGE-L (β = 1.2) and
//! CIDEr-D (σ = 6, clipped tf-idf, ×10).

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;

const TINY: f64 = 1e-15;
const SMALL: f64 = 1e-9;

type Ngram<'a> = &'a [String];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub bleu: [f64; MAX_N],
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: [f64; MAX_N],
    pub rouge_l: f64,
    pub cider: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_image: Option<Vec<ImageScores>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializes")
    }

    /// `image,bleu1,bleu2,bleu3,bleu4,rouge_l,cider`, one row per image in
    /// input order; `ids` labels the rows.
    pub fn per_image_csv(&self, ids: &[&str]) -> Result<String> {
        let rows = self
            .per_image
            .as_ref()
            .ok_or_else(|| Error::contract("report has no per-image scores"))?;
        if rows.len() != ids.len() {
            return Err(Error::contract(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        let mut out = String::from("image,bleu1,bleu2,bleu3,bleu4,rouge_l,cider\n");
        for (id, r) in ids.iter().zip(rows) {
            let b = r.bleu;
            out.push_str(&format!(
                "{id},{},{},{},{},{},{}\n",
                b[0], b[1], b[2], b[3], r.rouge_l, r.cider
            ));
        }
        Ok(out)
    }
}

struct Tokenized {
    cands: Vec<Vec<String>>,
    refs: Vec<Vec<Vec<String>>>,
}

fn prepare<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[Vec<R>]) -> Result<Tokenized> {
    if candidates.is_empty() {
        return Err(Error::contract("no candidates to score"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::contract(format!("image {i} has no references")));
    }
    Ok(Tokenized {
        cands: candidates.iter().map(|c| tokenize(c.as_ref())).collect(),
        refs: references
            .iter()
            .map(|rs| rs.iter().map(|r| tokenize(r.as_ref())).collect())
            .collect(),
    })
}

fn ngram_counts(words: &[String], n_max: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut counts = BTreeMap::new();
    for n in 1..=n_max {
        for w in words.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, Default)]
struct BleuStats {
    test_len: usize,
    ref_len: usize,
    guess: [usize; MAX_N],
    correct: [usize; MAX_N],
}

fn bleu_stats(cand: &[String], refs: &[Vec<String>]) -> BleuStats {
    let mut max_ref: BTreeMap<Ngram<'_>, usize> = BTreeMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, MAX_N) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let test_len = cand.len();
    // closest reference length; ties go to the shorter one
    let ref_len = refs
        .iter()
        .map(|r| (r.len().abs_diff(test_len), r.len()))
        .min()
        .map_or(0, |(_, l)| l);
    let mut s = BleuStats {
        test_len,
        ref_len,
        ..BleuStats::default()
    };
    for k in 0..MAX_N {
        s.guess[k] = (test_len + 1).saturating_sub(k + 1);
    }
    for (g, c) in ngram_counts(cand, MAX_N) {
        s.correct[g.len() - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
    }
    s
}

fn bleu_from(s: &BleuStats) -> [f64; MAX_N] {
    let mut out = [0.0; MAX_N];
    let mut prod = 1.0;
    for k in 0..MAX_N {
        prod *= (s.correct[k] as f64 + TINY) / (s.guess[k] as f64 + SMALL);
        out[k] = prod.powf(1.0 / (k + 1) as f64);
    }
    let ratio = (s.test_len as f64 + TINY) / (s.ref_len as f64 + SMALL);
    if ratio < 1.0 {
        let bp = (1.0 - 1.0 / ratio).exp();
        out.iter_mut().for_each(|b| *b *= bp);
    }
    out
}

fn bleu_all(t: &Tokenized) -> ([f64; MAX_N], Vec<[f64; MAX_N]>) {
    let stats: Vec<BleuStats> = t.cands.iter().zip(&t.refs).map(|(c, r)| bleu_stats(c, r)).collect();
    let mut total = BleuStats::default();
    for s in &stats {
        total.test_len += s.test_len;
        total.ref_len += s.ref_len;
        for k in 0..MAX_N {
            total.guess[k] += s.guess[k];
            total.correct[k] += s.correct[k];
        }
    }
    (bleu_from(&total), stats.iter().map(bleu_from).collect())
}

/// Corpus BLEU-1..4.
pub fn bleu<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[Vec<R>]) -> Result<[f64; MAX_N]> {
    Ok(bleu_all(&prepare(candidates, references)?).0)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Best precision and best recall over the references, combined into F_β.
fn rouge_one(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for rf in refs.iter().filter(|rf| !rf.is_empty()) {
        let l = lcs(rf, cand) as f64;
        p = p.max(l / cand.len() as f64);
        r = r.max(l / rf.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn rouge_all(t: &Tokenized) -> (f64, Vec<f64>) {
    let per: Vec<f64> = t
        .cands
        .par_iter()
        .zip(t.refs.par_iter())
        .map(|(c, r)| rouge_one(c, r))
        .collect();
    (per.iter().sum::<f64>() / per.len() as f64, per)
}

pub fn rouge_l<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[Vec<R>]) -> Result<f64> {
    Ok(rouge_all(&prepare(candidates, references)?).0)
}

struct TfIdf<'a> {
    vec: [BTreeMap<Ngram<'a>, f64>; MAX_N],
    norm: [f64; MAX_N],
    /// Bigram count, the toolkit's length measure.
    length: usize,
}

fn tf_idf<'a>(words: &'a [String], df: &BTreeMap<Ngram<'_>, f64>, ref_len: f64) -> TfIdf<'a> {
    let mut vec: [BTreeMap<Ngram<'a>, f64>; MAX_N] = Default::default();
    let mut norm = [0.0; MAX_N];
    let mut length = 0;
    for (g, tf) in ngram_counts(words, MAX_N) {
        let n = g.len() - 1;
        let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
        let v = tf as f64 * (ref_len - d);
        norm[n] += v * v;
        vec[n].insert(g, v);
        if n == 1 {
            length += tf;
        }
    }
    TfIdf {
        vec,
        norm: norm.map(f64::sqrt),
        length,
    }
}

fn cider_sim(h: &TfIdf<'_>, r: &TfIdf<'_>) -> f64 {
    let delta = h.length as f64 - r.length as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..MAX_N {
        let mut val = 0.0;
        for (g, &hv) in &h.vec[n] {
            let rv = r.vec[n].get(g).copied().unwrap_or(0.0);
            val += hv.min(rv) * rv;
        }
        if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val /= h.norm[n] * r.norm[n];
        }
        total += val * penalty;
    }
    total / MAX_N as f64
}

fn cider_all(t: &Tokenized) -> Result<(f64, Vec<f64>)> {
    if t.cands.len() < 2 {
        return Err(Error::contract(
            "CIDEr needs at least 2 images for document frequencies",
        ));
    }
    let mut df: BTreeMap<Ngram<'_>, f64> = BTreeMap::new();
    for refs in &t.refs {
        let uniq: BTreeSet<Ngram<'_>> = refs.iter().flat_map(|r| ngram_counts(r, MAX_N).into_keys()).collect();
        for g in uniq {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let ref_len = (t.cands.len() as f64).ln();
    let per: Vec<f64> = t
        .cands
        .par_iter()
        .zip(t.refs.par_iter())
        .map(|(c, refs)| {
            let h = tf_idf(c, &df, ref_len);
            let sum: f64 = refs.iter().map(|r| cider_sim(&h, &tf_idf(r, &df, ref_len))).sum();
            10.0 * sum / refs.len() as f64
        })
        .collect();
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

pub fn cider<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[Vec<R>]) -> Result<f64> {
    Ok(cider_all(&prepare(candidates, references)?)?.0)
}

/// All metrics plus per-image scores. CIDEr is reported as 0 for a
/// single-image corpus, where document frequencies are undefined.
pub fn evaluate<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[Vec<R>]) -> Result<EvalReport> {
    let t = prepare(candidates, references)?;
    let (bleu, bleu_per) = bleu_all(&t);
    let (rouge_l, rouge_per) = rouge_all(&t);
    let (cider, cider_per) = if t.cands.len() >= 2 {
        cider_all(&t)?
    } else {
        (0.0, vec![0.0])
    };
    let per_image = bleu_per
        .into_iter()
        .zip(rouge_per)
        .zip(cider_per)
        .map(|((bleu, rouge_l), cider)| ImageScores { bleu, rouge_l, cider })
        .collect();
    Ok(EvalReport {
        bleu,
        rouge_l,
        cider,
        per_image: Some(per_image),
    })
}
