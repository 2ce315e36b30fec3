//! Order embeddings for images, topics and captions, the order-violation
//! score, the hierarchy ranking loss, and Recall@K retrieval.

mod train;

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use train::{train_ordernet, OrderNetConfig, OrderSample, OrderTrainer};

use crate::corpus::CaptionSequence;
use crate::error::{Error, Result};
use crate::numerics::{violation_sq, Graph, Init, ParamStore, Tensor, Var};

pub const DEFAULT_MARGIN: f64 = 0.05;
const NORM_EPS: f64 = 1e-12;

/// Map applied to the L2-normalized projection so embeddings are
/// non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMap {
    /// Componentwise square; embeddings sum to 1.
    #[default]
    Square,
    /// Componentwise absolute value.
    Abs,
}

impl FromStr for EmbedMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(Self::Square),
            "abs" => Ok(Self::Abs),
            other => Err(Error::Usage(format!("unknown embedding map `{other}` (square|abs)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Topic,
    Caption,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderEmbedding {
    pub vec: Tensor,
    pub modality: Modality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderDims {
    pub d_fc: usize,
    pub n_topics: usize,
    pub vocab: usize,
    pub d_word: usize,
    pub d_gru: usize,
    pub d_emb: usize,
}

const W_I: &str = "oe.w_i";
const W_T: &str = "oe.w_t";
const W_C: &str = "oe.w_c";
const EMBED: &str = "oe.embed";
const GATES: [&str; 3] = ["z", "r", "n"];

fn gru_name(kind: &str, gate: &str) -> String {
    format!("oe.gru.{kind}_{gate}")
}

#[derive(Debug, Clone)]
pub struct OrderNet {
    pub params: ParamStore,
    pub dims: OrderDims,
    pub map: EmbedMap,
}

pub enum EncodeInput<'a> {
    Image(&'a Tensor),
    Topic(&'a Tensor),
    Caption(&'a CaptionSequence),
}

impl OrderNet {
    pub fn new(dims: OrderDims, map: EmbedMap, seed: u64) -> Result<Self> {
        let d = dims;
        if [d.d_fc, d.n_topics, d.vocab, d.d_word, d.d_gru, d.d_emb].contains(&0) {
            return Err(Error::contract(format!("order net dims must be ≥ 1: {d:?}")));
        }
        let mut p = ParamStore::new(seed);
        p.declare(W_I, &[d.d_emb, d.d_fc], Init::Glorot)?;
        p.declare(W_T, &[d.d_emb, d.n_topics], Init::Glorot)?;
        p.declare(W_C, &[d.d_emb, d.d_gru], Init::Glorot)?;
        p.declare(EMBED, &[d.vocab, d.d_word], Init::Uniform(0.1))?;
        for gate in GATES {
            p.declare(&gru_name("w", gate), &[d.d_gru, d.d_word], Init::Glorot)?;
            p.declare(&gru_name("u", gate), &[d.d_gru, d.d_gru], Init::Glorot)?;
            p.declare(&gru_name("b", gate), &[d.d_gru], Init::Zeros)?;
        }
        Ok(Self { params: p, dims, map })
    }

    fn project(&self, g: &mut Graph, x: Var, weight: &str) -> Result<Var> {
        let w = g.param(&self.params, weight)?;
        let y = g.linear(x, w, None)?;
        let y = g.row_normalize(y, NORM_EPS)?;
        match self.map {
            EmbedMap::Square => g.square(y),
            EmbedMap::Abs => g.abs(y),
        }
    }

    /// Image embeddings for `fc: [B × d_fc]`.
    pub fn encode_images(&self, g: &mut Graph, fc: Var) -> Result<Var> {
        self.project(g, fc, W_I)
    }

    /// Topic embeddings for `probs: [B × K]`.
    pub fn encode_topics(&self, g: &mut Graph, probs: Var) -> Result<Var> {
        self.project(g, probs, W_T)
    }

    /// Caption embeddings from the GRU's last hidden state. Each sequence is
    /// its word ids (no `<start>`/`<end>`); an empty one leaves the state at 0.
    pub fn encode_captions(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Var> {
        let h = self.gru(g, seqs)?;
        self.project(g, h, W_C)
    }

    fn gru(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::contract("no captions to encode"));
        }
        let d = self.dims;
        if let Some(&bad) = seqs.iter().flat_map(|s| s.iter()).find(|&&i| i >= d.vocab) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of {}",
                d.vocab
            )));
        }
        let table = g.param(&self.params, EMBED)?;
        let mut vars = |kind: &str| -> Result<Vec<Var>> {
            GATES
                .iter()
                .map(|gt| g.param(&self.params, &gru_name(kind, gt)))
                .collect()
        };
        let (w, u, b) = (vars("w")?, vars("u")?, vars("b")?);
        let mut h = g.input(Tensor::zeros(&[seqs.len(), d.d_gru]))?;
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        for t in 0..steps {
            let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            let mask: Vec<bool> = seqs.iter().map(|s| t < s.len()).collect();
            let x = g.gather(table, &ids)?;
            let next = gru_step(g, x, h, &w, &u, &b)?;
            h = if mask.iter().all(|&m| m) {
                next
            } else {
                g.select_rows(&mask, next, h)?
            };
        }
        Ok(h)
    }

    /// Encodes one input without tracking gradients.
    pub fn encode(&self, input: EncodeInput<'_>) -> Result<OrderEmbedding> {
        let mut g = Graph::new();
        let (out, modality) = match input {
            EncodeInput::Image(fc) => {
                self.expect_width(fc, self.dims.d_fc, "fc")?;
                let x = g.input(fc.clone().reshape(vec![1, fc.len()])?)?;
                (self.encode_images(&mut g, x)?, Modality::Image)
            }
            EncodeInput::Topic(p) => {
                self.expect_width(p, self.dims.n_topics, "topic")?;
                let x = g.input(p.clone().reshape(vec![1, p.len()])?)?;
                (self.encode_topics(&mut g, x)?, Modality::Topic)
            }
            EncodeInput::Caption(seq) => (self.encode_captions(&mut g, &[seq.words()])?, Modality::Caption),
        };
        Ok(OrderEmbedding {
            vec: g.value(out).clone().reshape(vec![self.dims.d_emb])?,
            modality,
        })
    }

    fn expect_width(&self, t: &Tensor, want: usize, what: &str) -> Result<()> {
        if t.rank() != 1 || t.len() != want {
            return Err(Error::contract(format!(
                "{what} input {:?}, expected [{want}]",
                t.shape()
            )));
        }
        Ok(())
    }

    /// Image embeddings, one row per fc vector, computed in parallel.
    pub fn embed_images(&self, fcs: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        fcs.par_iter()
            .map(|fc| self.encode(EncodeInput::Image(fc)).map(|e| e.vec.into_data()))
            .collect()
    }

    pub fn embed_topics(&self, probs: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        probs
            .par_iter()
            .map(|p| self.encode(EncodeInput::Topic(p)).map(|e| e.vec.into_data()))
            .collect()
    }

    pub fn embed_captions(&self, seqs: &[&CaptionSequence]) -> Result<Vec<Vec<f64>>> {
        seqs.par_iter()
            .map(|s| self.encode(EncodeInput::Caption(s)).map(|e| e.vec.into_data()))
            .collect()
    }
}

/// `W x + b + U h`
fn gate(g: &mut Graph, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
    let a = g.linear(x, w, Some(b))?;
    let c = g.linear(h, u, None)?;
    g.add(a, c)
}

/// `h' = h + z ⊙ (n − h)` with sigmoid gates `z, r` and
/// `n = tanh(W_n x + b_n + U_n (r ⊙ h))`.
fn gru_step(g: &mut Graph, x: Var, h: Var, w: &[Var], u: &[Var], b: &[Var]) -> Result<Var> {
    let z = gate(g, x, h, w[0], u[0], b[0])?;
    let z = g.sigmoid(z)?;
    let r = gate(g, x, h, w[1], u[1], b[1])?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, h)?;
    let n = gate(g, x, rh, w[2], u[2], b[2])?;
    let n = g.tanh(n)?;
    let diff = g.sub(n, h)?;
    let step = g.mul(z, diff)?;
    g.add(h, step)
}

/// `S(x, y) = −‖max(0, y − x)‖²`; zero iff `x ≥ y` componentwise.
pub fn order_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract(format!(
            "order_similarity: widths {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(-violation_sq(x, y))
}

pub fn embedding_similarity(x: &OrderEmbedding, y: &OrderEmbedding) -> Result<f64> {
    order_similarity(x.vec.data(), y.vec.data())
}

/// One positive pair with one contrastive `x′` and one contrastive `y′`.
pub struct RankingPair<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub neg_x: &'a [f64],
    pub neg_y: &'a [f64],
}

/// `Σ [α − S(x,y) + S(x′,y)]₊ + [α − S(x,y) + S(x,y′)]₊` over the pairs.
pub fn pair_loss(pairs: &[RankingPair<'_>], alpha: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("pair_loss needs at least one positive"));
    }
    let mut total = 0.0;
    for p in pairs {
        let pos = order_similarity(p.x, p.y)?;
        total += (alpha - pos + order_similarity(p.neg_x, p.y)?).max(0.0);
        total += (alpha - pos + order_similarity(p.x, p.neg_y)?).max(0.0);
    }
    Ok(total)
}

/// Per-positive hinge totals for one order, using every other batch row as
/// a contrastive item unless it equals the positive's own item.
pub fn in_batch_losses(xs: &[Vec<f64>], ys: &[Vec<f64>], alpha: f64) -> Result<Vec<f64>> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::contract(format!(
            "in-batch ranking needs ≥ 2 aligned rows, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    (0..xs.len())
        .map(|p| {
            let mut total = 0.0;
            let pos = order_similarity(&xs[p], &ys[p])?;
            for j in (0..xs.len()).filter(|&j| j != p) {
                if xs[j] != xs[p] {
                    total += (alpha - pos + order_similarity(&xs[j], &ys[p])?).max(0.0);
                }
                if ys[j] != ys[p] {
                    total += (alpha - pos + order_similarity(&xs[p], &ys[j])?).max(0.0);
                }
            }
            Ok(total)
        })
        .collect()
}

/// Embedded batch for the hierarchy loss: row `b` of each matrix belongs
/// to the same image.
pub struct BatchEmbeddings {
    pub images: Var,
    pub captions: Var,
    pub topics: Var,
}

impl BatchEmbeddings {
    pub fn encode(net: &OrderNet, g: &mut Graph, fc: Tensor, topics: Tensor, seqs: &[&[usize]]) -> Result<Self> {
        let rows = fc.dims2().0;
        if rows < 2 {
            return Err(Error::contract("hierarchy loss needs a batch of at least 2"));
        }
        if topics.dims2().0 != rows || seqs.len() != rows {
            return Err(Error::contract("batch parts disagree on size"));
        }
        let x = g.input(fc)?;
        let t = g.input(topics)?;
        Ok(Self {
            images: net.encode_images(g, x)?,
            captions: net.encode_captions(g, seqs)?,
            topics: net.encode_topics(g, t)?,
        })
    }
}

/// Flags contrastive terms whose contrastive item equals the positive's own
/// item; such a term is the constant α and has zero gradient.
fn identical_pairs(x: &Tensor, y: &Tensor) -> Vec<(bool, bool)> {
    let b = x.dims2().0;
    let mut skip = Vec::with_capacity(b * b);
    for j in 0..b {
        for p in 0..b {
            skip.push((j != p && x.row(j) == x.row(p), j != p && y.row(j) == y.row(p)));
        }
    }
    skip
}

/// `L(I,C) + L(I,T) + L(C,T)`, the higher entity first in each order.
/// Contrastive items identical to the positive are left out.
pub fn total_loss(g: &mut Graph, batch: &BatchEmbeddings, alpha: f64) -> Result<Var> {
    if g.value(batch.images).dims2().0 < 2 {
        return Err(Error::contract("hierarchy loss needs a batch of at least 2"));
    }
    let mut terms = Vec::with_capacity(3);
    for (x, y) in [
        (batch.images, batch.captions),
        (batch.images, batch.topics),
        (batch.captions, batch.topics),
    ] {
        let s = g.order_violation(x, y)?;
        let skip = identical_pairs(g.value(x), g.value(y));
        terms.push(g.ranking_hinge_skipping(s, alpha, skip)?);
    }
    crate::numerics::sum_all(g, &terms)
}

/// Fraction of queries with a gold gallery item among the `k` highest
/// `S(query, item)`; ties go to the lower gallery index.
pub fn recall_at_k(queries: &[Vec<f64>], gallery: &[Vec<f64>], gold: &[Vec<usize>], k: usize) -> Result<f64> {
    Ok(recall_at_ks(queries, gallery, gold, &[k])?[0])
}

/// [`recall_at_k`] for several cutoffs with one ranking per query.
pub fn recall_at_ks(queries: &[Vec<f64>], gallery: &[Vec<f64>], gold: &[Vec<usize>], ks: &[usize]) -> Result<Vec<f64>> {
    if ks.contains(&0) {
        return Err(Error::contract("recall@k needs k ≥ 1"));
    }
    if queries.is_empty() || gallery.is_empty() || queries.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} queries, {} gold lists, {} gallery items",
            queries.len(),
            gold.len(),
            gallery.len()
        )));
    }
    if let Some(q) = gold
        .iter()
        .position(|g| g.is_empty() || g.iter().any(|&i| i >= gallery.len()))
    {
        return Err(Error::contract(format!("query {q} has no valid gold item")));
    }
    let ranks: Vec<usize> = queries
        .par_iter()
        .zip(gold)
        .map(|(q, gold)| {
            let scores: Vec<f64> = gallery
                .iter()
                .map(|item| order_similarity(q, item))
                .collect::<Result<_>>()?;
            // rank of the best gold item = items strictly ahead of it
            Ok(gold
                .iter()
                .map(|&gi| {
                    let s = scores[gi];
                    scores
                        .iter()
                        .enumerate()
                        .filter(|&(j, &sj)| sj > s || (sj == s && j < gi))
                        .count()
                })
                .min()
                .expect("gold is non-empty"))
        })
        .collect::<Result<_>>()?;
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect())
}

/// Caption retrieval: each image queries the pooled captions of `samples`;
/// its own captions are the gold items.
pub fn caption_recall(net: &OrderNet, samples: &[OrderSample], ks: &[usize]) -> Result<Vec<f64>> {
    let fcs: Vec<&Tensor> = samples.iter().map(|s| &s.fc).collect();
    let images = net.embed_images(&fcs)?;
    let mut caps = Vec::new();
    let mut gold = Vec::with_capacity(samples.len());
    for s in samples {
        gold.push((caps.len()..caps.len() + s.captions.len()).collect());
        caps.extend(s.captions.iter());
    }
    let gallery = net.embed_captions(&caps)?;
    recall_at_ks(&images, &gallery, &gold, ks)
}
