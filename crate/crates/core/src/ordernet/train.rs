use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BatchEmbeddings, EmbedMap, OrderDims, OrderNet, DEFAULT_MARGIN};
use crate::checkpoint::Checkpoint;
use crate::corpus::{CaptionSequence, ImageFeatures, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderNetConfig {
    pub d_emb: usize,
    pub d_gru: usize,
    pub d_word: usize,
    pub margin: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub embed_map: EmbedMap,
}

impl Default for OrderNetConfig {
    fn default() -> Self {
        Self {
            d_emb: 1024,
            d_gru: 1024,
            d_word: 256,
            margin: DEFAULT_MARGIN,
            lr: 0.001,
            batch_size: 128,
            epochs: 10,
            seed: 0,
            embed_map: EmbedMap::Square,
        }
    }
}

/// One image with its topic distribution and encoded captions.
#[derive(Debug, Clone)]
pub struct OrderSample {
    pub fc: Tensor,
    pub topics: Tensor,
    pub captions: Vec<CaptionSequence>,
}

impl OrderSample {
    /// Zips per-image features, caption texts and topic distributions.
    pub fn build_all(
        features: &[ImageFeatures],
        captions: &[Vec<&str>],
        topics: &[Tensor],
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Vec<OrderSample>> {
        if features.len() != captions.len() || features.len() != topics.len() {
            return Err(Error::contract(format!(
                "{} feature sets, {} caption lists, {} topic rows",
                features.len(),
                captions.len(),
                topics.len()
            )));
        }
        features
            .iter()
            .zip(captions)
            .zip(topics)
            .map(|((f, caps), t)| {
                Ok(OrderSample {
                    fc: f.fc.clone(),
                    topics: t.clone(),
                    captions: caps.iter().map(|c| vocab.encode(c, max_len)).collect::<Result<_>>()?,
                })
            })
            .collect()
    }
}

/// Epoch-at-a-time training with checkpointable state. Parameters and Adam
/// moments are rounded to `f32` after every epoch so that a run resumed
/// from a checkpoint continues bit-identically.
#[derive(Debug, Clone)]
pub struct OrderTrainer {
    pub net: OrderNet,
    pub adam: Adam,
    pub epoch: usize,
    cfg: OrderNetConfig,
}

fn dims_of(data: &[OrderSample], vocab: usize, cfg: &OrderNetConfig) -> Result<OrderDims> {
    let first = data.first().ok_or_else(|| Error::Data("no training images".into()))?;
    let (d_fc, n_topics) = (first.fc.len(), first.topics.len());
    if let Some(i) = data
        .iter()
        .position(|s| s.fc.len() != d_fc || s.topics.len() != n_topics)
    {
        return Err(Error::contract(format!("sample {i} has inconsistent fc/topic widths")));
    }
    Ok(OrderDims {
        d_fc,
        n_topics,
        vocab,
        d_word: cfg.d_word,
        d_gru: cfg.d_gru,
        d_emb: cfg.d_emb,
    })
}

impl OrderTrainer {
    pub fn new(data: &[OrderSample], vocab: usize, cfg: &OrderNetConfig) -> Result<Self> {
        let dims = dims_of(data, vocab, cfg)?;
        let mut net = OrderNet::new(dims, cfg.embed_map, cfg.seed)?;
        net.params.round_to_f32();
        Ok(Self {
            net,
            adam: Adam::new(cfg.lr),
            epoch: 0,
            cfg: cfg.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, cfg: &OrderNetConfig) -> Result<Self> {
        let dims: OrderDims = serde_json::from_value(ck.extra["dims"].clone())
            .map_err(|e| Error::Format(format!("checkpoint dims: {e}")))?;
        let map: EmbedMap = serde_json::from_value(ck.extra["embed_map"].clone())
            .map_err(|e| Error::Format(format!("checkpoint embed_map: {e}")))?;
        let fresh = OrderNet::new(dims, map, ck.params.seed())?;
        for (name, t) in fresh.params.iter() {
            let got = ck.params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{name}` has shape {:?}",
                    got.shape()
                )));
            }
        }
        if ck.params.len() != fresh.params.len() {
            return Err(Error::Format("checkpoint holds unexpected tensors".into()));
        }
        Ok(Self {
            net: OrderNet {
                params: ck.params,
                dims,
                map,
            },
            adam: ck.adam.unwrap_or_else(|| Adam::new(cfg.lr)),
            epoch: ck.epoch,
            cfg: cfg.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.net.params.clone(),
            adam: Some(self.adam.clone()),
            epoch: self.epoch,
            extra: serde_json::json!({ "dims": self.net.dims, "embed_map": self.net.map }),
        }
    }

    fn batches(&self, data: &[OrderSample]) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..data.len()).filter(|&i| !data[i].captions.is_empty()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(0x9e37_79b9 * (self.epoch as u64 + 1)));
        order.shuffle(&mut rng);
        let mut out: Vec<Vec<usize>> = order
            .chunks(self.cfg.batch_size.max(2))
            .map(<[usize]>::to_vec)
            .collect();
        if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
            let tail = out.pop().expect("non-empty");
            out.last_mut().expect("non-empty").extend(tail);
        }
        out
    }

    /// One pass over the images; returns the mean loss per image.
    pub fn run_epoch(&mut self, data: &[OrderSample]) -> Result<f64> {
        let batches = self.batches(data);
        let count: usize = batches.iter().map(Vec::len).sum();
        if count < 2 {
            return Err(Error::contract(
                "need at least 2 captioned images for in-batch negatives",
            ));
        }
        let mut total = 0.0;
        for (b, rows) in batches.iter().enumerate() {
            let step = self.epoch * batches.len() + b;
            total += self.train_batch(data, rows).map_err(|e| e.at_step(step))?;
        }
        self.epoch += 1;
        self.net.params.round_to_f32();
        self.adam.round_to_f32();
        Ok(total / count as f64)
    }

    /// Mean loss per image over the batches the next epoch would see,
    /// without updating anything.
    pub fn evaluate(&self, data: &[OrderSample]) -> Result<f64> {
        let batches = self.batches(data);
        let count: usize = batches.iter().map(Vec::len).sum();
        if count < 2 {
            return Err(Error::contract(
                "need at least 2 captioned images for in-batch negatives",
            ));
        }
        let mut total = 0.0;
        for rows in &batches {
            let (g, loss) = self.batch_graph(data, rows)?;
            total += g.value(loss).item();
        }
        Ok(total / count as f64)
    }

    fn batch_graph(&self, data: &[OrderSample], rows: &[usize]) -> Result<(Graph, Var)> {
        let dims = self.net.dims;
        let mut fc = Vec::with_capacity(rows.len() * dims.d_fc);
        let mut topics = Vec::with_capacity(rows.len() * dims.n_topics);
        let mut seqs = Vec::with_capacity(rows.len());
        for &r in rows {
            let s = &data[r];
            fc.extend_from_slice(s.fc.data());
            topics.extend_from_slice(s.topics.data());
            seqs.push(s.captions[(self.epoch + r) % s.captions.len()].words());
        }
        let mut g = Graph::new();
        let batch = BatchEmbeddings::encode(
            &self.net,
            &mut g,
            Tensor::matrix(rows.len(), dims.d_fc, fc)?,
            Tensor::matrix(rows.len(), dims.n_topics, topics)?,
            &seqs,
        )?;
        let loss = super::total_loss(&mut g, &batch, self.cfg.margin)?;
        Ok((g, loss))
    }

    fn train_batch(&mut self, data: &[OrderSample], rows: &[usize]) -> Result<f64> {
        let (g, loss) = self.batch_graph(data, rows)?;
        g.backward(loss, &mut self.net.params)?;
        self.adam.step(&mut self.net.params)?;
        Ok(g.value(loss).item())
    }
}

/// Trains from scratch for `cfg.epochs`; returns the net and per-epoch losses.
pub fn train_ordernet(data: &[OrderSample], vocab: usize, cfg: &OrderNetConfig) -> Result<(OrderNet, Vec<f64>)> {
    let mut trainer = OrderTrainer::new(data, vocab, cfg)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        losses.push(trainer.run_epoch(data)?);
    }
    Ok((trainer.net, losses))
}
