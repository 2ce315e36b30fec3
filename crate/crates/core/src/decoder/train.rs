use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Decoder, DecoderDims, DecoderMode, GuideInput, ZOrder};
use crate::checkpoint::Checkpoint;
use crate::corpus::{CaptionSequence, ImageFeatures, DEFAULT_MAX_LEN, PAD};
use crate::error::{Error, Result};
use crate::numerics::{sum_all, Adam, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub mode: DecoderMode,
    pub z_order: ZOrder,
    pub d_h: usize,
    pub d_word: usize,
    pub d_down: usize,
    pub d_att: usize,
    pub mlp: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            mode: DecoderMode::TOeAtt,
            z_order: ZOrder::AfterCore,
            d_h: 512,
            d_word: 256,
            d_down: 64,
            d_att: 512,
            mlp: 1024,
            lr: 0.001,
            batch_size: 128,
            epochs: 10,
            seed: 0,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// One image, its guide input and its reference captions.
#[derive(Debug, Clone)]
pub struct DecoderSample {
    pub features: ImageFeatures,
    pub guide: GuideInput,
    pub captions: Vec<CaptionSequence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lambda_eff: f64,
    pub mu_eff: f64,
}

/// Spatial attention of one teacher-forced step over a batch.
#[derive(Debug, Clone, Copy)]
pub struct StepObservation<'a> {
    /// `[B × N]`
    pub alpha: &'a Tensor,
    /// `[B × d_h]`
    pub rho_s: &'a Tensor,
    /// Attended grid rows, `[B·N × d_h]`.
    pub grid: &'a Tensor,
}

pub(crate) struct LossGraph {
    pub graph: Graph,
    pub loss: Var,
    pub grid: Option<Var>,
    pub attention: Vec<(Var, Var)>,
}

impl Decoder {
    /// Teacher-forced mean token cross-entropy over `batch`, predicting every
    /// token after `<start>` including `<end>`.
    pub(crate) fn loss_graph(&self, batch: &[(&ImageFeatures, &GuideInput, &CaptionSequence)]) -> Result<LossGraph> {
        if batch.is_empty() {
            return Err(Error::contract("empty decoder batch"));
        }
        let d = self.dims;
        let rows = batch.len();
        let mut g = Graph::new();
        let mut fc = Vec::with_capacity(rows * d.d_fc);
        let mut grid = Vec::with_capacity(rows * d.grid_n * d.d_loc);
        for (im, _, _) in batch {
            self.check_image(im)?;
            fc.extend_from_slice(im.fc.data());
            grid.extend_from_slice(im.spatial.data());
        }
        let fc = g.input(Tensor::matrix(rows, d.d_fc, fc)?)?;
        let grid = if self.mode.attends() {
            Some(g.input(Tensor::matrix(rows * d.grid_n, d.d_loc, grid)?)?)
        } else {
            None
        };
        let guides: Vec<&GuideInput> = batch.iter().map(|b| b.1).collect();
        let fused = self.guide_batch(&mut g, &guides)?;
        let (h_g, _) = self.guide_vars(&mut g, fused)?;
        let ctx = self.context(&mut g, fc, grid, h_g, None)?;

        let seqs: Vec<&[usize]> = batch.iter().map(|b| b.2.ids()).collect();
        let steps = seqs.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0);
        let total: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
        if total == 0 {
            return Err(Error::contract("captions have no tokens to predict"));
        }
        let (mut h, mut c) = (h_g, g.input(Tensor::zeros(&[rows, d.d_h]))?);
        let mut terms = Vec::with_capacity(steps);
        let mut attention = Vec::new();
        for t in 0..steps {
            let words: Vec<usize> = seqs.iter().map(|s| if t + 1 < s.len() { s[t] } else { PAD }).collect();
            let targets: Vec<Option<usize>> = seqs.iter().map(|s| s.get(t + 1).copied()).collect();
            let out = self.step_vars(&mut g, &ctx, h, c, &words)?;
            let count = targets.iter().flatten().count();
            let ce = g.cross_entropy(out.logits, &targets)?;
            terms.push(g.scale(ce, count as f64 / total as f64)?);
            if let (Some(a), Some(s)) = (out.alpha, out.rho_s) {
                attention.push((a, s));
            }
            (h, c) = (out.h, out.c);
        }
        let loss = sum_all(&mut g, &terms)?;
        Ok(LossGraph {
            graph: g,
            loss,
            grid: ctx.grid,
            attention,
        })
    }

    /// Loss and gradients for one batch; gradients land in `self.params`.
    pub fn loss_and_grad(&mut self, batch: &[(&ImageFeatures, &GuideInput, &CaptionSequence)]) -> Result<f64> {
        let lg = self.loss_graph(batch)?;
        lg.graph.backward(lg.loss, &mut self.params)?;
        Ok(lg.graph.value(lg.loss).item())
    }

    pub fn loss(&self, batch: &[(&ImageFeatures, &GuideInput, &CaptionSequence)]) -> Result<f64> {
        let lg = self.loss_graph(batch)?;
        Ok(lg.graph.value(lg.loss).item())
    }
}

fn dims_of(data: &[DecoderSample], vocab: usize, cfg: &DecoderConfig) -> Result<DecoderDims> {
    let first = data.first().ok_or_else(|| Error::Data("no training images".into()))?;
    let f = &first.features;
    let d_guide = if cfg.mode.uses_embeddings() {
        first.guide.image.len()
    } else {
        first.guide.image.len() + first.guide.topic.len()
    };
    Ok(DecoderDims {
        vocab,
        d_word: cfg.d_word,
        d_fc: f.fc.len(),
        d_down: cfg.d_down,
        grid_n: f.grid_cells(),
        d_loc: f.spatial.shape()[1],
        d_guide,
        d_h: cfg.d_h,
        d_att: cfg.d_att,
        mlp: cfg.mlp,
    })
}

/// Epoch-at-a-time decoder training over every (image, caption) pair.
/// Parameters and Adam moments are rounded to `f32` after each epoch so a
/// resumed run matches an uninterrupted one.
#[derive(Debug, Clone)]
pub struct DecoderTrainer {
    pub decoder: Decoder,
    pub adam: Adam,
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    cfg: DecoderConfig,
}

impl DecoderTrainer {
    pub fn new(data: &[DecoderSample], vocab: usize, cfg: &DecoderConfig) -> Result<Self> {
        let dims = dims_of(data, vocab, cfg)?;
        let mut decoder = Decoder::new(dims, cfg.mode, cfg.z_order, cfg.seed)?;
        decoder.params.round_to_f32();
        Ok(Self {
            decoder,
            adam: Adam::new(cfg.lr),
            epoch: 0,
            log: Vec::new(),
            cfg: cfg.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, cfg: &DecoderConfig) -> Result<Self> {
        let field = |key: &str| ck.extra.get(key).cloned().unwrap_or(serde_json::Value::Null);
        let bad = |key: &str, e: serde_json::Error| Error::Format(format!("checkpoint {key}: {e}"));
        let dims: DecoderDims = serde_json::from_value(field("dims")).map_err(|e| bad("dims", e))?;
        let mode: DecoderMode = serde_json::from_value(field("mode")).map_err(|e| bad("mode", e))?;
        let z_order: ZOrder = serde_json::from_value(field("z_order")).map_err(|e| bad("z_order", e))?;
        let log: Vec<EpochLog> = serde_json::from_value(field("log")).unwrap_or_default();
        let fresh = Decoder::new(dims, mode, z_order, ck.params.seed())?;
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
            decoder: Decoder {
                params: ck.params,
                dims,
                mode,
                z_order,
            },
            adam: ck.adam.unwrap_or_else(|| Adam::new(cfg.lr)),
            epoch: ck.epoch,
            log,
            cfg: cfg.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let d = &self.decoder;
        Checkpoint {
            params: d.params.clone(),
            adam: Some(self.adam.clone()),
            epoch: self.epoch,
            extra: serde_json::json!({
                "dims": d.dims,
                "mode": d.mode,
                "z_order": d.z_order,
                "log": self.log,
            }),
        }
    }

    fn batches(&self, data: &[DecoderSample]) -> Vec<Vec<(usize, usize)>> {
        let mut pairs: Vec<(usize, usize)> = data
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.captions.len()).map(move |c| (i, c)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(0x9e37_79b9 * (self.epoch as u64 + 1)));
        pairs.shuffle(&mut rng);
        pairs.chunks(self.cfg.batch_size.max(1)).map(<[_]>::to_vec).collect()
    }

    pub fn run_epoch(&mut self, data: &[DecoderSample]) -> Result<EpochLog> {
        self.run_epoch_observed(data, &mut |_| {})
    }

    /// [`Self::run_epoch`], handing every step's spatial attention to `observe`.
    pub fn run_epoch_observed(
        &mut self,
        data: &[DecoderSample],
        observe: &mut dyn FnMut(StepObservation<'_>),
    ) -> Result<EpochLog> {
        let batches = self.batches(data);
        if batches.is_empty() {
            return Err(Error::Data("no captions to train on".into()));
        }
        let count: usize = batches.iter().map(Vec::len).sum();
        let mut total = 0.0;
        for (b, rows) in batches.iter().enumerate() {
            let step = self.epoch * batches.len() + b;
            let batch: Vec<_> = rows
                .iter()
                .map(|&(i, c)| (&data[i].features, &data[i].guide, &data[i].captions[c]))
                .collect();
            let lg = self.decoder.loss_graph(&batch).map_err(|e| e.at_step(step))?;
            if let Some(grid) = lg.grid {
                for &(a, s) in &lg.attention {
                    observe(StepObservation {
                        alpha: lg.graph.value(a),
                        rho_s: lg.graph.value(s),
                        grid: lg.graph.value(grid),
                    });
                }
            }
            lg.graph.backward(lg.loss, &mut self.decoder.params)?;
            self.adam.step(&mut self.decoder.params).map_err(|e| e.at_step(step))?;
            total += lg.graph.value(lg.loss).item() * rows.len() as f64;
        }
        self.epoch += 1;
        self.decoder.params.round_to_f32();
        self.adam.round_to_f32();
        let entry = EpochLog {
            epoch: self.epoch,
            loss: total / count as f64,
            lambda_eff: self.decoder.lambda_eff(),
            mu_eff: self.decoder.mu_eff(),
        };
        self.log.push(entry);
        Ok(entry)
    }
}

/// Trains from scratch for `cfg.epochs`; returns the decoder and the
/// per-epoch log.
pub fn train_decoder(data: &[DecoderSample], vocab: usize, cfg: &DecoderConfig) -> Result<(Decoder, Vec<EpochLog>)> {
    let mut trainer = DecoderTrainer::new(data, vocab, cfg)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch(data)?;
    }
    Ok((trainer.decoder, trainer.log))
}
