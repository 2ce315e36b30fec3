//! Guided-attention caption decoder: weighted fusion of the image and topic
//! embeddings, a guiding LSTM that seeds the core LSTM, spatial and temporal
//! attention blocks mixed by a learned weight, and greedy decoding.

mod sweep;
mod train;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use sweep::{mu_sweep, SweepRow};
pub use train::{train_decoder, DecoderConfig, DecoderSample, DecoderTrainer, EpochLog, StepObservation};

use crate::corpus::{CaptionSequence, ImageFeatures, END, PAD, START};
use crate::error::{Error, Result};
use crate::numerics::{argmax, sigmoid, Graph, Init, ParamStore, Tensor, Var};
use crate::ordernet::OrderEmbedding;

/// Ablation variants of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DecoderMode {
    /// Raw fc and topic features into the guiding LSTM, no attention.
    #[serde(rename = "topic")]
    Topic,
    /// Fused order embeddings, no attention.
    #[serde(rename = "t-oe")]
    TOe,
    /// Fused order embeddings with spatial and temporal attention.
    #[default]
    #[serde(rename = "t-oe-att")]
    TOeAtt,
}

impl DecoderMode {
    pub const ALL: [DecoderMode; 3] = [DecoderMode::Topic, DecoderMode::TOe, DecoderMode::TOeAtt];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderMode::Topic => "topic",
            DecoderMode::TOe => "t-oe",
            DecoderMode::TOeAtt => "t-oe-att",
        }
    }

    pub fn uses_embeddings(self) -> bool {
        self != DecoderMode::Topic
    }

    pub fn attends(self) -> bool {
        self == DecoderMode::TOeAtt
    }
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown mode `{s}` (topic|t-oe|t-oe-att)")))
    }
}

/// Where the context vector is formed within a timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZOrder {
    /// `z_t = W_g h_g + W_c h_t` with the core state after this step's update.
    #[default]
    AfterCore,
    /// Uses the core state from before this step's update.
    BeforeCore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub vocab: usize,
    pub d_word: usize,
    pub d_fc: usize,
    /// Width of the downsized fc vector appended to each word embedding.
    pub d_down: usize,
    pub grid_n: usize,
    pub d_loc: usize,
    /// Guiding LSTM input width: `d_emb`, or `d_fc + K` in topic mode.
    pub d_guide: usize,
    pub d_h: usize,
    pub d_att: usize,
    pub mlp: usize,
}

impl DecoderDims {
    fn d_x(&self) -> usize {
        self.d_word + self.d_down
    }

    /// Grid features are projected to `d_h` only when the widths differ.
    fn projects_grid(&self) -> bool {
        self.d_loc != self.d_h
    }
}

pub const LAMBDA: &str = "dec.lambda";
pub const MU: &str = "dec.mu";
const EMBED: &str = "dec.embed";

fn lstm_name(cell: &str, kind: &str) -> String {
    format!("dec.{cell}.{kind}")
}

/// LSTM hidden and cell state for every row of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h_g: Tensor,
    pub c_g: Tensor,
    pub h: Tensor,
    pub c: Tensor,
    /// Context vector of the last step; zero before the first.
    pub z: Tensor,
    pub t: usize,
}

/// Attention weights and context vectors, one row per decoding step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    pub alpha: Vec<Vec<f64>>,
    pub rho_s: Vec<Vec<f64>>,
    pub rho_t: Vec<Vec<f64>>,
}

impl AttentionTrace {
    /// `step,cell,weight` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,cell,weight\n");
        for (t, row) in self.alpha.iter().enumerate() {
            for (i, w) in row.iter().enumerate() {
                out.push_str(&format!("{t},{i},{w}\n"));
            }
        }
        out
    }
}

/// One step's attention output for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub alpha: Vec<f64>,
    pub rho_s: Vec<f64>,
    pub rho_t: Vec<f64>,
}

/// What the guiding LSTM sees for one image: order embeddings in the
/// embedding modes, raw fc and topic probabilities in topic mode.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideInput {
    pub image: Tensor,
    pub topic: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub max_len: usize,
    /// Replaces the learned `μ_eff` at generation time.
    pub mu: Option<f64>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            mu: None,
        }
    }
}

/// `λ·o_i + (1−λ)·o_t` with `λ = sigmoid(lambda_raw)`.
pub fn fuse_embeddings(o_i: &OrderEmbedding, o_t: &OrderEmbedding, lambda_raw: f64) -> Result<Tensor> {
    fuse(&o_i.vec, &o_t.vec, sigmoid(lambda_raw))
}

fn fuse(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "cannot fuse embeddings of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn greedy_pick(logits: &[f64]) -> usize {
    let mut masked = logits.to_vec();
    masked[PAD] = f64::NEG_INFINITY;
    masked[START] = f64::NEG_INFINITY;
    argmax(&masked)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub params: ParamStore,
    pub dims: DecoderDims,
    pub mode: DecoderMode,
    pub z_order: ZOrder,
}

/// Per-batch graph nodes that stay fixed across timesteps.
pub(crate) struct Context {
    fc_down: Var,
    /// Grid features the spatial block attends over, `[B·N × d_h]`.
    grid: Option<Var>,
    /// `W_f F`, `[B·N × d_att]`.
    grid_proj: Option<Var>,
    /// `W_g h_g`.
    guide_z: Var,
    mu: Option<Var>,
}

pub(crate) struct StepVars {
    pub h: Var,
    pub c: Var,
    pub z: Var,
    pub logits: Var,
    pub alpha: Option<Var>,
    pub rho_s: Option<Var>,
    pub rho_t: Option<Var>,
}

impl Decoder {
    pub fn new(dims: DecoderDims, mode: DecoderMode, z_order: ZOrder, seed: u64) -> Result<Self> {
        let d = dims;
        if [
            d.vocab, d.d_word, d.d_fc, d.d_down, d.grid_n, d.d_loc, d.d_guide, d.d_h, d.d_att, d.mlp,
        ]
        .contains(&0)
        {
            return Err(Error::contract(format!("decoder dims must be ≥ 1: {d:?}")));
        }
        if d.vocab <= START {
            return Err(Error::contract(format!(
                "vocabulary of {} leaves no room past <start>",
                d.vocab
            )));
        }
        let mut p = ParamStore::new(seed);
        for (cell, d_in) in [("g", d.d_guide), ("c", d.d_x())] {
            p.declare(&lstm_name(cell, "w"), &[4 * d.d_h, d_in], Init::Glorot)?;
            p.declare(&lstm_name(cell, "u"), &[4 * d.d_h, d.d_h], Init::Glorot)?;
            p.declare(&lstm_name(cell, "b"), &[4 * d.d_h], Init::Zeros)?;
        }
        p.declare(EMBED, &[d.vocab, d.d_word], Init::Uniform(0.1))?;
        p.declare("dec.down.w", &[d.d_down, d.d_fc], Init::Glorot)?;
        p.declare("dec.down.b", &[d.d_down], Init::Zeros)?;
        p.declare("dec.w_g", &[d.d_h, d.d_h], Init::Glorot)?;
        p.declare("dec.w_c", &[d.d_h, d.d_h], Init::Glorot)?;
        p.declare("dec.mlp.w", &[d.mlp, d.d_h], Init::Glorot)?;
        p.declare("dec.mlp.b", &[d.mlp], Init::Zeros)?;
        p.declare("dec.out.w", &[d.vocab, d.mlp], Init::Glorot)?;
        p.declare("dec.out.b", &[d.vocab], Init::Zeros)?;
        p.declare(LAMBDA, &[1], Init::Zeros)?;
        p.declare(MU, &[1], Init::Zeros)?;
        if mode.attends() {
            if d.projects_grid() {
                p.declare("dec.w_v", &[d.d_h, d.d_loc], Init::Glorot)?;
            }
            p.declare("dec.w_f", &[d.d_att, d.d_h], Init::Glorot)?;
            p.declare("dec.w_z", &[d.d_att, d.d_h], Init::Glorot)?;
            p.declare("dec.w_alpha", &[1, d.d_att], Init::Glorot)?;
            p.declare("dec.w_x", &[d.d_h, d.d_x()], Init::Glorot)?;
            p.declare("dec.w_zp", &[d.d_h, d.d_h], Init::Glorot)?;
        }
        Ok(Self {
            params: p,
            dims,
            mode,
            z_order,
        })
    }

    fn raw(&self, name: &str) -> f64 {
        self.params.get(name).map_or(0.0, Tensor::item)
    }

    pub fn lambda_eff(&self) -> f64 {
        sigmoid(self.raw(LAMBDA))
    }

    pub fn mu_eff(&self) -> f64 {
        sigmoid(self.raw(MU))
    }

    /// The guiding LSTM input for one image.
    pub fn fused_guide(&self, guide: &GuideInput) -> Result<Tensor> {
        let fused = if self.mode.uses_embeddings() {
            fuse(&guide.image, &guide.topic, self.lambda_eff())?
        } else {
            let mut v = guide.image.data().to_vec();
            v.extend_from_slice(guide.topic.data());
            Tensor::vector(v)?
        };
        if fused.len() != self.dims.d_guide {
            return Err(Error::contract(format!(
                "guide input of width {} for a decoder expecting {}",
                fused.len(),
                self.dims.d_guide
            )));
        }
        Ok(fused)
    }

    /// Guiding LSTM input for a batch, `[B × d_guide]`.
    pub(crate) fn guide_batch(&self, g: &mut Graph, guides: &[&GuideInput]) -> Result<Var> {
        let rows = guides.len();
        let stack = |pick: fn(&GuideInput) -> &Tensor| -> Result<Tensor> {
            let width = pick(guides[0]).len();
            let mut data = Vec::with_capacity(rows * width);
            for gi in guides {
                if pick(gi).len() != width {
                    return Err(Error::contract("guide inputs of mixed widths in one batch"));
                }
                data.extend_from_slice(pick(gi).data());
            }
            Tensor::matrix(rows, width, data)
        };
        let image = g.input(stack(|gi| &gi.image)?)?;
        let topic = g.input(stack(|gi| &gi.topic)?)?;
        let fused = if self.mode.uses_embeddings() {
            let raw = g.param(&self.params, LAMBDA)?;
            let lambda = g.sigmoid(raw)?;
            g.lerp(lambda, image, topic)?
        } else {
            g.concat_cols(image, topic)?
        };
        if g.value(fused).dims2().1 != self.dims.d_guide {
            return Err(Error::contract(format!(
                "guide input of width {} for a decoder expecting {}",
                g.value(fused).dims2().1,
                self.dims.d_guide
            )));
        }
        Ok(fused)
    }

    fn lstm(&self, g: &mut Graph, cell: &str, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let d_h = self.dims.d_h;
        let w = g.param(&self.params, &lstm_name(cell, "w"))?;
        let u = g.param(&self.params, &lstm_name(cell, "u"))?;
        let b = g.param(&self.params, &lstm_name(cell, "b"))?;
        let a = g.linear(x, w, Some(b))?;
        let r = g.linear(h, u, None)?;
        let pre = g.add(a, r)?;
        let i = g.slice_cols(pre, 0, d_h)?;
        let i = g.sigmoid(i)?;
        let f = g.slice_cols(pre, d_h, d_h)?;
        let f = g.sigmoid(f)?;
        let o = g.slice_cols(pre, 2 * d_h, d_h)?;
        let o = g.sigmoid(o)?;
        let n = g.slice_cols(pre, 3 * d_h, d_h)?;
        let n = g.tanh(n)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, n)?;
        let c2 = g.add(keep, write)?;
        let tc = g.tanh(c2)?;
        let h2 = g.mul(o, tc)?;
        Ok((h2, c2))
    }

    /// One guiding LSTM step from the zero state; returns `(h_g, c_g)`.
    pub(crate) fn guide_vars(&self, g: &mut Graph, fused: Var) -> Result<(Var, Var)> {
        let rows = g.value(fused).dims2().0;
        let zero = g.input(Tensor::zeros(&[rows, self.dims.d_h]))?;
        self.lstm(g, "g", fused, zero, zero)
    }

    /// Batch constants: downsized fc, grid projections, `W_g h_g`, and `μ`.
    pub(crate) fn context(
        &self,
        g: &mut Graph,
        fc: Var,
        grid: Option<Var>,
        h_g: Var,
        mu: Option<f64>,
    ) -> Result<Context> {
        let dw = g.param(&self.params, "dec.down.w")?;
        let db = g.param(&self.params, "dec.down.b")?;
        let fc_down = g.linear(fc, dw, Some(db))?;
        let wg = g.param(&self.params, "dec.w_g")?;
        let guide_z = g.linear(h_g, wg, None)?;
        let (grid, grid_proj, mu) = if self.mode.attends() {
            let raw = grid.ok_or_else(|| Error::contract("attention mode needs grid features"))?;
            let feats = if self.dims.projects_grid() {
                let wv = g.param(&self.params, "dec.w_v")?;
                g.linear(raw, wv, None)?
            } else {
                raw
            };
            let wf = g.param(&self.params, "dec.w_f")?;
            let proj = g.linear(feats, wf, None)?;
            let mu = match mu {
                Some(m) => g.input(Tensor::vector(vec![m])?)?,
                None => {
                    let raw = g.param(&self.params, MU)?;
                    g.sigmoid(raw)?
                }
            };
            (Some(feats), Some(proj), Some(mu))
        } else {
            (None, None, None)
        };
        Ok(Context {
            fc_down,
            grid,
            grid_proj,
            guide_z,
            mu,
        })
    }

    /// Advances every row by one token and produces next-word logits.
    pub(crate) fn step_vars(&self, g: &mut Graph, ctx: &Context, h: Var, c: Var, words: &[usize]) -> Result<StepVars> {
        if let Some(&bad) = words.iter().find(|&&w| w >= self.dims.vocab) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.dims.vocab
            )));
        }
        let table = g.param(&self.params, EMBED)?;
        let e = g.gather(table, words)?;
        let x = g.concat_cols(e, ctx.fc_down)?;
        let wc = g.param(&self.params, "dec.w_c")?;
        let context_of = |g: &mut Graph, h: Var| -> Result<Var> {
            let zc = g.linear(h, wc, None)?;
            g.add(ctx.guide_z, zc)
        };
        let z_before = match self.z_order {
            ZOrder::BeforeCore => Some(context_of(g, h)?),
            ZOrder::AfterCore => None,
        };
        let (h, c) = self.lstm(g, "c", x, h, c)?;
        let z = match z_before {
            Some(z) => z,
            None => context_of(g, h)?,
        };

        let (mut alpha, mut rho_s, mut rho_t) = (None, None, None);
        let u = match (ctx.grid, ctx.grid_proj, ctx.mu) {
            (Some(grid), Some(proj), Some(mu)) => {
                let n = self.dims.grid_n;
                let rows = g.value(z).dims2().0;
                let wz = g.param(&self.params, "dec.w_z")?;
                let zp = g.linear(z, wz, None)?;
                let s = g.add_grid(proj, zp, n)?;
                let s = g.tanh(s)?;
                let wa = g.param(&self.params, "dec.w_alpha")?;
                let e = g.linear(s, wa, None)?;
                let e = g.reshape(e, vec![rows, n])?;
                let a = g.softmax_rows(e)?;
                let rs = g.attend(a, grid)?;

                let wx = g.param(&self.params, "dec.w_x")?;
                let wzp = g.param(&self.params, "dec.w_zp")?;
                let gx = g.linear(x, wx, None)?;
                let gz = g.linear(z, wzp, None)?;
                let gate = g.add(gx, gz)?;
                let gate = g.sigmoid(gate)?;
                let tc = g.tanh(c)?;
                let rt = g.mul(tc, gate)?;

                let att = g.lerp(mu, rs, rt)?;
                (alpha, rho_s, rho_t) = (Some(a), Some(rs), Some(rt));
                g.add(z, att)?
            }
            _ => z,
        };
        let mw = g.param(&self.params, "dec.mlp.w")?;
        let mb = g.param(&self.params, "dec.mlp.b")?;
        let hid = g.linear(u, mw, Some(mb))?;
        let hid = g.relu(hid)?;
        let ow = g.param(&self.params, "dec.out.w")?;
        let ob = g.param(&self.params, "dec.out.b")?;
        let logits = g.linear(hid, ow, Some(ob))?;
        Ok(StepVars {
            h,
            c,
            z,
            logits,
            alpha,
            rho_s,
            rho_t,
        })
    }

    fn check_image(&self, image: &ImageFeatures) -> Result<()> {
        let d = self.dims;
        if image.fc.len() != d.d_fc || image.spatial.shape() != [d.grid_n, d.d_loc] {
            return Err(Error::contract(format!(
                "image features fc {:?} / grid {:?}, decoder expects [{}] / [{}, {}]",
                image.fc.shape(),
                image.spatial.shape(),
                d.d_fc,
                d.grid_n,
                d.d_loc
            )));
        }
        Ok(())
    }

    /// One guiding LSTM step from the zero state on `fused`. The core LSTM
    /// starts from `h = h_g`, `c = 0`.
    pub fn init_guiding(&self, fused: &Tensor) -> Result<DecoderState> {
        let mut g = Graph::new();
        let x = g.input(fused.clone().reshape(vec![1, fused.len()])?)?;
        let (h, c) = self.guide_vars(&mut g, x)?;
        let d_h = self.dims.d_h;
        Ok(DecoderState {
            h_g: g.value(h).clone(),
            c_g: g.value(c).clone(),
            h: g.value(h).clone(),
            c: Tensor::zeros(&[1, d_h]),
            z: Tensor::zeros(&[1, d_h]),
            t: 0,
        })
    }

    /// Feeds `word` and returns the next state, this step's attention and the
    /// pre-softmax logits.
    pub fn step(
        &self,
        state: &DecoderState,
        word: usize,
        image: &ImageFeatures,
        mu: Option<f64>,
    ) -> Result<(DecoderState, Option<TraceRow>, Tensor)> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let fc = g.input(image.fc.clone().reshape(vec![1, self.dims.d_fc])?)?;
        let grid = if self.mode.attends() {
            Some(g.input(image.spatial.clone())?)
        } else {
            None
        };
        let h_g = g.input(state.h_g.clone())?;
        let ctx = self.context(&mut g, fc, grid, h_g, mu)?;
        let h = g.input(state.h.clone())?;
        let c = g.input(state.c.clone())?;
        let out = self.step_vars(&mut g, &ctx, h, c, &[word])?;
        let trace = match (out.alpha, out.rho_s, out.rho_t) {
            (Some(a), Some(s), Some(t)) => Some(TraceRow {
                alpha: g.value(a).data().to_vec(),
                rho_s: g.value(s).data().to_vec(),
                rho_t: g.value(t).data().to_vec(),
            }),
            _ => None,
        };
        let next = DecoderState {
            h_g: state.h_g.clone(),
            c_g: state.c_g.clone(),
            h: g.value(out.h).clone(),
            c: g.value(out.c).clone(),
            z: g.value(out.z).clone(),
            t: state.t + 1,
        };
        let logits = g.value(out.logits).clone().reshape(vec![self.dims.vocab])?;
        Ok((next, trace, logits))
    }

    /// Greedy decoding from `<start>` until `<end>` or `max_len` tokens
    /// (counting both markers). Ties go to the smallest token id; `<pad>`
    /// and `<start>` are never emitted.
    pub fn generate(
        &self,
        image: &ImageFeatures,
        guide: &GuideInput,
        opts: &GenerateOptions,
    ) -> Result<(CaptionSequence, AttentionTrace)> {
        if opts.max_len < 2 {
            return Err(Error::contract("max_len must leave room for <start> and <end>"));
        }
        if let Some(m) = opts.mu {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Usage(format!("mu {m} outside [0, 1]")));
            }
        }
        let mut state = self.init_guiding(&self.fused_guide(guide)?)?;
        let mut ids = vec![START];
        let mut trace = AttentionTrace::default();
        while ids.len() + 1 < opts.max_len {
            let (next, row, logits) = self.step(&state, *ids.last().expect("non-empty"), image, opts.mu)?;
            if let Some(r) = row {
                trace.alpha.push(r.alpha);
                trace.rho_s.push(r.rho_s);
                trace.rho_t.push(r.rho_t);
            }
            state = next;
            let w = greedy_pick(logits.data());
            ids.push(w);
            if w == END {
                break;
            }
        }
        if ids.last() != Some(&END) {
            ids.push(END);
        }
        Ok((CaptionSequence::from_ids(ids)?, trace))
    }

    /// [`Self::generate`] over many images in parallel.
    pub fn generate_all(
        &self,
        images: &[&ImageFeatures],
        guides: &[&GuideInput],
        opts: &GenerateOptions,
    ) -> Result<Vec<(CaptionSequence, AttentionTrace)>> {
        if images.len() != guides.len() {
            return Err(Error::contract(format!(
                "{} images for {} guides",
                images.len(),
                guides.len()
            )));
        }
        images
            .par_iter()
            .zip(guides.par_iter())
            .map(|(im, gd)| self.generate(im, gd, opts))
            .collect()
    }
}
