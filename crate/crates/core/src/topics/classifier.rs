//! Multi-label topic classifier on global image features.

use serde::{Deserialize, Serialize};

use super::{TopicDistribution, DECISION_THRESHOLD};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Graph, Init, ParamStore, ReduceOnPlateau, Sgd, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Dense layers including the sigmoid output layer.
    pub layers: usize,
    pub hidden: usize,
    pub lr: f64,
    pub momentum: f64,
    pub plateau_factor: f64,
    pub plateau_patience: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            hidden: 512,
            lr: 0.1,
            momentum: 0.9,
            plateau_factor: 0.2,
            plateau_patience: 0.4,
            epochs: 50,
            batch_size: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TopicClassifier {
    pub params: ParamStore,
    pub d_in: usize,
    pub n_topics: usize,
    pub layers: usize,
}

/// Per-epoch training losses, first epoch first.
pub type LossCurve = Vec<f64>;

fn layer_names(i: usize) -> (String, String) {
    (format!("clf.l{i}.w"), format!("clf.l{i}.b"))
}

impl TopicClassifier {
    pub fn new(d_in: usize, n_topics: usize, cfg: &ClassifierConfig) -> Result<Self> {
        if cfg.layers == 0 || d_in == 0 || n_topics == 0 || cfg.hidden == 0 {
            return Err(Error::contract("classifier sizes must be ≥ 1"));
        }
        let mut params = ParamStore::new(cfg.seed);
        for i in 0..cfg.layers {
            let fan_in = if i == 0 { d_in } else { cfg.hidden };
            let fan_out = if i + 1 == cfg.layers { n_topics } else { cfg.hidden };
            let (w, b) = layer_names(i);
            params.declare(&w, &[fan_out, fan_in], Init::Glorot)?;
            params.declare(&b, &[fan_out], Init::Zeros)?;
        }
        Ok(Self {
            params,
            d_in,
            n_topics,
            layers: cfg.layers,
        })
    }

    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.layers {
            let (w, b) = layer_names(i);
            let (w, b) = (g.param(&self.params, &w)?, g.param(&self.params, &b)?);
            h = g.linear(h, w, Some(b))?;
            if i + 1 < self.layers {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    fn check_width(&self, fc: &Tensor) -> Result<()> {
        let width = fc.dims2().1;
        if width != self.d_in {
            return Err(Error::contract(format!(
                "classifier expects fc width {}, got {width}",
                self.d_in
            )));
        }
        Ok(())
    }

    /// Sigmoid outputs for a `[B × d_fc]` (or `[d_fc]`) batch.
    pub fn probs(&self, fc: &Tensor) -> Result<Tensor> {
        self.check_width(fc)?;
        let mut g = Graph::new();
        let x = g.input(fc.clone())?;
        let z = self.logits(&mut g, x)?;
        Ok(g.value(z).map(sigmoid))
    }

    fn batch_loss(&mut self, rows: &[usize], features: &[Tensor], targets: &[Vec<u8>]) -> Result<f64> {
        let mut data = Vec::with_capacity(rows.len() * self.d_in);
        let mut t = Vec::with_capacity(rows.len() * self.n_topics);
        for &r in rows {
            data.extend_from_slice(features[r].data());
            t.extend(targets[r].iter().map(|&v| f64::from(v)));
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(rows.len(), self.d_in, data)?)?;
        let z = self.logits(&mut g, x)?;
        let loss = g.bce_with_logits(z, &t)?;
        g.backward(loss, &mut self.params)?;
        Ok(g.value(loss).item())
    }
}

/// Trains on one fc vector and one binary target row per image. Returns the
/// classifier and the mean loss of each epoch.
pub fn classifier_train(
    features: &[Tensor],
    targets: &[Vec<u8>],
    n_topics: usize,
    cfg: &ClassifierConfig,
) -> Result<(TopicClassifier, LossCurve)> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} feature rows for {} target rows",
            features.len(),
            targets.len()
        )));
    }
    if let Some(i) = targets.iter().position(|t| t.len() != n_topics) {
        return Err(Error::contract(format!(
            "target {i} has width {}, expected K = {n_topics}",
            targets[i].len()
        )));
    }
    let d_in = features[0].len();
    if let Some(i) = features.iter().position(|f| f.len() != d_in || !f.is_finite()) {
        return Err(Error::contract(format!("feature row {i} is ragged or non-finite")));
    }
    let mut clf = TopicClassifier::new(d_in, n_topics, cfg)?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut plateau = ReduceOnPlateau::new(cfg.plateau_factor, cfg.plateau_patience);
    let batch = cfg.batch_size.unwrap_or(features.len()).max(1);
    let order: Vec<usize> = (0..features.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for rows in order.chunks(batch) {
            let loss = clf.batch_loss(rows, features, targets).map_err(|e| e.at_step(epoch))?;
            sgd.step(&mut clf.params).map_err(|e| e.at_step(epoch))?;
            total += loss * rows.len() as f64;
        }
        let mean = total / features.len() as f64;
        curve.push(mean);
        sgd.lr = plateau.observe(mean, sgd.lr);
    }
    Ok((clf, curve))
}

/// Sigmoid probabilities plus the 0.5 decision.
pub fn classifier_predict(clf: &TopicClassifier, fc: &Tensor) -> Result<TopicDistribution> {
    if fc.rank() != 1 {
        return Err(Error::contract(format!("expected one fc vector, got {:?}", fc.shape())));
    }
    let probs = clf.probs(fc)?;
    TopicDistribution::with_threshold(probs.reshape(vec![clf.n_topics])?, DECISION_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthSpec};
    use crate::topics::{lda_train, threshold_topics, LdaConfig};

    fn desk() -> ClassifierConfig {
        ClassifierConfig {
            hidden: 32,
            epochs: 10,
            seed: 3,
            ..ClassifierConfig::default()
        }
    }

    fn planted() -> (Vec<Tensor>, Vec<Vec<u8>>) {
        let c = synth_corpus(&SynthSpec::default()).unwrap();
        let docs: Vec<String> = c.captions().iter().map(|caps| caps.join(" ")).collect();
        let lda = lda_train(
            &docs,
            &LdaConfig {
                n_topics: 3,
                iters: 50,
                alpha: Some(0.1),
                seed: 1,
                ..LdaConfig::default()
            },
        )
        .unwrap();
        let targets = (0..docs.len())
            .map(|d| threshold_topics(lda.doc_topic.row(d)))
            .collect();
        (c.features.into_iter().map(|f| f.fc).collect(), targets)
    }

    #[test]
    fn bce_decreases_over_ten_epochs() {
        let (x, y) = planted();
        let (_, curve) = classifier_train(&x, &y, 3, &desk()).unwrap();
        assert_eq!(curve.len(), 10);
        assert!(curve[9] < curve[0], "{curve:?}");
    }

    #[test]
    fn overfits_a_single_image() {
        let (x, y) = planted();
        let cfg = ClassifierConfig { epochs: 40, ..desk() };
        let (clf, _) = classifier_train(&x[..1], &y[..1], 3, &cfg).unwrap();
        let pred = classifier_predict(&clf, &x[0]).unwrap();
        for k in 0..3 {
            if y[0][k] == 1 {
                assert!(pred.probs.data()[k] > 0.5);
            }
        }
        assert_eq!(pred.onehot, y[0]);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (x, y) = planted();
        let cfg = ClassifierConfig { lr: 0.0, ..desk() };
        let (clf, _) = classifier_train(&x, &y, 3, &cfg).unwrap();
        let fresh = TopicClassifier::new(x[0].len(), 3, &cfg).unwrap();
        assert!(clf.params.values_equal(&fresh.params));
    }

    #[test]
    fn zero_weights_predict_one_half() {
        let mut clf = TopicClassifier::new(4, 3, &desk()).unwrap();
        for (_, t) in clf.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let p = classifier_predict(&clf, &Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]).unwrap()).unwrap();
        assert_eq!(p.probs.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn width_mismatch_is_contract_error() {
        let clf = TopicClassifier::new(4, 3, &desk()).unwrap();
        let r = classifier_predict(&clf, &Tensor::vector(vec![1.0; 5]).unwrap());
        assert!(matches!(r, Err(Error::Contract(_))));
        let r = classifier_train(&[Tensor::vector(vec![1.0; 4]).unwrap()], &[vec![1, 0]], 3, &desk());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn full_batch_ignores_row_order() {
        let (x, y) = planted();
        let cfg = ClassifierConfig { epochs: 3, ..desk() };
        let (a, _) = classifier_train(&x[..12], &y[..12], 3, &cfg).unwrap();
        let (mut xr, mut yr) = (x[..12].to_vec(), y[..12].to_vec());
        xr.reverse();
        yr.reverse();
        let (b, _) = classifier_train(&xr, &yr, 3, &cfg).unwrap();
        for f in &x[..12] {
            let (pa, pb) = (a.probs(f).unwrap(), b.probs(f).unwrap());
            for (u, v) in pa.data().iter().zip(pb.data()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn outputs_are_open_unit_interval_and_repeatable() {
        let (x, y) = planted();
        let (clf, _) = classifier_train(&x, &y, 3, &desk()).unwrap();
        let a = clf.probs(&x[5]).unwrap();
        assert_eq!(a, clf.probs(&x[5]).unwrap());
        assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
