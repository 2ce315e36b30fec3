//! Topic extraction: LDA over caption documents, thresholded topic targets,
//! a multi-label classifier from image features, and P/R/F diagnostics.

mod classifier;
mod lda;

use serde::{Deserialize, Serialize};

pub use classifier::{classifier_predict, classifier_train, ClassifierConfig, LossCurve, TopicClassifier};
pub use lda::{lda_train, GibbsSampler, LdaConfig, LdaModel};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// LDA probability at or above which a topic becomes a target label.
pub const TOPIC_THRESHOLD: f64 = 0.1;
/// Classifier probability at or above which a topic is predicted.
pub const DECISION_THRESHOLD: f64 = 0.5;

pub fn threshold_at(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

/// Binary topic targets from LDA probabilities, `1` iff `p ≥ 0.1`.
pub fn threshold_topics(probs: &[f64]) -> Vec<u8> {
    threshold_at(probs, TOPIC_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicDistribution {
    pub probs: Tensor,
    pub onehot: Vec<u8>,
}

impl TopicDistribution {
    /// Labels from LDA probabilities.
    pub fn from_probs(probs: Tensor) -> Result<Self> {
        Self::with_threshold(probs, TOPIC_THRESHOLD)
    }

    pub fn with_threshold(probs: Tensor, threshold: f64) -> Result<Self> {
        if probs.rank() != 1 {
            return Err(Error::dim(format!(
                "topic probs must be rank 1, got {:?}",
                probs.shape()
            )));
        }
        let onehot = threshold_at(probs.data(), threshold);
        Ok(Self { probs, onehot })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
}

/// Default β for the recall-leaning F score.
pub const DEFAULT_BETA: f64 = 2.0;

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// Micro-averaged precision and recall over all (image, topic) cells.
pub fn eval_prf(pred: &[Vec<u8>], gold: &[Vec<u8>], beta: f64) -> Result<Prf> {
    if pred.is_empty() || gold.is_empty() {
        return Err(Error::contract("eval_prf needs at least one row"));
    }
    if pred.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} gold rows",
            pred.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::contract(format!("row {i}: width {} vs {}", p.len(), g.len())));
        }
        for (&a, &b) in p.iter().zip(g) {
            match (a != 0, b != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    Ok(Prf {
        precision,
        recall,
        f_beta: f_beta(precision, recall, beta),
    })
}
