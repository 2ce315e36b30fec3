use serde::{Deserialize, Serialize};

use super::{Decoder, DecoderSample, GenerateOptions};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ImageScores};

/// One sampled caption under a fixed `μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mu: f64,
    pub image: usize,
    pub caption: String,
    pub scores: ImageScores,
}

/// Samples every image once per listed `μ`, overriding the learned mix at
/// generation time only, and scores each caption against `references`.
/// Rows are grouped by `μ` in list order, then by image.
pub fn mu_sweep(
    decoder: &Decoder,
    samples: &[DecoderSample],
    references: &[Vec<String>],
    vocab: &Vocabulary,
    mu_values: &[f64],
    max_len: usize,
) -> Result<Vec<SweepRow>> {
    if mu_values.is_empty() {
        return Err(Error::Usage("no mu values to sweep".into()));
    }
    if let Some(bad) = mu_values.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::Usage(format!("mu {bad} outside [0, 1]")));
    }
    if samples.len() != references.len() {
        return Err(Error::contract(format!(
            "{} samples for {} reference sets",
            samples.len(),
            references.len()
        )));
    }
    let images: Vec<_> = samples.iter().map(|s| &s.features).collect();
    let guides: Vec<_> = samples.iter().map(|s| &s.guide).collect();
    let mut rows = Vec::with_capacity(mu_values.len() * samples.len());
    for &mu in mu_values {
        let opts = GenerateOptions { max_len, mu: Some(mu) };
        let captions: Vec<String> = decoder
            .generate_all(&images, &guides, &opts)?
            .into_iter()
            .map(|(seq, _)| vocab.decode(seq.ids()))
            .collect();
        let report = evaluate(&captions, references)?;
        let per = report.per_image.expect("evaluate fills per-image scores");
        rows.extend(
            captions
                .into_iter()
                .zip(per)
                .enumerate()
                .map(|(image, (caption, scores))| SweepRow {
                    mu,
                    image,
                    caption,
                    scores,
                }),
        );
    }
    Ok(rows)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "mu,image,caption,bleu1,bleu2,bleu3,bleu4,rouge_l,cider";

    pub fn to_csv_line(&self) -> String {
        let b = self.scores.bleu;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.mu,
            self.image,
            quote(&self.caption),
            b[0],
            b[1],
            b[2],
            b[3],
            self.scores.rouge_l,
            self.scores.cider
        )
    }
}
