use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Default caption length cap, counting `<start>` and `<end>`.
pub const DEFAULT_MAX_LEN: usize = 20;

/// Lowercases, splits on whitespace and strips leading/trailing punctuation.
/// Tokens that are pure punctuation vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    // lowercase first: case mapping can add combining marks at a token edge
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts tokens over `texts`, keeps those seen at least `min_count`
    /// times, orders by frequency (desc) then lexicographically, and keeps
    /// at most `cap` non-special tokens when given.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize, cap: Option<usize>) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::contract("min_count must be at least 1"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for tok in tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_count && !SPECIALS.contains(&tok.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(cap) = cap {
            ranked.truncate(cap);
        }
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            id_to_token,
            token_to_id,
        }
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let raw: Vocabulary = serde_json::from_slice(bytes).map_err(Error::from_json)?;
        let tokens = raw.id_to_token;
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::Validation(
                "vocabulary must start with the four special tokens".into(),
            ));
        }
        let v = Self::from_tokens(tokens);
        if v.token_to_id.len() != v.id_to_token.len() {
            return Err(Error::Validation("vocabulary contains duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.id_to_token[SPECIALS.len()..]
    }

    /// `<start> w… <end>`, truncated so the whole sequence fits `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<CaptionSequence> {
        if max_len < 2 {
            return Err(Error::contract("max_len must leave room for <start> and <end>"));
        }
        let mut ids = vec![START];
        ids.extend(tokenize(text).iter().take(max_len - 2).map(|t| self.id(t)));
        ids.push(END);
        Ok(CaptionSequence(ids))
    }

    /// Space-joined tokens with special ids dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token ids framed by `<start>` and `<end>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionSequence(Vec<usize>);

impl CaptionSequence {
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.first() != Some(&START) {
            return Err(Error::contract("caption must begin with <start>"));
        }
        if ids.contains(&PAD) {
            return Err(Error::contract("caption contains <pad>"));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens strictly between `<start>` and the first `<end>`.
    pub fn words(&self) -> &[usize] {
        let body = &self.0[1..];
        let end = body.iter().position(|&i| i == END).unwrap_or(body.len());
        &body[..end]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_with_frequency_then_lexicographic_order() {
        let v = Vocabulary::build(["a dog", "a cat"], 1, None).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.words(), &["a", "cat", "dog"]);
        assert_eq!(v.id("a"), 4);
        let v2 = Vocabulary::build(["a dog", "a cat"], 2, None).unwrap();
        assert_eq!(v2.words(), &["a"]);
    }

    #[test]
    fn normalization() {
        assert_eq!(tokenize("A DOG."), tokenize("a dog"));
        assert_eq!(tokenize("  \"Hello,\" world!! ... "), vec!["hello", "world"]);
        assert_eq!(tokenize("İ"), vec!["i"]);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocabulary::build(["a dog"], 1, None).unwrap();
        let seq = v.encode("a zebra", 20).unwrap();
        assert_eq!(seq.ids(), &[START, v.id("a"), UNK, END]);
        assert_eq!(v.decode(seq.ids()), "a");
    }

    #[test]
    fn encode_respects_max_len() {
        let v = Vocabulary::build(["a b c d e f"], 1, None).unwrap();
        let seq = v.encode("a b c d e f", 5).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.ids()[4], END);
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::build(["x y y"], 1, Some(1)).unwrap();
        assert_eq!(v.words(), &["y"]);
        let back = Vocabulary::from_json_slice(v.to_json().as_bytes()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_json_slice(br#"{"id_to_token":["a"]}"#).is_err());
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        proptest! {
            #[test]
            fn encoding_is_total(text in "\\PC{0,60}") {
                let v = Vocabulary::build(["the cat sat on the mat"], 1, None).unwrap();
                let seq = v.encode(&text, DEFAULT_MAX_LEN).unwrap();
                prop_assert_eq!(seq.ids()[0], START);
                prop_assert_eq!(*seq.ids().last().unwrap(), END);
                prop_assert!(seq.len() <= DEFAULT_MAX_LEN);
                prop_assert!(seq.ids().iter().all(|&i| i != PAD && i < v.len()));
            }

            #[test]
            fn tokenize_is_idempotent(text in "\\PC{0,60}") {
                let once = tokenize(&text);
                prop_assert!(once.iter().all(|t| !t.is_empty()));
                prop_assert_eq!(tokenize(&once.join(" ")), once);
            }
        }
    }
}
