//! Manifests, feature files, tokenization and synthetic corpora.

pub mod features;
mod manifest;
pub mod synth;
mod vocab;

pub use features::{decode_tensor, encode_tensor, load_features, read_tensor, write_tensor, ImageFeatures};
pub use manifest::{Annotation, CorpusManifest, ImageEntry, Split, MAX_CAPTIONS_PER_IMAGE};
pub use synth::{synth_corpus, SynthCorpus, SynthSpec};
pub use vocab::{tokenize, CaptionSequence, Vocabulary, DEFAULT_MAX_LEN, END, PAD, SPECIALS, START, UNK};

/// Reads a manifest from disk; see [`CorpusManifest::load`].
pub fn load_manifest(path: &std::path::Path) -> crate::Result<CorpusManifest> {
    CorpusManifest::load(path)
}

/// Builds the caption vocabulary of a manifest.
pub fn build_vocab(manifest: &CorpusManifest, min_count: usize) -> crate::Result<Vocabulary> {
    Vocabulary::build(manifest.annotations.iter().map(|a| a.caption.as_str()), min_count, None)
}
