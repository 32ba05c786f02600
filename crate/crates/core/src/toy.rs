//! Small self-contained models for tests, examples and smoke runs.

use std::path::Path;

use crate::archive::Dtype;
use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};
use crate::registry::write_model_dir;
use crate::tokenizer::{bytes_to_unicode, BpeVocab};

const MERGES: &[(&str, &str)] = &[
    ("Ġ", "t"),
    ("h", "e"),
    ("Ġt", "he"),
    ("i", "n"),
    ("e", "r"),
    ("Ġ", "a"),
    ("o", "n"),
    ("r", "e"),
    ("Ġ", "s"),
    ("a", "t"),
    ("e", "n"),
    ("Ġ", "c"),
    ("o", "u"),
    ("i", "s"),
    ("Ġ", "w"),
    ("l", "l"),
];

/// A byte-level vocabulary: the 256 byte symbols plus a few English merges.
/// Returns `(vocab.json, merges.txt)` contents.
pub fn byte_level_vocab() -> (String, String) {
    let mut tokens: Vec<String> = bytes_to_unicode().iter().map(|c| c.to_string()).collect();
    tokens.extend(MERGES.iter().map(|(a, b)| format!("{a}{b}")));
    let doc: serde_json::Map<String, serde_json::Value> = tokens
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, serde_json::Value::from(i)))
        .collect();
    let merges = std::iter::once("#version: 0.2".to_string())
        .chain(MERGES.iter().map(|(a, b)| format!("{a} {b}")))
        .collect::<Vec<_>>()
        .join("\n");
    (serde_json::to_string(&doc).expect("vocab serializes"), merges + "\n")
}

pub fn byte_level_bpe() -> BpeVocab {
    let (vocab, merges) = byte_level_vocab();
    BpeVocab::from_strs(&vocab, &merges).expect("toy vocabulary is well formed")
}

pub fn toy_vocab_size() -> usize {
    256 + MERGES.len()
}

/// A config sized for the toy vocabulary.
pub fn toy_config(n_layer: usize, n_head: usize, d_model: usize, n_ctx: usize) -> ModelConfig {
    ModelConfig::new(n_layer, n_head, d_model, 4 * d_model, toy_vocab_size(), n_ctx)
}

pub fn toy_params(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::random(config, seed, 0.3)
}

/// Writes a random toy model with the byte-level vocabulary to `dir`.
pub fn write_toy_model(dir: &Path, config: ModelConfig, seed: u64) -> Result<()> {
    let params = toy_params(config, seed)?;
    let (vocab, merges) = byte_level_vocab();
    write_model_dir(dir, &params, &vocab, &merges, Dtype::F32)
}
