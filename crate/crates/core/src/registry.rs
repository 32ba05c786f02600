//! Model directories and name resolution.
//!
//! A model directory uses the GPT-2 checkpoint layout:
//!
//! * `config.json`: GPT-2 style hyperparameters (`n_layer`, `n_head`,
//!   `n_embd`, `n_inner`, `vocab_size`, `n_positions`, `layer_norm_epsilon`).
//!   Optional `weights_file`, `vocab_file` and `merges_file` keys override
//!   the file names below.
//! * `model.safetensors`: the tensor archive.
//! * `vocab.json` and `merges.txt`: the BPE vocabulary.
//!
//! A model reference is either a path (absolute, or relative to a base
//! directory) or a hub identifier such as `gpt2`, looked up in the local
//! Hugging Face cache (`$HF_HOME/hub` or `~/.cache/huggingface/hub`).

use std::path::{Path, PathBuf};

use crate::archive::{open_archive, write_archive, Dtype};
use crate::error::{Error, Result};
use crate::model::{load_model, ModelConfig, ModelParams};
use crate::tokenizer::BpeVocab;

/// Parameters and vocabulary loaded from one model directory.
#[derive(Debug)]
pub struct LoadedModel {
    pub name: String,
    pub params: ModelParams,
    pub vocab: BpeVocab,
}

fn hub_cache_dirs() -> Vec<PathBuf> {
    let mut dirs = Vec::new();
    if let Ok(home) = std::env::var("HF_HUB_CACHE") {
        dirs.push(PathBuf::from(home));
    }
    if let Ok(home) = std::env::var("HF_HOME") {
        dirs.push(Path::new(&home).join("hub"));
    }
    if let Ok(home) = std::env::var("HOME") {
        dirs.push(Path::new(&home).join(".cache/huggingface/hub"));
    }
    dirs
}

/// Finds the directory for a model reference.
pub fn resolve_model_location(reference: &str, base: Option<&Path>) -> Result<PathBuf> {
    let direct = PathBuf::from(reference);
    let candidates = if direct.is_absolute() {
        vec![direct]
    } else {
        let mut c = Vec::new();
        if let Some(base) = base {
            c.push(base.join(&direct));
        }
        c.push(direct);
        c
    };
    if let Some(found) = candidates.into_iter().find(|p| p.join("config.json").is_file()) {
        return Ok(found);
    }
    let repo = format!("models--{}", reference.replace('/', "--"));
    for cache in hub_cache_dirs() {
        let snapshots = cache.join(&repo).join("snapshots");
        let Ok(entries) = std::fs::read_dir(&snapshots) else {
            continue;
        };
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        dirs.sort();
        if let Some(dir) = dirs.into_iter().find(|d| d.join("config.json").is_file()) {
            return Ok(dir);
        }
    }
    Err(Error::ModelNotFound(reference.to_string()))
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Loads config, weights and vocabulary from a model directory.
pub fn load_model_dir(dir: &Path) -> Result<(ModelParams, BpeVocab)> {
    let doc = read_json(&dir.join("config.json"))?;
    let config = ModelConfig::from_hf_json(&doc)?;
    let file = |key: &str, default: &str| dir.join(doc.get(key).and_then(|v| v.as_str()).unwrap_or(default));

    let vocab = BpeVocab::from_files(file("vocab_file", "vocab.json"), file("merges_file", "merges.txt"))?;
    if vocab.len() > config.n_vocab {
        return Err(Error::InvalidConfig(format!(
            "vocabulary has {} tokens but the model only {}",
            vocab.len(),
            config.n_vocab
        )));
    }
    let archive = open_archive(file("weights_file", "model.safetensors"))?;
    let params = load_model(&archive, config)?;
    Ok((params, vocab))
}

/// Resolves and loads a model reference.
pub fn load_named_model(name: &str, reference: &str, base: Option<&Path>) -> Result<LoadedModel> {
    let dir = resolve_model_location(reference, base)?;
    let (params, vocab) = load_model_dir(&dir)?;
    Ok(LoadedModel {
        name: name.to_string(),
        params,
        vocab,
    })
}

/// Writes a complete model directory.
pub fn write_model_dir(
    dir: &Path,
    params: &ModelParams,
    vocab_json: &str,
    merges_txt: &str,
    dtype: Dtype,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: &[u8]| {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(path, e))
    };
    let config = serde_json::to_vec_pretty(&params.config.to_hf_json()).expect("config serializes");
    write("config.json", &config)?;
    write("vocab.json", vocab_json.as_bytes())?;
    write("merges.txt", merges_txt.as_bytes())?;
    write_archive(dir.join("model.safetensors"), &params.to_archive(dtype))
}
