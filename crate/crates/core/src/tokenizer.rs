//! Byte-level BPE compatible with GPT-2 vocabularies.
//!
//! Text is split with the GPT-2 pre-tokenization pattern, each chunk's bytes
//! are mapped to printable code points, and adjacent symbol pairs are merged
//! lowest-rank first until no ranked pair remains.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

const GPT2_PATTERN: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// The standard GPT-2 byte ↔ code point bijection. Printable Latin-1 bytes
/// map to themselves; the rest are shifted to 256 and up.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("valid code point")
        };
    }
    table
}

#[derive(Debug)]
pub struct BpeVocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merges: HashMap<(String, String), usize>,
    byte_map: [char; 256],
    byte_unmap: HashMap<char, u8>,
    pattern: Regex,
}

impl BpeVocab {
    /// Loads the vocabulary document (`vocab.json`) and merges file (`merges.txt`).
    pub fn from_files(vocab: impl AsRef<Path>, merges: impl AsRef<Path>) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        Self::from_strs(&read(vocab.as_ref())?, &read(merges.as_ref())?)
    }

    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let raw: HashMap<String, u32> =
            serde_json::from_str(vocab_json).map_err(|e| Error::Vocab(format!("vocabulary document: {e}")))?;
        let mut id_to_token = vec![None; raw.len()];
        for (token, &id) in &raw {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::Vocab(format!("id {id} of {token:?} is not dense")))?;
            if slot.replace(token.clone()).is_some() {
                return Err(Error::Vocab(format!("id {id} assigned twice")));
            }
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();

        let mut merges = HashMap::new();
        for line in merges_txt.lines() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Vocab(format!("malformed merge line {line:?}")));
            };
            let rank = merges.len();
            if merges.insert((a.to_string(), b.to_string()), rank).is_some() {
                return Err(Error::Vocab(format!("duplicate merge {line:?}")));
            }
        }

        let byte_map = bytes_to_unicode();
        for ch in byte_map {
            if !raw.contains_key(&ch.to_string()) {
                return Err(Error::Vocab(format!("byte symbol {ch:?} missing from the vocabulary")));
            }
        }
        let byte_unmap = byte_map.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Ok(Self {
            token_to_id: raw,
            id_to_token,
            merges,
            byte_map,
            byte_unmap,
            pattern: Regex::new(GPT2_PATTERN).expect("pattern compiles"),
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Raw vocabulary symbol (in byte-mapped form).
    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        let mut chunks = Vec::new();
        let mut consumed = 0;
        for m in self.pattern.find_iter(text) {
            match m {
                Ok(m) => {
                    chunks.push(m.as_str());
                    consumed = m.end();
                }
                // Backtrack limit hit: encode the remainder as one chunk.
                Err(_) => {
                    chunks.push(&text[consumed..]);
                    break;
                }
            }
        }
        for chunk in chunks {
            let mapped: String = chunk.bytes().map(|b| self.byte_map[b as usize]).collect();
            for symbol in self.bpe(&mapped) {
                match self.token_to_id.get(&symbol) {
                    Some(&id) => ids.push(id),
                    None => ids.extend(symbol.chars().map(|c| self.token_to_id[&c.to_string()])),
                }
            }
        }
        ids
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merges.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut k = 0;
            while k < symbols.len() {
                if k + 1 < symbols.len()
                    && self.merges.get(&(symbols[k].clone(), symbols[k + 1].clone())) == Some(&rank)
                {
                    merged.push(format!("{}{}", symbols[k], symbols[k + 1]));
                    k += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[k]));
                    k += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    fn token_bytes(&self, id: u32) -> Result<Vec<u8>> {
        let token = self.token(id).ok_or(Error::UnknownTokenId(id))?;
        Ok(token
            .chars()
            .map(|c| self.byte_unmap.get(&c).copied().unwrap_or(b'?'))
            .collect())
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            bytes.extend(self.token_bytes(id)?);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Human-readable form of a single token. Tokens holding a partial UTF-8
    /// sequence render with replacement characters.
    pub fn token_string(&self, id: u32) -> String {
        self.decode(&[id]).unwrap_or_else(|_| format!("<{id}>"))
    }
}
