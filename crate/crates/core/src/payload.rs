//! JSON documents returned by the HTTP service and written by the CLI.
//!
//! Both front ends build their bodies through [`Analysis`] and serialize with
//! [`to_json_bytes`], so the same query yields byte-identical output from
//! either. Every real number is rounded to 6 decimals.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::{attention_step, contribution_map, top_neurons};
use crate::error::{Error, Result};
use crate::flowgraph::{build_graph, round6, serialize_graph, GraphDocument, NodeId};
use crate::lens::{logit_lens, update_projection, Component, LensTable};
use crate::model::ModelParams;
use crate::tokenizer::BpeVocab;
use crate::transformer::{Point, RunCapture};

/// Which positions a graph is traced from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Targets {
    Last,
    All,
    List(Vec<usize>),
}

impl Targets {
    pub fn resolve(&self, seq_len: usize) -> Vec<usize> {
        match self {
            Targets::Last => vec![seq_len.saturating_sub(1)],
            Targets::All => (0..seq_len).collect(),
            Targets::List(v) => v.clone(),
        }
    }
}

impl FromStr for Targets {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "last" => Ok(Targets::Last),
            "all" => Ok(Targets::All),
            list => list
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::index(format!("bad target list `{s}`")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Targets::List),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub token_id: u32,
    pub token: String,
    pub logit: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDocument {
    pub run_id: String,
    pub model: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub top_predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub head: usize,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsDocument {
    pub layer: usize,
    pub position: usize,
    pub residual: f64,
    pub bias: f64,
    pub block_importance: f64,
    pub heads: Vec<HeadScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Attention,
    Contribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDocument {
    pub kind: MapKind,
    pub layer: usize,
    pub head: usize,
    pub tokens: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronScore {
    pub neuron: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronsDocument {
    pub layer: usize,
    pub position: usize,
    pub k: usize,
    pub neurons: Vec<NeuronScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensDocument {
    pub layer: usize,
    pub point: Point,
    pub position: usize,
    pub table: LensTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionDocument {
    pub component: String,
    pub promoted: LensTable,
    pub suppressed: LensTable,
}

fn rounded(mut table: LensTable) -> LensTable {
    for e in &mut table.entries {
        e.score = round6(e.score);
    }
    table
}

/// Compact JSON, the wire and file format of every document.
pub fn to_json_bytes<T: Serialize>(doc: &T) -> Vec<u8> {
    serde_json::to_vec(doc).expect("documents always serialize")
}

/// One captured run together with what is needed to interpret it.
#[derive(Clone, Copy)]
pub struct Analysis<'a> {
    pub params: &'a ModelParams,
    pub vocab: Option<&'a BpeVocab>,
    pub capture: &'a RunCapture,
}

impl<'a> Analysis<'a> {
    pub fn new(params: &'a ModelParams, vocab: Option<&'a BpeVocab>, capture: &'a RunCapture) -> Self {
        Self { params, vocab, capture }
    }

    /// Softmax top-`k` of the last position's logits.
    pub fn top_predictions(&self, k: usize) -> Vec<Prediction> {
        let logits = self.capture.final_logits();
        let row = logits.row(self.capture.seq_len() - 1);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let norm: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let mut ranked: Vec<(f32, u32)> = row.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked
            .into_iter()
            .take(k)
            .map(|(logit, id)| Prediction {
                token_id: id,
                token: self.vocab.map_or_else(|| id.to_string(), |v| v.token_string(id)),
                logit: round6(logit as f64),
                probability: round6((logit as f64 - max).exp() / norm),
            })
            .collect()
    }

    pub fn graph(&self, threshold: f64, targets: &Targets) -> Result<GraphDocument> {
        let targets = targets.resolve(self.capture.seq_len());
        let graph = build_graph(self.capture, self.params, threshold, &targets)?;
        Ok(serialize_graph(&graph, self.capture.token_strings()))
    }

    pub fn heads(&self, layer: usize, position: usize) -> Result<HeadsDocument> {
        let step = attention_step(self.capture, self.params, layer, position)?;
        Ok(HeadsDocument {
            layer,
            position,
            residual: round6(step.residual()),
            bias: round6(step.bias()),
            block_importance: round6(step.block_importance()),
            heads: (0..self.capture.n_head())
                .map(|h| HeadScore {
                    head: h,
                    importance: round6(step.head_importance(h)),
                })
                .collect(),
        })
    }

    pub fn attention_map(&self, layer: usize, head: usize) -> Result<MapDocument> {
        self.capture.check_layer(layer)?;
        self.capture.check_head(head)?;
        let matrix = self
            .capture
            .attention(layer, head)
            .outer_iter()
            .map(|row| row.iter().map(|&v| round6(v as f64)).collect())
            .collect();
        Ok(self.map_doc(MapKind::Attention, layer, head, matrix))
    }

    pub fn contribution_map(&self, layer: usize, head: usize) -> Result<MapDocument> {
        let map = contribution_map(self.capture, self.params, layer, head)?;
        let matrix = map
            .outer_iter()
            .map(|row| row.iter().map(|&v| round6(v)).collect())
            .collect();
        Ok(self.map_doc(MapKind::Contribution, layer, head, matrix))
    }

    fn map_doc(&self, kind: MapKind, layer: usize, head: usize, matrix: Vec<Vec<f64>>) -> MapDocument {
        MapDocument {
            kind,
            layer,
            head,
            tokens: self.capture.token_strings().to_vec(),
            matrix,
        }
    }

    pub fn neurons(&self, layer: usize, position: usize, k: usize) -> Result<NeuronsDocument> {
        let top = top_neurons(self.capture, self.params, layer, position, k)?;
        Ok(NeuronsDocument {
            layer,
            position,
            k,
            neurons: top
                .into_iter()
                .map(|(neuron, score)| NeuronScore {
                    neuron,
                    score: round6(score),
                })
                .collect(),
        })
    }

    pub fn lens(&self, layer: usize, point: Point, position: usize, k: usize, apply_ln: bool) -> Result<LensDocument> {
        let node = NodeId { layer, point, position };
        let table = logit_lens(self.capture, self.params, self.vocab, node, k, apply_ln)?;
        Ok(LensDocument {
            layer,
            point,
            position,
            table: rounded(table),
        })
    }

    pub fn projection(&self, component: Component, k: usize) -> Result<ProjectionDocument> {
        let (promoted, suppressed) = update_projection(self.capture, self.params, self.vocab, component, k)?;
        Ok(ProjectionDocument {
            component: component.to_string(),
            promoted: rounded(promoted),
            suppressed: rounded(suppressed),
        })
    }
}
