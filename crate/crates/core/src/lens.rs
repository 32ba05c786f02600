//! Vocabulary projections through the tied unembedding: logit lens for
//! residual states, promoted/suppressed tokens for component updates.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgraph::NodeId;
use crate::model::ModelParams;
use crate::tokenizer::BpeVocab;
use crate::transformer::{Point, RunCapture};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensEntry {
    pub token_id: u32,
    pub token: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensTable {
    pub entries: Vec<LensEntry>,
    pub k: usize,
    pub applied_ln: bool,
}

/// A model component whose update to one position's residual stream can be
/// read out through the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    /// Whole block output; `point` is `Mid` (attention) or `Post` (FFN).
    Block {
        layer: usize,
        point: Point,
        position: usize,
    },
    Head {
        layer: usize,
        head: usize,
        position: usize,
    },
    Neuron {
        layer: usize,
        neuron: usize,
        position: usize,
    },
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Component::Block { layer, point, position } => {
                write!(f, "block:{layer}:{}:{position}", point.to_string().to_lowercase())
            }
            Component::Head { layer, head, position } => write!(f, "head:{layer}:{head}:{position}"),
            Component::Neuron {
                layer,
                neuron,
                position,
            } => {
                write!(f, "neuron:{layer}:{neuron}:{position}")
            }
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    /// `block:L:mid|post:I`, `head:L:H:I` or `neuron:L:N:I`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::index(format!("cannot parse component `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let [kind, a, b, c] = parts.as_slice() else {
            return Err(bad());
        };
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match *kind {
            "block" => Ok(Component::Block {
                layer: num(a)?,
                point: b.parse()?,
                position: num(c)?,
            }),
            "head" => Ok(Component::Head {
                layer: num(a)?,
                head: num(b)?,
                position: num(c)?,
            }),
            "neuron" => Ok(Component::Neuron {
                layer: num(a)?,
                neuron: num(b)?,
                position: num(c)?,
            }),
            _ => Err(bad()),
        }
    }
}

fn token_name(vocab: Option<&BpeVocab>, id: u32) -> String {
    vocab.map_or_else(|| id.to_string(), |v| v.token_string(id))
}

#[derive(Clone, Copy)]
enum Order {
    Descending,
    Ascending,
}

fn top_k(scores: ArrayView1<f32>, k: usize, order: Order, vocab: Option<&BpeVocab>) -> Vec<LensEntry> {
    let mut ranked: Vec<(f32, u32)> = scores.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect();
    let cmp = |a: &(f32, u32), b: &(f32, u32)| {
        let by_score = match order {
            Order::Descending => b.0.total_cmp(&a.0),
            Order::Ascending => a.0.total_cmp(&b.0),
        };
        by_score.then(a.1.cmp(&b.1))
    };
    let k = k.min(ranked.len());
    if k == 0 {
        return Vec::new();
    }
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, cmp);
        ranked.truncate(k);
    }
    ranked.sort_by(cmp);
    ranked
        .into_iter()
        .map(|(score, id)| LensEntry {
            token_id: id,
            token: token_name(vocab, id),
            score: score as f64,
        })
        .collect()
}

/// Residual vector stored at `node`.
pub fn residual_at<'a>(capture: &'a RunCapture, node: NodeId) -> Result<ArrayView1<'a, f32>> {
    if node.point == Point::Embed && node.layer != 0 {
        return Err(Error::index("EMBED nodes live at layer 0"));
    }
    capture.residual(node.layer, node.point, node.position)
}

/// Projects the residual state at `node` onto the vocabulary, optionally
/// through the final layer norm first.
pub fn logit_lens(
    capture: &RunCapture,
    params: &ModelParams,
    vocab: Option<&BpeVocab>,
    node: NodeId,
    k: usize,
    apply_ln: bool,
) -> Result<LensTable> {
    let r = residual_at(capture, node)?;
    let scores = if apply_ln {
        params.unembed(params.ln_f.apply(r).view())
    } else {
        params.unembed(r)
    };
    Ok(LensTable {
        entries: top_k(scores.view(), k, Order::Descending, vocab),
        k,
        applied_ln: apply_ln,
    })
}

/// The vector `component` added to the residual stream at its position.
pub fn update_vector(capture: &RunCapture, params: &ModelParams, component: Component) -> Result<Array1<f32>> {
    match component {
        Component::Block { layer, point, position } => {
            capture.check_layer(layer)?;
            capture.check_position(position)?;
            let (after, before) = match point {
                Point::Mid => (capture.residual_mid(layer), capture.residual_pre(layer)),
                Point::Post => (capture.residual_post(layer), capture.residual_mid(layer)),
                Point::Embed => return Err(Error::index("EMBED is not a block output")),
            };
            Ok(&after.row(position) - &before.row(position))
        }
        Component::Head { layer, head, position } => {
            capture.check_layer(layer)?;
            capture.check_head(head)?;
            capture.check_position(position)?;
            let weights = capture.attention(layer, head).slice_move(s![position, ..=position]);
            let values = capture.head_values(layer, head).slice_move(s![..=position, ..]);
            Ok(weights.dot(&values))
        }
        Component::Neuron {
            layer,
            neuron,
            position,
        } => {
            capture.check_layer(layer)?;
            capture.check_position(position)?;
            let w_out = &params.layers[layer].w_out;
            if neuron >= w_out.nrows() {
                return Err(Error::index(format!(
                    "neuron {neuron} out of range (layer has {})",
                    w_out.nrows()
                )));
            }
            let act = capture.ffn_post_act(layer)[[position, neuron]];
            Ok(&w_out.row(neuron) * act)
        }
    }
}

/// Raw logit readout of an update vector: (top-k promoted, bottom-k
/// suppressed). Suppressed entries are sorted most negative first.
pub fn project_update(
    params: &ModelParams,
    vocab: Option<&BpeVocab>,
    delta: ArrayView1<f32>,
    k: usize,
) -> (LensTable, LensTable) {
    let scores = params.unembed(delta);
    let table = |order| LensTable {
        entries: top_k(scores.view(), k, order, vocab),
        k,
        applied_ln: false,
    };
    (table(Order::Descending), table(Order::Ascending))
}

pub fn update_projection(
    capture: &RunCapture,
    params: &ModelParams,
    vocab: Option<&BpeVocab>,
    component: Component,
    k: usize,
) -> Result<(LensTable, LensTable)> {
    let delta = update_vector(capture, params, component)?;
    Ok(project_update(params, vocab, delta.view(), k))
}
