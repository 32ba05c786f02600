//! Contribution scores for the additive terms of a residual-stream update.
//!
//! For an update `y = Σ_k t_k`, the raw contribution of term `k` is the L1
//! proximity
//!
//! ```text
//! c_k = max(0, ‖y‖₁ − ‖y − t_k‖₁)
//! ```
//!
//! and scores are normalized to sum to one. If every raw contribution is
//! zero the scores fall back to uniform and the step is flagged.
//!
//! Scores are always computed at the finest split (head × source token, or
//! single neuron); head, edge and block importances are sums of fine scores.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::transformer::RunCapture;

/// Reconstruction slack, relative to `max(1, ‖y‖∞)`.
pub const RECONSTRUCTION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TermLabel {
    Residual,
    AttnToken { head: usize, source: usize },
    FfnNeuron { neuron: usize },
    Bias,
}

/// A target vector and terms that add up to it.
#[derive(Debug, Clone)]
pub struct TermDecomposition {
    pub target: Array1<f32>,
    pub terms: Vec<(TermLabel, Array1<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepAttribution {
    labels: Vec<TermLabel>,
    scores: Vec<f64>,
    fallback_uniform: bool,
}

impl StepAttribution {
    pub fn fallback_uniform(&self) -> bool {
        self.fallback_uniform
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TermLabel, f64)> + '_ {
        self.labels.iter().copied().zip(self.scores.iter().copied())
    }

    /// Score of `label`, or zero if the decomposition has no such term.
    pub fn score(&self, label: TermLabel) -> f64 {
        self.iter().find(|(l, _)| *l == label).map_or(0.0, |(_, s)| s)
    }

    pub fn residual(&self) -> f64 {
        self.score(TermLabel::Residual)
    }

    pub fn bias(&self) -> f64 {
        self.score(TermLabel::Bias)
    }

    /// Importance of the whole block: everything but the residual and bias.
    /// Clamped at zero against rounding when the block scores nothing.
    pub fn block_importance(&self) -> f64 {
        (1.0 - self.residual() - self.bias()).max(0.0)
    }

    pub fn head_importance(&self, head: usize) -> f64 {
        self.iter()
            .filter(|(l, _)| matches!(l, TermLabel::AttnToken { head: h, .. } if *h == head))
            .map(|(_, s)| s)
            .sum()
    }

    pub fn edge_importance(&self, source: usize) -> f64 {
        self.iter()
            .filter(|(l, _)| matches!(l, TermLabel::AttnToken { source: j, .. } if *j == source))
            .map(|(_, s)| s)
            .sum()
    }

    /// `out[j]` = score of `AttnToken(head, j)`, for `j < len`.
    pub fn head_row(&self, head: usize, len: usize) -> Vec<f64> {
        let mut row = vec![0.0; len];
        for (label, score) in self.iter() {
            if let TermLabel::AttnToken { head: h, source } = label {
                if h == head && source < len {
                    row[source] += score;
                }
            }
        }
        row
    }

    /// Neuron scores in neuron order.
    pub fn neuron_scores(&self) -> Vec<(usize, f64)> {
        self.iter()
            .filter_map(|(l, s)| match l {
                TermLabel::FfnNeuron { neuron } => Some((neuron, s)),
                _ => None,
            })
            .collect()
    }
}

pub fn head_importance(step: &StepAttribution, head: usize) -> f64 {
    step.head_importance(head)
}

pub fn edge_importance(step: &StepAttribution, source: usize) -> f64 {
    step.edge_importance(source)
}

fn l1(v: ArrayView1<f32>) -> f64 {
    v.iter().map(|&x| (x as f64).abs()).sum()
}

/// `‖y − scale·t‖₁` over contiguous slices, with independent f64 lanes so
/// the loop vectorizes.
fn l1_distance(y: &[f32], t: &[f32], scale: f32) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let y_chunks = y.chunks_exact(LANES);
    let t_chunks = t.chunks_exact(LANES);
    let tail: f64 = y_chunks
        .remainder()
        .iter()
        .zip(t_chunks.remainder())
        .map(|(&a, &b)| (a as f64 - (scale * b) as f64).abs())
        .sum();
    for (a, b) in y_chunks.zip(t_chunks) {
        for k in 0..LANES {
            acc[k] += (a[k] as f64 - (scale * b[k]) as f64).abs();
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `max(0, ‖y‖₁ − ‖y − scale·t‖₁)`, accumulated in f64.
fn raw_contribution(y: ArrayView1<f32>, y_l1: f64, t: ArrayView1<f32>, scale: f32) -> f64 {
    let dist = match (y.as_slice(), t.as_slice()) {
        (Some(a), Some(b)) => l1_distance(a, b, scale),
        _ => y
            .iter()
            .zip(t.iter())
            .map(|(&a, &b)| (a as f64 - (scale * b) as f64).abs())
            .sum(),
    };
    (y_l1 - dist).max(0.0)
}

fn check_reconstruction(target: ArrayView1<f32>, sum: ArrayView1<f32>) -> Result<()> {
    let err = target
        .iter()
        .zip(sum.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0, f64::max);
    let magnitude = target.iter().map(|&a| (a as f64).abs()).fold(1.0, f64::max);
    if err > RECONSTRUCTION_TOL * magnitude || err.is_nan() {
        return Err(Error::Decomposition(err));
    }
    Ok(())
}

fn normalize(labels: Vec<TermLabel>, raw: Vec<f64>) -> StepAttribution {
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        StepAttribution {
            labels,
            scores: raw.into_iter().map(|c| c / total).collect(),
            fallback_uniform: false,
        }
    } else {
        let n = labels.len() as f64;
        StepAttribution {
            scores: vec![1.0 / n; labels.len()],
            labels,
            fallback_uniform: true,
        }
    }
}

/// `Σ_n weights[n] · rows[n]`, accumulated row by row. ndarray's
/// vector-matrix product walks the matrix column-wise without BLAS.
pub(crate) fn weighted_rows(weights: ArrayView1<f32>, rows: ArrayView2<f32>) -> Array1<f32> {
    let mut out = Array1::<f32>::zeros(rows.ncols());
    for (&w, row) in weights.iter().zip(rows.rows()) {
        if w != 0.0 {
            out.scaled_add(w, &row);
        }
    }
    out
}

/// Normalized contributions of every term in `decomp`.
pub fn contributions(decomp: &TermDecomposition) -> Result<StepAttribution> {
    let y = decomp.target.view();
    let mut sum = Array1::<f32>::zeros(y.len());
    for (_, t) in &decomp.terms {
        if t.len() != y.len() {
            return Err(Error::Decomposition(f64::NAN));
        }
        sum += t;
    }
    check_reconstruction(y, sum.view())?;
    let y_l1 = l1(y);
    let raw = decomp
        .terms
        .iter()
        .map(|(_, t)| raw_contribution(y, y_l1, t.view(), 1.0))
        .collect();
    Ok(normalize(decomp.terms.iter().map(|(l, _)| *l).collect(), raw))
}

/// Attribution of `residual_mid[l][i]` to the incoming residual, every
/// head × source term, and the attention bias.
pub fn attention_step(
    capture: &RunCapture,
    params: &ModelParams,
    layer: usize,
    position: usize,
) -> Result<StepAttribution> {
    capture.check_layer(layer)?;
    capture.check_position(position)?;
    let y = capture.residual_mid(layer).index_axis_move(Axis(0), position);
    let residual = capture.residual_pre(layer).index_axis_move(Axis(0), position);
    let bias = params.layers[layer].attn_bias();
    let n_head = capture.n_head();

    let mut sum = &residual + &bias;
    for h in 0..n_head {
        let weights = capture.attention(layer, h).slice_move(s![position, ..=position]);
        let values = capture.head_values(layer, h).slice_move(s![..=position, ..]);
        sum += &weighted_rows(weights, values);
    }
    check_reconstruction(y, sum.view())?;

    let y_l1 = l1(y);
    let mut labels = Vec::with_capacity(n_head * (position + 1) + 2);
    let mut raw = Vec::with_capacity(labels.capacity());
    labels.push(TermLabel::Residual);
    raw.push(raw_contribution(y, y_l1, residual, 1.0));
    for h in 0..n_head {
        let weights = capture.attention(layer, h);
        let values = capture.head_values(layer, h);
        for j in 0..=position {
            labels.push(TermLabel::AttnToken { head: h, source: j });
            raw.push(raw_contribution(y, y_l1, values.row(j), weights[[position, j]]));
        }
    }
    labels.push(TermLabel::Bias);
    raw.push(raw_contribution(y, y_l1, bias.view(), 1.0));
    Ok(normalize(labels, raw))
}

/// Attribution of `residual_post[l][i]` to the incoming residual, every
/// neuron, and the output bias.
pub fn ffn_step(capture: &RunCapture, params: &ModelParams, layer: usize, position: usize) -> Result<StepAttribution> {
    capture.check_layer(layer)?;
    capture.check_position(position)?;
    let y = capture.residual_post(layer).index_axis_move(Axis(0), position);
    let residual = capture.residual_mid(layer).index_axis_move(Axis(0), position);
    let acts = capture.ffn_post_act(layer).index_axis_move(Axis(0), position);
    let w_out = &params.layers[layer].w_out;
    let bias = &params.layers[layer].b_out;

    let sum = &residual + &weighted_rows(acts, w_out.view()) + bias;
    check_reconstruction(y, sum.view())?;

    let y_l1 = l1(y);
    let d_ff = acts.len();
    let mut labels = Vec::with_capacity(d_ff + 2);
    labels.push(TermLabel::Residual);
    labels.extend((0..d_ff).map(|neuron| TermLabel::FfnNeuron { neuron }));
    labels.push(TermLabel::Bias);

    let mut raw = Vec::with_capacity(d_ff + 2);
    raw.push(raw_contribution(y, y_l1, residual, 1.0));
    raw.par_extend((0..d_ff).into_par_iter().map(|n| {
        let a = acts[n];
        if a == 0.0 {
            0.0
        } else {
            raw_contribution(y, y_l1, w_out.row(n), a)
        }
    }));
    raw.push(raw_contribution(y, y_l1, bias.view(), 1.0));
    Ok(normalize(labels, raw))
}

/// `[T, T]` matrix of head-`h` token scores; row `i` comes from
/// `attention_step(l, i)` and sums to that step's head importance.
pub fn contribution_map(capture: &RunCapture, params: &ModelParams, layer: usize, head: usize) -> Result<Array2<f64>> {
    capture.check_layer(layer)?;
    capture.check_head(head)?;
    let t_len = capture.seq_len();
    let mut map = Array2::zeros((t_len, t_len));
    for i in 0..t_len {
        let step = attention_step(capture, params, layer, i)?;
        for (j, v) in step.head_row(head, t_len).into_iter().enumerate() {
            map[[i, j]] = v;
        }
    }
    Ok(map)
}

/// The `k` neurons with the largest scores at `(layer, position)`, ties
/// broken by lower index.
pub fn top_neurons(
    capture: &RunCapture,
    params: &ModelParams,
    layer: usize,
    position: usize,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let step = ffn_step(capture, params, layer, position)?;
    let mut scores = step.neuron_scores();
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scores.truncate(k);
    Ok(scores)
}
