//! Instrumented forward pass of a pre-LN decoder and on-demand additive
//! decompositions of its block outputs.
//!
//! Per layer `l`:
//!
//! ```text
//! mid  = pre + Attn(LN1(pre))
//! post = mid + FFN(LN2(mid))
//! ```
//!
//! The attention output at position `i` is evaluated directly in its
//! decomposed form `Σ_h Σ_j A[h][i][j] · z[h][j] + b`, where
//! `z[h][j] = LN1(pre[j]) · W_V^h · W_O^h` is the value vector of source `j`
//! routed through head `h`'s slice of the output projection. The `z` vectors
//! are kept in the capture, so per-token terms never need a second pass.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tokenizer::BpeVocab;

/// Where along a residual stream a state sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Point {
    /// Token plus positional embedding (input to layer 0).
    Embed,
    /// After the attention block of a layer.
    Mid,
    /// After the feed-forward block of a layer.
    Post,
}

impl std::fmt::Display for Point {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Point::Embed => "EMBED",
            Point::Mid => "MID",
            Point::Post => "POST",
        })
    }
}

impl std::str::FromStr for Point {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "embed" => Ok(Point::Embed),
            "mid" => Ok(Point::Mid),
            "post" => Ok(Point::Post),
            other => Err(Error::index(format!("unknown residual point `{other}`"))),
        }
    }
}

pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// Frozen record of one forward pass.
#[derive(Debug, Clone)]
pub struct RunCapture {
    tokens: Vec<u32>,
    token_strings: Vec<String>,
    /// `[L, T, d]`
    residual_pre: Array3<f32>,
    residual_mid: Array3<f32>,
    residual_post: Array3<f32>,
    /// `[L, H, T, T]`, row = query position.
    attn: Array4<f32>,
    /// `[L, H, T, d]`, per-source value vectors through `W_O^h`, no bias.
    head_values: Array4<f32>,
    /// `[L, T, d_ff]`
    ffn_pre_act: Array3<f32>,
    ffn_post_act: Array3<f32>,
    /// `[T, n_vocab]`
    final_logits: Array2<f32>,
}

impl RunCapture {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn token_strings(&self) -> &[String] {
        &self.token_strings
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layer(&self) -> usize {
        self.residual_pre.len_of(Axis(0))
    }

    pub fn n_head(&self) -> usize {
        self.attn.len_of(Axis(1))
    }

    pub fn d_model(&self) -> usize {
        self.residual_pre.len_of(Axis(2))
    }

    pub fn residual_pre(&self, layer: usize) -> ArrayView2<'_, f32> {
        self.residual_pre.index_axis(Axis(0), layer)
    }

    pub fn residual_mid(&self, layer: usize) -> ArrayView2<'_, f32> {
        self.residual_mid.index_axis(Axis(0), layer)
    }

    pub fn residual_post(&self, layer: usize) -> ArrayView2<'_, f32> {
        self.residual_post.index_axis(Axis(0), layer)
    }

    /// Residual state at `(layer, point, position)`. `Embed` ignores `layer`.
    pub fn residual(&self, layer: usize, point: Point, position: usize) -> Result<ArrayView1<'_, f32>> {
        self.check_position(position)?;
        if point != Point::Embed {
            self.check_layer(layer)?;
        }
        Ok(match point {
            Point::Embed => self.residual_pre.slice(s![0, position, ..]),
            Point::Mid => self.residual_mid.slice(s![layer, position, ..]),
            Point::Post => self.residual_post.slice(s![layer, position, ..]),
        })
    }

    /// Softmax weights of one head, `[T, T]`.
    pub fn attention(&self, layer: usize, head: usize) -> ArrayView2<'_, f32> {
        self.attn.slice(s![layer, head, .., ..])
    }

    /// Value vectors of every source position routed through `W_O^h`, `[T, d]`.
    pub fn head_values(&self, layer: usize, head: usize) -> ArrayView2<'_, f32> {
        self.head_values.slice(s![layer, head, .., ..])
    }

    pub fn ffn_pre_act(&self, layer: usize) -> ArrayView2<'_, f32> {
        self.ffn_pre_act.index_axis(Axis(0), layer)
    }

    pub fn ffn_post_act(&self, layer: usize) -> ArrayView2<'_, f32> {
        self.ffn_post_act.index_axis(Axis(0), layer)
    }

    pub fn final_logits(&self) -> ArrayView2<'_, f32> {
        self.final_logits.view()
    }

    pub(crate) fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.n_layer() {
            return Err(Error::index(format!(
                "layer {layer} out of range (model has {} layers)",
                self.n_layer()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.n_head() {
            return Err(Error::index(format!(
                "head {head} out of range (model has {} heads)",
                self.n_head()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_position(&self, position: usize) -> Result<()> {
        if position >= self.seq_len() {
            return Err(Error::index(format!(
                "position {position} out of range (sequence has {} tokens)",
                self.seq_len()
            )));
        }
        Ok(())
    }
}

/// Runs the model over `tokens`, recording every intermediate tensor.
/// Token strings default to the decimal ids; see [`run_text`].
pub fn run(params: &ModelParams, tokens: &[u32]) -> Result<RunCapture> {
    let strings = tokens.iter().map(|id| id.to_string()).collect();
    forward(params, tokens, strings)
}

/// Tokenizes `text` (no special tokens) and runs the model on it.
pub fn run_text(params: &ModelParams, vocab: &BpeVocab, text: &str) -> Result<RunCapture> {
    let tokens = vocab.encode(text);
    let strings = tokens.iter().map(|&id| vocab.token_string(id)).collect();
    forward(params, &tokens, strings)
}

fn forward(params: &ModelParams, tokens: &[u32], token_strings: Vec<String>) -> Result<RunCapture> {
    let c = &params.config;
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(Error::EmptyInput);
    }
    if t_len > c.n_ctx {
        return Err(Error::ContextOverflow {
            len: t_len,
            n_ctx: c.n_ctx,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= c.n_vocab) {
        return Err(Error::UnknownTokenId(bad));
    }
    params.record_forward_pass();

    let (n_layer, n_head, d, d_ff) = (c.n_layer, c.n_head, c.d_model, c.d_ff);
    let mut residual_pre = Array3::zeros((n_layer, t_len, d));
    let mut residual_mid = Array3::zeros((n_layer, t_len, d));
    let mut residual_post = Array3::zeros((n_layer, t_len, d));
    let mut attn = Array4::zeros((n_layer, n_head, t_len, t_len));
    let mut head_values = Array4::zeros((n_layer, n_head, t_len, d));
    let mut ffn_pre_act = Array3::zeros((n_layer, t_len, d_ff));
    let mut ffn_post_act = Array3::zeros((n_layer, t_len, d_ff));

    let mut x = Array2::<f32>::zeros((t_len, d));
    for (t, (&id, mut row)) in tokens.iter().zip(x.outer_iter_mut()).enumerate() {
        row.assign(&(&params.wte.row(id as usize) + &params.wpe.row(t)));
    }

    let scale = 1.0 / (c.d_head() as f32).sqrt();
    for (l, layer) in params.layers.iter().enumerate() {
        residual_pre.index_axis_mut(Axis(0), l).assign(&x);

        let normed = layer.ln1.apply_rows(x.view());
        let mut block = Array2::<f32>::zeros((t_len, d));
        for (h, head) in layer.heads.iter().enumerate() {
            let q = normed.dot(&head.w_q) + &head.b_q;
            let k = normed.dot(&head.w_k) + &head.b_k;
            let z = normed.dot(&head.w_v).dot(&head.w_o);
            let mut weights = q.dot(&k.t());
            for (i, mut row) in weights.outer_iter_mut().enumerate() {
                causal_softmax(row.as_slice_mut().expect("contiguous row"), i, scale);
            }
            block += &weights.dot(&z);
            attn.slice_mut(s![l, h, .., ..]).assign(&weights);
            head_values.slice_mut(s![l, h, .., ..]).assign(&z);
        }
        block += &layer.attn_bias();
        x += &block;
        residual_mid.index_axis_mut(Axis(0), l).assign(&x);

        let normed = layer.ln2.apply_rows(x.view());
        let pre_act = normed.dot(&layer.w_in) + &layer.b_in;
        let post_act = pre_act.mapv(gelu);
        let out = post_act.dot(&layer.w_out) + &layer.b_out;
        x += &out;
        ffn_pre_act.index_axis_mut(Axis(0), l).assign(&pre_act);
        ffn_post_act.index_axis_mut(Axis(0), l).assign(&post_act);
        residual_post.index_axis_mut(Axis(0), l).assign(&x);
    }

    let final_logits = params.ln_f.apply_rows(x.view()).dot(&params.wte.t());
    Ok(RunCapture {
        tokens: tokens.to_vec(),
        token_strings,
        residual_pre,
        residual_mid,
        residual_post,
        attn,
        head_values,
        ffn_pre_act,
        ffn_post_act,
        final_logits,
    })
}

/// Scaled, causally masked softmax of one score row for query `i`, in place.
/// Masked entries come out as exact zeros.
fn causal_softmax(row: &mut [f32], i: usize, scale: f32) {
    for (j, v) in row.iter_mut().enumerate() {
        *v = if j <= i { *v * scale } else { f32::NEG_INFINITY };
    }
    let max = row[..=i].iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Additive split of the attention update at `(layer, position)` into
/// head × source-token terms plus one bias term.
#[derive(Debug, Clone)]
pub struct AttnTermSet {
    pub layer: usize,
    pub position: usize,
    /// `[H, position + 1, d]`
    pub terms: Array3<f32>,
    pub bias: Array1<f32>,
}

impl AttnTermSet {
    pub fn term(&self, head: usize, source: usize) -> ArrayView1<'_, f32> {
        self.terms.slice(s![head, source, ..])
    }

    /// `Σ_{h,j} t_{h,j} + b`
    pub fn reconstruct(&self) -> Array1<f32> {
        let mut out = self.bias.clone();
        for head in self.terms.outer_iter() {
            out += &head.sum_axis(Axis(0));
        }
        out
    }
}

/// Additive split of the FFN update at `(layer, position)` into per-neuron
/// terms plus the output bias.
#[derive(Debug, Clone)]
pub struct FfnTermSet {
    pub layer: usize,
    pub position: usize,
    /// `[d_ff, d]`, row `n` = activation · `W_out[n]`.
    pub terms: Array2<f32>,
    pub bias: Array1<f32>,
}

impl FfnTermSet {
    pub fn reconstruct(&self) -> Array1<f32> {
        self.terms.sum_axis(Axis(0)) + &self.bias
    }
}

pub fn attn_terms(capture: &RunCapture, params: &ModelParams, layer: usize, position: usize) -> Result<AttnTermSet> {
    capture.check_layer(layer)?;
    capture.check_position(position)?;
    let (n_head, d) = (capture.n_head(), capture.d_model());
    let mut terms = Array3::zeros((n_head, position + 1, d));
    for h in 0..n_head {
        let weights = capture.attn.slice(s![layer, h, position, ..=position]);
        let values = capture.head_values.slice(s![layer, h, ..=position, ..]);
        Zip::from(terms.index_axis_mut(Axis(0), h).outer_iter_mut())
            .and(&weights)
            .and(values.outer_iter())
            .for_each(|mut dst, &w, v| dst.assign(&(&v * w)));
    }
    Ok(AttnTermSet {
        layer,
        position,
        terms,
        bias: params.layers[layer].attn_bias(),
    })
}

pub fn ffn_terms(capture: &RunCapture, params: &ModelParams, layer: usize, position: usize) -> Result<FfnTermSet> {
    capture.check_layer(layer)?;
    capture.check_position(position)?;
    let layer_params = &params.layers[layer];
    let acts = capture.ffn_post_act.slice(s![layer, position, ..]);
    let mut terms = layer_params.w_out.clone();
    for (mut row, &a) in terms.outer_iter_mut().zip(acts.iter()) {
        row *= a;
    }
    Ok(FfnTermSet {
        layer,
        position,
        terms,
        bias: layer_params.b_out.clone(),
    })
}
