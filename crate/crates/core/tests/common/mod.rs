//! Shared oracles and fixture loaders for the integration tests and the
//! acceptance harness. The oracle is a plain-loop f64 GPT-2 that shares no
//! code with the library beyond the parameter structs.

#![allow(dead_code)]

use std::path::PathBuf;

use resflow::archive::open_archive;
use resflow::model::{LayerNorm, ModelParams};
use serde::Deserialize;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn gpt2_assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/gpt2")
}

#[derive(Debug, Deserialize)]
pub struct ReferencePrompt {
    pub text: String,
    pub ids: Vec<u32>,
    pub argmax: u32,
    pub gap: f64,
}

/// Prompts and float64 final-position logits computed by `transformers`
/// for the `tiny-gpt2` fixture.
pub fn tiny_gpt2_reference() -> (Vec<ReferencePrompt>, Vec<Vec<f32>>) {
    let dir = fixtures();
    let meta: Vec<ReferencePrompt> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("tiny-gpt2-reference.json")).unwrap()).unwrap();
    let archive = open_archive(dir.join("tiny-gpt2-reference.safetensors")).unwrap();
    let logits = &archive["logits"];
    let width = logits.shape[1];
    let rows = logits.data.chunks(width).map(<[f32]>::to_vec).collect();
    (meta, rows)
}

#[derive(Debug, Deserialize)]
pub struct CorpusLine {
    pub text: String,
    pub ids: Vec<u32>,
}

pub fn tokenizer_corpus() -> Vec<CorpusLine> {
    std::fs::read_to_string(fixtures().join("tokenizer-corpus.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Straight-line f64 reference forward pass
// ---------------------------------------------------------------------------

pub type Vector = Vec<f64>;

pub struct OracleRun {
    /// `[L][T]` residual states entering each layer.
    pub pre: Vec<Vec<Vector>>,
    pub mid: Vec<Vec<Vector>>,
    pub post: Vec<Vec<Vector>>,
    /// `[L][H][T][T]`
    pub attn: Vec<Vec<Vec<Vector>>>,
    /// `[L][T][d_ff]`
    pub acts: Vec<Vec<Vector>>,
    /// `[T][V]`
    pub logits: Vec<Vector>,
}

fn layer_norm(ln: &LayerNorm, x: &[f64]) -> Vector {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + ln.eps as f64).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * ln.scale[i] as f64 + ln.bias[i] as f64)
        .collect()
}

/// `x · W` for `W` stored `[in, out]`.
fn matvec(x: &[f64], w: &ndarray::Array2<f32>) -> Vector {
    let (rows, cols) = w.dim();
    assert_eq!(rows, x.len());
    let mut out = vec![0.0; cols];
    for (r, &xv) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xv * w[[r, c]] as f64;
        }
    }
    out
}

fn add_bias(mut v: Vector, b: &ndarray::Array1<f32>) -> Vector {
    for (x, &y) in v.iter_mut().zip(b.iter()) {
        *x += y as f64;
    }
    v
}

pub fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn oracle_forward(p: &ModelParams, tokens: &[u32]) -> OracleRun {
    let c = &p.config;
    let t_len = tokens.len();
    let d_head = c.d_model / c.n_head;
    let mut x: Vec<Vector> = tokens
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            (0..c.d_model)
                .map(|k| p.wte[[tok as usize, k]] as f64 + p.wpe[[i, k]] as f64)
                .collect()
        })
        .collect();
    let mut run = OracleRun {
        pre: vec![],
        mid: vec![],
        post: vec![],
        attn: vec![],
        acts: vec![],
        logits: vec![],
    };
    for layer in &p.layers {
        run.pre.push(x.clone());
        let normed: Vec<Vector> = x.iter().map(|r| layer_norm(&layer.ln1, r)).collect();
        let mut out: Vec<Vector> = vec![layer.b_o.iter().map(|&v| v as f64).collect(); t_len];
        let mut layer_attn = vec![];
        for head in &layer.heads {
            let q: Vec<Vector> = normed
                .iter()
                .map(|r| add_bias(matvec(r, &head.w_q), &head.b_q))
                .collect();
            let k: Vec<Vector> = normed
                .iter()
                .map(|r| add_bias(matvec(r, &head.w_k), &head.b_k))
                .collect();
            let v: Vec<Vector> = normed
                .iter()
                .map(|r| add_bias(matvec(r, &head.w_v), &head.b_v))
                .collect();
            let mut weights = vec![vec![0.0; t_len]; t_len];
            for i in 0..t_len {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d_head as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..=i {
                    weights[i][j] = (scores[j] - m).exp() / z;
                }
                let mut mixed = vec![0.0; d_head];
                for j in 0..=i {
                    for (acc, vv) in mixed.iter_mut().zip(&v[j]) {
                        *acc += weights[i][j] * vv;
                    }
                }
                for (o, add) in out[i].iter_mut().zip(matvec(&mixed, &head.w_o)) {
                    *o += add;
                }
            }
            layer_attn.push(weights);
        }
        run.attn.push(layer_attn);
        for (r, o) in x.iter_mut().zip(&out) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
        run.mid.push(x.clone());
        let mut acts_layer = vec![];
        for r in x.iter_mut() {
            let h = add_bias(matvec(&layer_norm(&layer.ln2, r), &layer.w_in), &layer.b_in);
            let a: Vector = h.into_iter().map(gelu_tanh).collect();
            let f = add_bias(matvec(&a, &layer.w_out), &layer.b_out);
            for (rv, fv) in r.iter_mut().zip(f) {
                *rv += fv;
            }
            acts_layer.push(a);
        }
        run.acts.push(acts_layer);
        run.post.push(x.clone());
    }
    run.logits = x.iter().map(|r| unembed(p, &layer_norm(&p.ln_f, r))).collect();
    run
}

/// `r · Uᵀ` with the tied embedding matrix.
pub fn unembed(p: &ModelParams, r: &[f64]) -> Vector {
    p.wte
        .outer_iter()
        .map(|row| row.iter().zip(r).map(|(&u, &x)| u as f64 * x).sum())
        .collect()
}

pub fn final_layer_norm(p: &ModelParams, r: &[f64]) -> Vector {
    layer_norm(&p.ln_f, r)
}

pub fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `ĉ` recomputed from scratch: `max(0, ‖y‖₁ − ‖y − t‖₁)`, normalized.
pub fn oracle_contributions(y: &[f64], terms: &[Vector]) -> Vec<f64> {
    let y_l1: f64 = y.iter().map(|v| v.abs()).sum();
    let raw: Vec<f64> = terms
        .iter()
        .map(|t| {
            let dist: f64 = y.iter().zip(t).map(|(a, b)| (a - b).abs()).sum();
            (y_l1 - dist).max(0.0)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / terms.len() as f64; terms.len()]
    }
}

/// Target and terms of the attention step at `(l, i)` in library label
/// order: residual, head-major `(h, j)` tokens, bias.
pub fn oracle_attn_terms(p: &ModelParams, run: &OracleRun, l: usize, i: usize) -> (Vector, Vec<Vector>) {
    let layer = &p.layers[l];
    let mut terms = vec![run.pre[l][i].clone()];
    let normed: Vec<Vector> = run.pre[l].iter().map(|r| layer_norm(&layer.ln1, r)).collect();
    for (h, head) in layer.heads.iter().enumerate() {
        for (j, x) in normed.iter().enumerate().take(i + 1) {
            let z = matvec(&matvec(x, &head.w_v), &head.w_o);
            terms.push(z.into_iter().map(|v| v * run.attn[l][h][i][j]).collect());
        }
    }
    let mut bias: Vector = layer.b_o.iter().map(|&v| v as f64).collect();
    for head in &layer.heads {
        let bv: Vector = head.b_v.iter().map(|&v| v as f64).collect();
        for (b, add) in bias.iter_mut().zip(matvec(&bv, &head.w_o)) {
            *b += add;
        }
    }
    terms.push(bias);
    (run.mid[l][i].clone(), terms)
}

/// Target and terms of the FFN step at `(l, i)`: residual, one term per
/// neuron, bias.
pub fn oracle_ffn_terms(p: &ModelParams, run: &OracleRun, l: usize, i: usize) -> (Vector, Vec<Vector>) {
    let layer = &p.layers[l];
    let mut terms = vec![run.mid[l][i].clone()];
    for (n, &a) in run.acts[l][i].iter().enumerate() {
        terms.push(layer.w_out.row(n).iter().map(|&w| w as f64 * a).collect());
    }
    terms.push(layer.b_out.iter().map(|&v| v as f64).collect());
    (run.post[l][i].clone(), terms)
}
