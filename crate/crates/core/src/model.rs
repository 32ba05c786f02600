//! Model configuration and the immutable parameter set of a GPT-2-class
//! pre-LN decoder.
//!
//! All linear weights are kept input-major (applied as `x · W`), which is how
//! GPT-2 checkpoints store their `Conv1D` layers. Tensor names follow the
//! GPT-2 checkpoint layout; an optional `transformer.` prefix is accepted.
//!
//! | tensor                    | shape                  |
//! |---------------------------|------------------------|
//! | `wte.weight`              | `[n_vocab, d_model]`   |
//! | `wpe.weight`              | `[n_ctx, d_model]`     |
//! | `h.{l}.ln_1.{weight,bias}`| `[d_model]`            |
//! | `h.{l}.attn.c_attn.weight`| `[d_model, 3*d_model]` |
//! | `h.{l}.attn.c_attn.bias`  | `[3*d_model]`          |
//! | `h.{l}.attn.c_proj.weight`| `[d_model, d_model]`   |
//! | `h.{l}.attn.c_proj.bias`  | `[d_model]`            |
//! | `h.{l}.ln_2.{weight,bias}`| `[d_model]`            |
//! | `h.{l}.mlp.c_fc.weight`   | `[d_model, d_ff]`      |
//! | `h.{l}.mlp.c_fc.bias`     | `[d_ff]`               |
//! | `h.{l}.mlp.c_proj.weight` | `[d_ff, d_model]`      |
//! | `h.{l}.mlp.c_proj.bias`   | `[d_model]`            |
//! | `ln_f.{weight,bias}`      | `[d_model]`            |
//!
//! The unembedding is tied: logits are `x · wteᵀ`.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Dtype, TensorMap, TensorRecord};
use crate::error::{Error, Result};

pub const DEFAULT_LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    GeluTanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    LearnedAbsolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_vocab: usize,
    pub n_ctx: usize,
    pub ln_eps: f32,
    pub activation: Activation,
    pub positional: Positional,
}

impl ModelConfig {
    /// A GPT-2-class config with the default epsilon and activation.
    pub fn new(n_layer: usize, n_head: usize, d_model: usize, d_ff: usize, n_vocab: usize, n_ctx: usize) -> Self {
        Self {
            n_layer,
            n_head,
            d_model,
            d_ff,
            n_vocab,
            n_ctx,
            ln_eps: DEFAULT_LN_EPS,
            activation: Activation::GeluTanh,
            positional: Positional::LearnedAbsolute,
        }
    }

    pub fn gpt2_small() -> Self {
        Self::new(12, 12, 768, 3072, 50257, 1024)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_layer == 0 || self.n_head == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad(format!("all dimensions must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return bad(format!(
                "d_model {} is not divisible by n_head {}",
                self.d_model, self.n_head
            ));
        }
        if self.n_ctx == 0 || self.n_vocab == 0 {
            return bad("n_ctx and n_vocab must be at least 1".into());
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return bad(format!("ln_eps must be a small positive number, got {}", self.ln_eps));
        }
        Ok(())
    }

    /// Reads a Hugging Face style GPT-2 `config.json` document.
    pub fn from_hf_json(doc: &serde_json::Value) -> Result<Self> {
        let get = |key: &str| -> Result<usize> {
            doc.get(key)
                .and_then(serde_json::Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::InvalidConfig(format!("config is missing integer `{key}`")))
        };
        if let Some(kind) = doc.get("model_type").and_then(|v| v.as_str()) {
            if kind != "gpt2" {
                return Err(Error::InvalidConfig(format!(
                    "unsupported model_type `{kind}` (only gpt2 is implemented)"
                )));
            }
        }
        if let Some(act) = doc.get("activation_function").and_then(|v| v.as_str()) {
            if !matches!(act, "gelu_new" | "gelu_pytorch_tanh" | "gelu_tanh") {
                return Err(Error::InvalidConfig(format!("unsupported activation `{act}`")));
            }
        }
        let d_model = get("n_embd")?;
        let d_ff = match doc.get("n_inner") {
            None | Some(serde_json::Value::Null) => 4 * d_model,
            Some(_) => get("n_inner")?,
        };
        let ln_eps = doc
            .get("layer_norm_epsilon")
            .and_then(|v| v.as_f64())
            .map(|v| v as f32)
            .unwrap_or(DEFAULT_LN_EPS);
        let config = Self {
            ln_eps,
            ..Self::new(
                get("n_layer")?,
                get("n_head")?,
                d_model,
                d_ff,
                get("vocab_size")?,
                get("n_positions")?,
            )
        };
        config.validate()?;
        Ok(config)
    }

    /// Inverse of [`ModelConfig::from_hf_json`].
    pub fn to_hf_json(&self) -> serde_json::Value {
        serde_json::json!({
            "model_type": "gpt2",
            "n_layer": self.n_layer,
            "n_head": self.n_head,
            "n_embd": self.d_model,
            "n_inner": self.d_ff,
            "vocab_size": self.n_vocab,
            "n_positions": self.n_ctx,
            "layer_norm_epsilon": self.ln_eps,
            "activation_function": "gelu_new",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Array1<f32>,
    pub bias: Array1<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn apply(&self, x: ArrayView1<f32>) -> Array1<f32> {
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + self.eps as f64).sqrt();
        let mut out = Array1::zeros(x.len());
        for (k, o) in out.iter_mut().enumerate() {
            *o = ((x[k] as f64 - mean) * inv) as f32 * self.scale[k] + self.bias[k];
        }
        out
    }

    /// Row-wise application over a `[T, d]` matrix.
    pub fn apply_rows(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut out = Array2::zeros(x.raw_dim());
        for (row, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            dst.assign(&self.apply(row));
        }
        out
    }
}

/// Projections of one attention head, split out of the fused `c_attn`/`c_proj`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Array2<f32>,
    pub w_k: Array2<f32>,
    pub w_v: Array2<f32>,
    pub b_q: Array1<f32>,
    pub b_k: Array1<f32>,
    pub b_v: Array1<f32>,
    /// `[d_head, d_model]` slice of the output projection.
    pub w_o: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: LayerNorm,
    pub heads: Vec<HeadParams>,
    pub b_o: Array1<f32>,
    pub ln2: LayerNorm,
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

impl LayerParams {
    /// Constant part of the attention output: each head's value bias routed
    /// through its output projection (attention rows sum to one), plus the
    /// output bias.
    pub fn attn_bias(&self) -> Array1<f32> {
        let mut bias = self.b_o.clone();
        for head in &self.heads {
            bias += &head.b_v.dot(&head.w_o);
        }
        bias
    }
}

/// Immutable parameter set. Shared read-only between concurrent runs; the
/// only mutable state is the forward-pass counter used for instrumentation.
#[derive(Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub wte: Array2<f32>,
    pub wpe: Array2<f32>,
    pub layers: Vec<LayerParams>,
    pub ln_f: LayerNorm,
    forward_passes: AtomicU64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.wte == other.wte
            && self.wpe == other.wpe
            && self.layers == other.layers
            && self.ln_f == other.ln_f
    }
}

impl ModelParams {
    /// Number of forward passes run against these parameters so far.
    pub fn forward_pass_count(&self) -> u64 {
        self.forward_passes.load(Ordering::SeqCst)
    }

    pub(crate) fn record_forward_pass(&self) {
        self.forward_passes.fetch_add(1, Ordering::SeqCst);
    }

    /// Tied unembedding: `[n_vocab]` logits for one residual vector.
    pub fn unembed(&self, x: ArrayView1<f32>) -> Array1<f32> {
        self.wte.dot(&x)
    }

    /// Re-fuses the per-head projections and emits the checkpoint tensor map.
    pub fn to_archive(&self, dtype: Dtype) -> TensorMap {
        let c = &self.config;
        let d = c.d_model;
        let dh = c.d_head();
        let mut map = TensorMap::new();
        let mut put = |name: String, arr: ndarray::ArrayViewD<f32>| {
            let rec =
                TensorRecord::new(name.clone(), arr.shape().to_vec(), arr.iter().copied().collect()).with_dtype(dtype);
            map.insert(name, rec);
        };
        put("wte.weight".into(), self.wte.view().into_dyn());
        put("wpe.weight".into(), self.wpe.view().into_dyn());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut c_attn = Array2::<f32>::zeros((d, 3 * d));
            let mut b_attn = Array1::<f32>::zeros(3 * d);
            let mut c_proj = Array2::<f32>::zeros((d, d));
            for (h, head) in layer.heads.iter().enumerate() {
                for (part, (w, b)) in [(&head.w_q, &head.b_q), (&head.w_k, &head.b_k), (&head.w_v, &head.b_v)]
                    .into_iter()
                    .enumerate()
                {
                    let cols = part * d + h * dh..part * d + (h + 1) * dh;
                    c_attn.slice_mut(s![.., cols.clone()]).assign(w);
                    b_attn.slice_mut(s![cols]).assign(b);
                }
                c_proj.slice_mut(s![h * dh..(h + 1) * dh, ..]).assign(&head.w_o);
            }
            let p = format!("h.{l}.");
            put(format!("{p}ln_1.weight"), layer.ln1.scale.view().into_dyn());
            put(format!("{p}ln_1.bias"), layer.ln1.bias.view().into_dyn());
            put(format!("{p}attn.c_attn.weight"), c_attn.view().into_dyn());
            put(format!("{p}attn.c_attn.bias"), b_attn.view().into_dyn());
            put(format!("{p}attn.c_proj.weight"), c_proj.view().into_dyn());
            put(format!("{p}attn.c_proj.bias"), layer.b_o.view().into_dyn());
            put(format!("{p}ln_2.weight"), layer.ln2.scale.view().into_dyn());
            put(format!("{p}ln_2.bias"), layer.ln2.bias.view().into_dyn());
            put(format!("{p}mlp.c_fc.weight"), layer.w_in.view().into_dyn());
            put(format!("{p}mlp.c_fc.bias"), layer.b_in.view().into_dyn());
            put(format!("{p}mlp.c_proj.weight"), layer.w_out.view().into_dyn());
            put(format!("{p}mlp.c_proj.bias"), layer.b_out.view().into_dyn());
        }
        put("ln_f.weight".into(), self.ln_f.scale.view().into_dyn());
        put("ln_f.bias".into(), self.ln_f.bias.view().into_dyn());
        map
    }

    /// Random parameters for tests, benchmarks and fixtures. Weights are
    /// uniform in `[-scale, scale]`; LN scales are near one.
    pub fn random(config: ModelConfig, seed: u64, scale: f32) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let wte = random_mat(&mut rng, c.n_vocab, c.d_model, scale);
        let wpe = random_mat(&mut rng, c.n_ctx, c.d_model, scale);
        let mut layers = Vec::with_capacity(c.n_layer);
        let dh = c.d_head();
        for _ in 0..c.n_layer {
            let ln1 = random_ln(&mut rng, c.d_model, c.ln_eps);
            let heads = (0..c.n_head)
                .map(|_| HeadParams {
                    w_q: random_mat(&mut rng, c.d_model, dh, scale),
                    w_k: random_mat(&mut rng, c.d_model, dh, scale),
                    w_v: random_mat(&mut rng, c.d_model, dh, scale),
                    b_q: random_vec(&mut rng, dh, scale),
                    b_k: random_vec(&mut rng, dh, scale),
                    b_v: random_vec(&mut rng, dh, scale),
                    w_o: random_mat(&mut rng, dh, c.d_model, scale),
                })
                .collect();
            layers.push(LayerParams {
                ln1,
                heads,
                b_o: random_vec(&mut rng, c.d_model, scale),
                ln2: random_ln(&mut rng, c.d_model, c.ln_eps),
                w_in: random_mat(&mut rng, c.d_model, c.d_ff, scale),
                b_in: random_vec(&mut rng, c.d_ff, scale),
                w_out: random_mat(&mut rng, c.d_ff, c.d_model, scale),
                b_out: random_vec(&mut rng, c.d_model, scale),
            });
        }
        let ln_f = random_ln(&mut rng, c.d_model, c.ln_eps);
        Ok(Self::from_parts(config, wte, wpe, layers, ln_f))
    }

    pub fn from_parts(
        config: ModelConfig,
        wte: Array2<f32>,
        wpe: Array2<f32>,
        layers: Vec<LayerParams>,
        ln_f: LayerNorm,
    ) -> Self {
        Self {
            config,
            wte,
            wpe,
            layers,
            ln_f,
            forward_passes: AtomicU64::new(0),
        }
    }
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, k: usize, amp: f32) -> Array2<f32> {
    Array2::from_shape_fn((r, k), |_| rng.gen_range(-amp..=amp))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, amp: f32) -> Array1<f32> {
    Array1::from_shape_fn(n, |_| rng.gen_range(-amp..=amp))
}

fn random_ln(rng: &mut ChaCha8Rng, d: usize, eps: f32) -> LayerNorm {
    LayerNorm {
        scale: Array1::from_shape_fn(d, |_| 1.0 + rng.gen_range(-0.1..=0.1)),
        bias: random_vec(rng, d, 0.1),
        eps,
    }
}

/// Every tensor name `load_model` requires for `config`, in checkpoint order.
pub fn expected_tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["wte.weight".to_string(), "wpe.weight".to_string()];
    for l in 0..config.n_layer {
        for suffix in [
            "ln_1.weight",
            "ln_1.bias",
            "attn.c_attn.weight",
            "attn.c_attn.bias",
            "attn.c_proj.weight",
            "attn.c_proj.bias",
            "ln_2.weight",
            "ln_2.bias",
            "mlp.c_fc.weight",
            "mlp.c_fc.bias",
            "mlp.c_proj.weight",
            "mlp.c_proj.bias",
        ] {
            names.push(format!("h.{l}.{suffix}"));
        }
    }
    names.push("ln_f.weight".into());
    names.push("ln_f.bias".into());
    names
}

struct Fetcher<'a> {
    archive: &'a TensorMap,
}

impl Fetcher<'_> {
    fn raw(&self, name: &str, shape: &[usize]) -> Result<&TensorRecord> {
        let rec = self
            .archive
            .get(name)
            .or_else(|| self.archive.get(&format!("transformer.{name}")))
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if rec.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: rec.shape.clone(),
            });
        }
        Ok(rec)
    }

    fn vec(&self, name: &str, n: usize) -> Result<Array1<f32>> {
        Ok(Array1::from(self.raw(name, &[n])?.data.clone()))
    }

    fn mat(&self, name: &str, r: usize, k: usize) -> Result<Array2<f32>> {
        let rec = self.raw(name, &[r, k])?;
        Ok(Array2::from_shape_vec((r, k), rec.data.clone()).expect("shape validated"))
    }

    fn ln(&self, prefix: &str, d: usize, eps: f32) -> Result<LayerNorm> {
        Ok(LayerNorm {
            scale: self.vec(&format!("{prefix}.weight"), d)?,
            bias: self.vec(&format!("{prefix}.bias"), d)?,
            eps,
        })
    }
}

/// Builds the parameter set from a checkpoint tensor map. Extra tensors (for
/// example cached causal masks) are ignored.
pub fn load_model(archive: &TensorMap, config: ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let f = Fetcher { archive };
    let c = &config;
    let (d, dh, eps) = (c.d_model, c.d_head(), c.ln_eps);

    let wte = f.mat("wte.weight", c.n_vocab, d)?;
    let wpe = f.mat("wpe.weight", c.n_ctx, d)?;
    let mut layers = Vec::with_capacity(c.n_layer);
    for l in 0..c.n_layer {
        let p = format!("h.{l}");
        let c_attn = f.mat(&format!("{p}.attn.c_attn.weight"), d, 3 * d)?;
        let b_attn = f.vec(&format!("{p}.attn.c_attn.bias"), 3 * d)?;
        let c_proj = f.mat(&format!("{p}.attn.c_proj.weight"), d, d)?;
        let heads = (0..c.n_head)
            .map(|h| {
                let cols = |part: usize| part * d + h * dh..part * d + (h + 1) * dh;
                HeadParams {
                    w_q: c_attn.slice(s![.., cols(0)]).to_owned(),
                    w_k: c_attn.slice(s![.., cols(1)]).to_owned(),
                    w_v: c_attn.slice(s![.., cols(2)]).to_owned(),
                    b_q: b_attn.slice(s![cols(0)]).to_owned(),
                    b_k: b_attn.slice(s![cols(1)]).to_owned(),
                    b_v: b_attn.slice(s![cols(2)]).to_owned(),
                    w_o: c_proj.slice(s![h * dh..(h + 1) * dh, ..]).to_owned(),
                }
            })
            .collect();
        layers.push(LayerParams {
            ln1: f.ln(&format!("{p}.ln_1"), d, eps)?,
            heads,
            b_o: f.vec(&format!("{p}.attn.c_proj.bias"), d)?,
            ln2: f.ln(&format!("{p}.ln_2"), d, eps)?,
            w_in: f.mat(&format!("{p}.mlp.c_fc.weight"), d, c.d_ff)?,
            b_in: f.vec(&format!("{p}.mlp.c_fc.bias"), c.d_ff)?,
            w_out: f.mat(&format!("{p}.mlp.c_proj.weight"), c.d_ff, d)?,
            b_out: f.vec(&format!("{p}.mlp.c_proj.bias"), d)?,
        });
    }
    let ln_f = f.ln("ln_f", d, eps)?;
    Ok(ModelParams::from_parts(config, wte, wpe, layers, ln_f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig::new(2, 2, 8, 32, 11, 16)
    }

    #[test]
    fn gpt2_small_has_148_tensors() {
        let names = expected_tensor_names(&ModelConfig::gpt2_small());
        assert_eq!(names.len(), 148);
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), 148);
    }

    #[test]
    fn config_validation() {
        assert!(toy().validate().is_ok());
        let mut c = toy();
        c.n_head = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        c = toy();
        c.n_ctx = 0;
        assert!(c.validate().is_err());
        c = toy();
        c.n_vocab = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hf_config_round_trip() {
        let c = ModelConfig::gpt2_small();
        assert_eq!(ModelConfig::from_hf_json(&c.to_hf_json()).unwrap(), c);
        let doc = serde_json::json!({
            "n_layer": 12, "n_head": 12, "n_embd": 768, "n_inner": null,
            "vocab_size": 50257, "n_positions": 1024, "activation_function": "gelu_new"
        });
        assert_eq!(ModelConfig::from_hf_json(&doc).unwrap(), c);
        let relu = serde_json::json!({
            "n_layer": 1, "n_head": 1, "n_embd": 4, "vocab_size": 3, "n_positions": 4,
            "activation_function": "relu"
        });
        assert!(ModelConfig::from_hf_json(&relu).is_err());
    }

    #[test]
    fn load_round_trips_through_archive() {
        let params = ModelParams::random(toy(), 7, 0.5).unwrap();
        let archive = params.to_archive(Dtype::F32);
        assert_eq!(archive.len(), expected_tensor_names(&toy()).len());
        let loaded = load_model(&archive, toy()).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(loaded.layers.len(), 2);
        // Deterministic: loading twice gives identical parameters.
        assert_eq!(load_model(&archive, toy()).unwrap(), loaded);
    }

    #[test]
    fn prefixed_names_are_accepted() {
        let params = ModelParams::random(toy(), 1, 0.5).unwrap();
        let archive: TensorMap = params
            .to_archive(Dtype::F32)
            .into_iter()
            .map(|(k, mut v)| {
                v.name = format!("transformer.{k}");
                (v.name.clone(), v)
            })
            .collect();
        assert_eq!(load_model(&archive, toy()).unwrap(), params);
    }

    #[test]
    fn missing_final_ln_scale() {
        let mut archive = ModelParams::random(toy(), 1, 0.5).unwrap().to_archive(Dtype::F32);
        archive.remove("ln_f.weight");
        match load_model(&archive, toy()) {
            Err(Error::MissingParameter(name)) => assert_eq!(name, "ln_f.weight"),
            other => panic!("expected MissingParameter, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_against_config() {
        let archive = ModelParams::random(toy(), 1, 0.5).unwrap().to_archive(Dtype::F32);
        let mut wider = toy();
        wider.d_ff = 16;
        assert!(matches!(
            load_model(&archive, wider),
            Err(Error::ShapeMismatch { name, .. }) if name == "h.0.mlp.c_fc.weight"
        ));
    }

    #[test]
    fn attn_bias_routes_value_bias() {
        let params = ModelParams::random(toy(), 3, 0.5).unwrap();
        let layer = &params.layers[0];
        let mut expected = layer.b_o.clone();
        for head in &layer.heads {
            for k in 0..8 {
                expected[k] += (0..4).map(|r| head.b_v[r] * head.w_o[[r, k]]).sum::<f32>();
            }
        }
        let got = layer.attn_bias();
        for k in 0..8 {
            assert!((got[k] - expected[k]).abs() < 1e-6);
        }
    }
}
