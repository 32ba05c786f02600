//! Residual-stream attribution for GPT-2-class transformers.
//!
//! One instrumented forward pass ([`transformer::run`]) captures every
//! residual state, attention pattern and neuron activation. Everything else
//! works off that capture without re-running the model:
//!
//! * [`attribution`] scores each additive term of a residual update (one per
//!   head × source token, or per FFN neuron) and aggregates them into head,
//!   edge and block importances;
//! * [`flowgraph`] extracts the important information-flow subgraph for a
//!   set of target positions at a chosen threshold;
//! * [`lens`] projects residual states and component updates onto the
//!   vocabulary.
//!
//! [`service`] exposes the same analyses over HTTP and [`payload`] defines
//! the documents shared by the service and the `resflow` command line tool.
//!
//! ```no_run
//! use resflow::{flowgraph, registry, transformer};
//!
//! let model = registry::load_named_model("gpt2", "gpt2", None)?;
//! let capture = transformer::run_text(&model.params, &model.vocab, "The capital of France is")?;
//! let last = capture.seq_len() - 1;
//! let graph = flowgraph::build_graph(&capture, &model.params, 0.04, &[last])?;
//! println!("{} edges", graph.edges.len());
//! # Ok::<(), resflow::Error>(())
//! ```

pub mod archive;
pub mod attribution;
mod error;
pub mod flowgraph;
pub mod lens;
pub mod model;
pub mod payload;
pub mod registry;
pub mod service;
pub mod tokenizer;
pub mod toy;
pub mod transformer;

pub use error::{Error, Result};
