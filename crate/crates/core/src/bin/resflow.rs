//! `resflow serve CONFIG` runs the HTTP service; `resflow analyze ...` writes
//! analysis documents for one or more prompts to a directory.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use resflow::flowgraph::DEFAULT_THRESHOLD;
use resflow::payload::{to_json_bytes, Analysis, Targets};
use resflow::registry::{load_named_model, LoadedModel};
use resflow::service::{self, ServiceConfig};
use resflow::transformer::{run_text, Point};
use resflow::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_OVERSIZE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "resflow",
    version,
    about = "Information-flow analysis for GPT-2-class models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve {
        /// Path to the JSON configuration.
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8000")]
        bind: SocketAddr,
    },
    /// Analyze prompts and write documents to disk.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Graph,
    Dot,
    Lens,
    Heads,
    Neurons,
}

impl Format {
    fn name(self) -> &'static str {
        match self {
            Format::Graph => "graph",
            Format::Dot => "dot",
            Format::Lens => "lens",
            Format::Heads => "heads",
            Format::Neurons => "neurons",
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Format::Dot => "dot",
            _ => "json",
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Service configuration; supplies models, threshold and length limit.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model name from the configuration, or a model directory / hub id
    /// when no configuration is given.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    text: Option<String>,
    /// Newline-delimited prompts.
    #[arg(long)]
    file: Option<PathBuf>,
    /// Edge threshold in [0, 1] (default: from the configuration, else 0.04).
    #[arg(long)]
    threshold: Option<f64>,
    /// `last`, `all` or a comma-separated list of positions.
    #[arg(long, default_value = "last")]
    targets: String,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "format", value_enum, required = true)]
    formats: Vec<Format>,
    /// Entries in lens and neuron tables.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Apply the final layer norm before projecting residual states.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    apply_ln: bool,
    /// Layer for lens, heads and neurons (default: last layer).
    #[arg(long)]
    layer: Option<usize>,
    /// Position for lens, heads and neurons (default: last token).
    #[arg(long)]
    position: Option<usize>,
    /// Residual point for lens.
    #[arg(long, default_value = "post")]
    point: String,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Index(_)
            | Error::InvalidThreshold(_)
            | Error::EmptyTargets
            | Error::EmptyInput
            | Error::ContextOverflow { .. } => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { config, bind } => serve(&config, bind),
        Command::Analyze(args) => analyze(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("resflow: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn serve(config: &Path, bind: SocketAddr) -> Result<(), Failure> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let config = ServiceConfig::load(config).map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    runtime
        .block_on(service::serve(config, bind))
        .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))
}

/// First 12 hex digits of SHA-256 over model, text and threshold.
fn content_hash(model: &str, text: &str, threshold: f64) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0]);
    h.update(text.as_bytes());
    h.update([0]);
    h.update(format!("{threshold}").as_bytes());
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn read_prompts(args: &AnalyzeArgs) -> Result<Vec<String>, Failure> {
    if let Some(text) = &args.text {
        return Ok(vec![text.clone()]);
    }
    let path = args.file.as_ref().expect("clap enforces --text or --file");
    let body =
        std::fs::read_to_string(path).map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", path.display())))?;
    Ok(body
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    let config = args
        .config
        .as_ref()
        .map(|p| ServiceConfig::load(p).map_err(|e| Failure::new(EXIT_USAGE, e.to_string())))
        .transpose()?;
    let threshold = args
        .threshold
        .or(config.as_ref().map(|c| c.default_threshold))
        .unwrap_or(DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidThreshold(threshold).into());
    }
    let targets: Targets = args.targets.parse()?;
    let point: Point = args.point.parse()?;

    let prompts = read_prompts(args)?;
    if prompts.is_empty() {
        return Err(Failure::new(EXIT_USAGE, "no prompts given"));
    }
    if let Some(c) = &config {
        for (i, p) in prompts.iter().enumerate() {
            let n = p.chars().count();
            if n > c.max_user_string_length {
                return Err(Failure::new(
                    EXIT_OVERSIZE,
                    format!(
                        "prompt {i} has {n} characters, the limit is {}",
                        c.max_user_string_length
                    ),
                ));
            }
        }
    }

    let model = load(args, config.as_ref())?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", args.out.display())))?;

    prompts
        .par_iter()
        .enumerate()
        .try_for_each(|(idx, text)| write_prompt(args, &model, idx, text, threshold, &targets, point))
}

fn load(args: &AnalyzeArgs, config: Option<&ServiceConfig>) -> Result<LoadedModel, Failure> {
    let loaded = match config {
        Some(c) => {
            let name = args.model.clone().unwrap_or_else(|| c.default_model.clone());
            let reference = c
                .model_reference(&name)
                .ok_or_else(|| Failure::new(EXIT_MODEL, format!("model `{name}` is not configured")))?;
            load_named_model(&name, reference, Some(&c.base_dir))
        }
        None => {
            let name = args
                .model
                .clone()
                .ok_or_else(|| Failure::new(EXIT_USAGE, "either --config or --model is required"))?;
            load_named_model(&name, &name, None)
        }
    };
    loaded.map_err(|e| Failure::new(EXIT_MODEL, format!("cannot load model: {e}")))
}

fn write_prompt(
    args: &AnalyzeArgs,
    model: &LoadedModel,
    idx: usize,
    text: &str,
    threshold: f64,
    targets: &Targets,
    point: Point,
) -> Result<(), Failure> {
    let capture = run_text(&model.params, &model.vocab, text)?;
    let analysis = Analysis::new(&model.params, Some(&model.vocab), &capture);
    let layer = args.layer.unwrap_or(capture.n_layer() - 1);
    let position = args.position.unwrap_or(capture.seq_len() - 1);
    let hash = content_hash(&model.name, text, threshold);

    for &format in &args.formats {
        let body = match format {
            Format::Graph => to_json_bytes(&analysis.graph(threshold, targets)?),
            Format::Dot => analysis.graph(threshold, targets)?.to_dot().into_bytes(),
            Format::Lens => to_json_bytes(&analysis.lens(layer, point, position, args.k, args.apply_ln)?),
            Format::Heads => to_json_bytes(&analysis.heads(layer, position)?),
            Format::Neurons => to_json_bytes(&analysis.neurons(layer, position, args.k)?),
        };
        let path = args
            .out
            .join(format!("{idx:03}-{hash}-{}.{}", format.name(), format.extension()));
        std::fs::write(&path, body).map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
