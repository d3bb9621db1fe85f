//! `steerkit`: the pipeline as composable subcommands over one JSON config.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use steerkit::textualizer::TaskKind;

use crate::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "steerkit", version, about = "Fact-guided activation steering pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Named flags override the config file;
/// `--set field.path=value` reaches any other field.
#[derive(Debug, Args)]
struct Global {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "out-dir", global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FIELD=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    annotations: Option<PathBuf>,
    #[arg(long, global = true)]
    rasters: Option<PathBuf>,
    #[arg(long = "tau-overlap", global = true)]
    tau_overlap: Option<f64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long = "learning-rate", global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long = "batch-size", global = true)]
    batch_size: Option<usize>,
    #[arg(long = "weight-decay", global = true)]
    weight_decay: Option<f64>,
    #[arg(long = "bias-strength", global = true)]
    bias_strength: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Template,
    Remote,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolingArg {
    LastToken,
    MeanTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Discriminative,
    Generative,
}

impl TaskArg {
    pub fn kind(self) -> TaskKind {
        match self {
            TaskArg::Discriminative => TaskKind::Discriminative,
            TaskArg::Generative => TaskKind::Generative,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskArg::Discriminative => "discriminative",
            TaskArg::Generative => "generative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Fas,
    After,
}

/// Single-valued steering overrides.
#[derive(Debug, Args, Default)]
pub struct SteerFlags {
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f32>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fact sets for every image of an annotation file.
    ExtractFacts,
    /// Full factual descriptions from extracted fact sets.
    Textualize,
    /// Question sets and query-focused contrast pairs per image.
    GenQuestions {
        #[arg(long, value_enum, default_value = "discriminative")]
        task: TaskArg,
    },
    /// Train (or load) the toy model and capture calibration activations.
    DumpActivations {
        /// Reuse this checkpoint instead of training.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Steering field and top-K edit plan from captured activations.
    ComputeField {
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[command(flatten)]
        steer: SteerFlags,
    },
    /// Per-head offset estimators from query-focused activations.
    TrainOffset {
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[command(flatten)]
        steer: SteerFlags,
    },
    /// Evaluate one arm on the held-out scenes.
    Eval {
        #[arg(long, value_enum, default_value = "after")]
        mode: ModeArg,
        #[command(flatten)]
        steer: SteerFlags,
    },
    /// AFTER-arm accuracy over a grid of K and alpha, as CSV.
    Sweep {
        #[arg(long = "K", value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long = "alpha", value_delimiter = ',', required = true)]
        alphas: Vec<f32>,
    },
    /// Field magnitudes and 1-D PCA of head activations, as CSV.
    Analyze {
        #[arg(long)]
        magnitudes: bool,
        #[arg(long)]
        pca: bool,
        /// Head for `--pca`; defaults to the top-ranked head.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        head: Option<usize>,
        #[arg(long, value_enum, default_value = "discriminative")]
        task: TaskArg,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::ExtractFacts => "extract-facts",
            Command::Textualize => "textualize",
            Command::GenQuestions { .. } => "gen-questions",
            Command::DumpActivations { .. } => "dump-activations",
            Command::ComputeField { .. } => "compute-field",
            Command::TrainOffset { .. } => "train-offset",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Analyze { .. } => "analyze",
        }
    }

    fn steer(&self) -> Option<&SteerFlags> {
        match self {
            Command::ComputeField { steer, .. } | Command::TrainOffset { steer, .. } | Command::Eval { steer, .. } => {
                Some(steer)
            }
            _ => None,
        }
    }
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, String> {
    let g = &cli.global;
    let mut out: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: String| out.push((k.to_string(), v));
    let json = |s: &str| serde_json::Value::String(s.to_string()).to_string();
    if let Some(v) = g.seed {
        push("seed", v.to_string());
        push("textualizer.seed", v.to_string());
    }
    if let Some(v) = &g.out_dir {
        push("paths.out_dir", json(&v.to_string_lossy()));
    }
    if let Some(v) = &g.annotations {
        push("paths.annotations", json(&v.to_string_lossy()));
    }
    if let Some(v) = &g.rasters {
        push("paths.rasters", json(&v.to_string_lossy()));
    }
    if let Some(v) = g.tau_overlap {
        push("facts.tau_overlap", v.to_string());
    }
    if let Some(v) = g.backend {
        push("textualizer.backend", json(if matches!(v, BackendArg::Remote) { "remote" } else { "template" }));
    }
    if let Some(v) = &g.endpoint {
        push("textualizer.remote.endpoint", json(v));
    }
    if let Some(v) = g.n {
        push("textualizer.n", v.to_string());
    }
    if let Some(v) = g.pooling {
        push("steering.pooling", json(if matches!(v, PoolingArg::MeanTokens) { "mean_tokens" } else { "last_token" }));
    }
    if let Some(v) = g.learning_rate {
        push("training.learning_rate", v.to_string());
    }
    if let Some(v) = g.epochs {
        push("training.epochs", v.to_string());
    }
    if let Some(v) = g.batch_size {
        push("training.batch_size", v.to_string());
    }
    if let Some(v) = g.weight_decay {
        push("training.weight_decay", v.to_string());
    }
    if let Some(v) = g.bias_strength {
        push("harness.model.bias_strength", v.to_string());
    }
    if let Some(s) = cli.command.steer() {
        if let Some(k) = s.k {
            push("steering.K", k.to_string());
        }
        if let Some(a) = s.alpha {
            push("steering.alpha", a.to_string());
        }
    }
    for item in &g.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| format!("--set expects FIELD=VALUE, got '{item}'"))?;
        push(k, v.to_string());
    }
    Ok(out)
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("STEERKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("STEERKIT_THREADS must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn usage(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_threads() {
        return usage(e);
    }
    let flags = match overrides(&cli) {
        Ok(f) => f,
        Err(e) => return usage(e),
    };
    let cfg = match PipelineConfig::load(cli.global.config.as_deref(), &flags) {
        Ok(c) => c,
        Err(e) if e.is_data_error() => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
        Err(e) => return usage(e),
    };
    let name = cli.command.name();
    match commands::run(&cli.command, &cfg) {
        Ok(mut summary) => {
            let obj = summary.as_object_mut().expect("summaries are objects");
            obj.insert("command".into(), name.into());
            obj.insert("ok".into(), true.into());
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {name}: {e}");
            println!("{}", serde_json::json!({ "command": name, "ok": false, "error": e.to_string() }));
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
