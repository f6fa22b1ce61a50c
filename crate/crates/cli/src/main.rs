//! `rcstat` command-line front end.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rcstat::kv::{Scorer, C_SWEEP};

const JOBS_ENV: &str = "RCSTAT_JOBS";

#[derive(Parser, Debug)]
#[command(
    name = "rcstat",
    version,
    about = "Relative contextualization statistics over attention logits"
)]
struct Cli {
    /// Worker threads; `RCSTAT_JOBS` takes precedence. Defaults to available parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dump with planted tokens.
    Synth(SynthArgs),
    /// Per-head RC of the whole prompt against the generation.
    Heads(HeadsArgs),
    /// CDF-area bounds and Markov tail bounds for one span pair.
    Bounds(BoundsArgs),
    /// Eviction sweep over threshold multipliers.
    Evict(EvictArgs),
    /// Value error rate of a saved eviction plan.
    Ver(VerArgs),
    /// Attribute the generation to prompt spans.
    Attribute(AttributeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exact,
    #[value(alias = "upper-bound", alias = "upper")]
    UpperBound,
    Auto,
}

#[derive(Args, Debug)]
pub struct OutputArgs {
    /// Output file; stdout when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Destination directory.
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON generator config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub total_len: Option<usize>,
    /// Planted prompt positions, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub planted: Vec<usize>,
    /// Contextual head as `layer:head:boost[:offset]`; repeatable.
    #[arg(long = "contextual")]
    pub contextual: Vec<String>,
}

#[derive(Args, Debug)]
pub struct HeadsArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Count heads whose overlap upper bound exceeds this.
    #[arg(long, default_value_t = 1.5)]
    pub tau: f64,
    /// `exact` adds the exact expectation; `upper_bound` reports areas only.
    #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Args, Debug)]
pub struct BoundsArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Cross span as `start:end`; defaults to the whole prompt.
    #[arg(long)]
    pub span: Option<String>,
    /// Generation queries as `start:end`; defaults to the whole generation.
    #[arg(long)]
    pub gprime: Option<String>,
    /// Tail probabilities for the Markov bound; repeatable.
    #[arg(long = "delta", default_values_t = [0.5, 0.1, 0.05])]
    pub delta: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Args, Debug)]
pub struct EvictArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Threshold multipliers; repeatable.
    #[arg(long = "c", default_values_t = C_SWEEP)]
    pub c: Vec<f64>,
    /// Observation window: the last `w` prompt tokens.
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    /// Always-kept prefix length.
    #[arg(long, default_value_t = 4)]
    pub sink: usize,
    #[arg(long, default_value_t = Scorer::RcstatExact)]
    pub scorer: Scorer,
    /// Skip VER even when values are present.
    #[arg(long)]
    pub no_ver: bool,
    /// Write the plan at `c = 1` as JSON.
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Args, Debug)]
pub struct VerArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Plan JSON written by `evict --plan-out`.
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Args, Debug)]
pub struct AttributeArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// JSON list of prompt index ranges.
    #[arg(long)]
    pub spans: PathBuf,
    /// Generation span of interest as `start:end`; defaults to all of it.
    #[arg(long)]
    pub gprime: Option<String>,
    /// Number of heads to keep.
    #[arg(long, default_value_t = rcstat::attribution::DEFAULT_K)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Auto)]
    pub mode: ModeArg,
    /// Use the lowest-ranked heads instead of the highest.
    #[arg(long)]
    pub bottom: bool,
    /// Reject overlapping spans.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(flatten)]
    pub out: OutputArgs,
}

/// Bad invocation detected after parsing; exits with code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn resolve_jobs(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    match std::env::var(JOBS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(format!("{JOBS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => match flag {
            Some(0) => Err(usage("--jobs must be positive")),
            other => Ok(other),
        },
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = resolve_jobs(cli.jobs)? {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Heads(a) => commands::heads(a),
        Command::Bounds(a) => commands::bounds(a),
        Command::Evict(a) => commands::evict(a),
        Command::Ver(a) => commands::ver(a),
        Command::Attribute(a) => commands::attribute(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
