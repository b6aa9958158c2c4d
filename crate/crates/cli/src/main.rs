//! `lopub` command-line driver.

mod commands;
mod source;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lopub::estimate::Method;
use lopub::reduce::DatasetKind;

#[derive(Parser, Debug)]
#[command(name = "lopub", version, about = "Locally private publication of categorical data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for outputs given as relative paths.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Fraction of source rows kept before encoding.
    #[arg(long, global = true)]
    pub sample_rate: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Perturb a dataset into a report file.
    Encode(EncodeArgs),
    /// Estimate the joint distribution of one attribute cluster.
    Estimate(EstimateArgs),
    /// Learn the dependency graph and junction tree.
    Deps(DepsArgs),
    /// Sample a synthetic dataset from reports and a dependency document.
    Synthesize(SynthesizeArgs),
    /// Run a configured evaluation with metric series.
    Eval(EvalArgs),
    /// Run the whole pipeline once from flags.
    E2e(E2eArgs),
    /// Time and score the estimators on random attribute combinations.
    Bench(BenchArgs),
}

/// Where source rows come from.
#[derive(Args, Debug, Clone)]
pub struct SourceArgs {
    /// Schema document (with --data).
    #[arg(long, requires = "data")]
    pub schema: Option<PathBuf>,
    /// Comma-delimited dataset (with --schema).
    #[arg(long, requires = "schema")]
    pub data: Option<PathBuf>,
    /// Planted model document to draw rows from (with --rows).
    #[arg(long, conflicts_with_all = ["schema", "data"], requires = "rows")]
    pub planted: Option<PathBuf>,
    /// Rows drawn from the planted model.
    #[arg(long)]
    pub rows: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Flip probability.
    #[arg(long, default_value_t = 0.5)]
    pub f: f64,
    /// Bloom false-positive target.
    #[arg(long, default_value_t = lopub::encode::DEFAULT_FALSE_POSITIVE)]
    pub p: f64,
    /// Per-attribute filter length caps, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub caps: Option<Vec<usize>>,
    #[arg(long, default_value = "reports.txt")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long)]
    pub reports: PathBuf,
    /// Attributes by 1-based position or by name, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub cluster: Vec<String>,
    #[arg(long, default_value = "hybrid")]
    pub method: Method,
    /// EM convergence gap.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, default_value = "dist.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DepsArgs {
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    pub phi: f64,
    #[arg(long, default_value = "hybrid")]
    pub method: Method,
    /// Entropy pruning before pair tests; the value picks the rule.
    #[arg(long, num_args = 0..=1, default_missing_value = "nonbinary")]
    pub prune: Option<DatasetKind>,
    #[arg(long, default_value = "deps.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long)]
    pub deps: PathBuf,
    #[arg(long, default_value = "hybrid")]
    pub method: Method,
    /// Rows to generate; defaults to the number of reports.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value = "synth.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Evaluation document: source, pipeline settings and series.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Args, Debug)]
pub struct E2eArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 0.5)]
    pub f: f64,
    #[arg(long, default_value_t = lopub::encode::DEFAULT_FALSE_POSITIVE)]
    pub p: f64,
    #[arg(long, default_value_t = 0.4)]
    pub phi: f64,
    #[arg(long, default_value = "hybrid")]
    pub method: Method,
    #[arg(long, num_args = 0..=1, default_missing_value = "nonbinary")]
    pub prune: Option<DatasetKind>,
    /// Synthetic rows; defaults to the number of reports.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 0.5)]
    pub f: f64,
    #[arg(long, default_value_t = lopub::encode::DEFAULT_FALSE_POSITIVE)]
    pub p: f64,
    /// Cluster sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    pub ks: Vec<usize>,
    /// Random combinations per cluster size.
    #[arg(long, default_value_t = 100)]
    pub combos: usize,
    #[arg(long, value_delimiter = ',', default_value = "em,lasso,hybrid")]
    pub methods: Vec<Method>,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let g = &cli.global;
    let result = match cli.command {
        Command::Encode(a) => commands::encode(g, a),
        Command::Estimate(a) => commands::estimate(g, a),
        Command::Deps(a) => commands::deps(g, a),
        Command::Synthesize(a) => commands::synthesize(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::E2e(a) => commands::e2e(g, a),
        Command::Bench(a) => commands::bench(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
