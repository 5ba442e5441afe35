use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uqkit_cli::config::UqMethod;
use uqkit_cli::{CliError, Pipeline, Result, RunConfig};

#[derive(Parser)]
#[command(name = "uqkit", version, about = "Cluster-shift uncertainty experiments for MLP regressors")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic clustered dataset.
    Synth,
    /// Feature selection, embedding, clustering and cluster-held-out splits.
    Split,
    /// Hyperparameter search per split.
    Train {
        #[arg(long)]
        split: Option<usize>,
    },
    /// Uncertainty estimates for held-out and test rows.
    Uq {
        #[arg(long)]
        split: Option<usize>,
        /// Comma-separated subset of dropout, ad, rio.
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Option<Vec<UqMethod>>,
    },
    /// R² matrix, removal curves, score tables.
    Eval,
    /// Verify the evaluation files and write summary.json.
    Report,
    /// Every stage in order.
    Run,
    /// Print the effective configuration.
    Config,
}

fn parse_method(s: &str) -> std::result::Result<UqMethod, String> {
    UqMethod::parse(s.trim()).ok_or_else(|| format!("unknown method {s:?} (expected dropout, ad or rio)"))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.paths.out = o;
    }
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Invalid("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Invalid(format!("thread pool: {e}")))?;
    }
    if let Command::Config = cli.command {
        cfg.validate()?;
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mut p = Pipeline::open(cfg)?;
    match cli.command {
        Command::Synth => p.synth().map(drop),
        Command::Split => p.split().map(drop),
        Command::Train { split } => p.train(split),
        Command::Uq { split, methods } => p.uq(split, methods.as_deref()),
        Command::Eval => p.eval().map(drop),
        Command::Report => p.report().map(drop),
        Command::Run => p.run_all(),
        Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
