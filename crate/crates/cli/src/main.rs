mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(causalkit::Error),
}

impl From<causalkit::Error> for CliError {
    fn from(e: causalkit::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(causalkit::Error::Io(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(causalkit::Error::Csv(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(causalkit::Error::Ingestion(format!("JSON: {e}")))
    }
}

impl CliError {
    fn code(&self) -> u8 {
        use causalkit::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(E::Numerical(_) | E::NonConvergence(_)) => 3,
            CliError::Core(_) => 2,
        }
    }

    fn tag(&self) -> String {
        use causalkit::Error as E;
        match self {
            CliError::Usage(_) => "USAGE".into(),
            CliError::Core(e) => match e {
                E::Schema { tag, .. } => tag.to_string(),
                E::Ingestion(_) => "INGEST".into(),
                E::Contract(_) => "CONTRACT".into(),
                E::Numerical(_) => "NUMERICAL".into(),
                E::NonConvergence(_) => "NONCONVERGENCE".into(),
                E::Io(_) => "IO".into(),
                E::Csv(_) => "CSV".into(),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(causalkit::Error::Schema { message, .. }) => message.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

/// Heterogeneous treatment effect estimation.
#[derive(Parser, Debug)]
#[command(name = "causalkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Input CSV (header row, "." decimals, empty or NA for missing).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Flat key = value configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long, global = true, default_value = ".")]
    outdir: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// t-lasso, t-ridge, t-gbr, dr-lasso, dr-ridge, dr-gbr, hlm, gp, bcf or all.
    #[arg(long, global = true)]
    estimator: Option<String>,
    /// Bootstrap replicates for the meta-learners (0 disables).
    #[arg(long, global = true)]
    bootstrap: Option<usize>,
    #[arg(long, global = true)]
    ci_level: Option<f64>,
    /// Propensity clipping bound.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Fit the DR propensity model once instead of per bootstrap replicate.
    #[arg(long, global = true)]
    fixed_propensity: bool,
    /// Long MCMC chains (30000 burn-in) for the hierarchical model.
    #[arg(long, global = true)]
    paper_faithful: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with known effects.
    Simulate(commands::SimulateArgs),
    /// Rank features by a LASSO path on an auxiliary target.
    Screen {
        /// Number of features to keep.
        #[arg(long)]
        k: Option<usize>,
        /// Auxiliary target column (defaults to the outcome).
        #[arg(long)]
        auxiliary: Option<String>,
    },
    /// Estimate treatment effects and write a JSON report.
    Fit {
        /// Also export every unit-level posterior draw (can be large).
        #[arg(long)]
        cate_draws: bool,
    },
    /// Permutation importance of effect modifiers and subgroup contrasts.
    Importance {
        /// Features to contrast (median split, or 0/1 split for binary columns).
        #[arg(long, value_delimiter = ',')]
        subgroup: Vec<String>,
        /// Use at most this many bootstrap replicates for the surrogates.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Merge earlier outputs in --outdir into a summary and plot data.
    Report,
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &common.input {
        cfg.input = Some(p.display().to_string());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = &common.estimator {
        cfg.estimator = e.to_ascii_lowercase();
    }
    if let Some(b) = common.bootstrap {
        cfg.bootstrap = b;
    }
    if let Some(c) = common.ci_level {
        cfg.ci_level = c;
    }
    if let Some(e) = common.epsilon {
        cfg.epsilon = e;
    }
    cfg.fixed_propensity |= common.fixed_propensity;
    cfg.paper_faithful |= common.paper_faithful;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.common.threads {
        if t == 0 {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let mut cfg = resolve(&cli.common)?;
    let outdir = &cli.common.outdir;
    std::fs::create_dir_all(outdir)?;
    match cli.command {
        Command::Simulate(args) => commands::simulate(&args, &cfg, outdir),
        Command::Screen { k, auxiliary } => {
            if let Some(k) = k {
                cfg.screen_k = k;
            }
            if auxiliary.is_some() {
                cfg.auxiliary = auxiliary;
            }
            commands::screen(&cfg, outdir)
        }
        Command::Fit { cate_draws } => commands::fit(&cfg, outdir, cate_draws),
        Command::Importance {
            subgroup,
            replicates,
        } => {
            if !subgroup.is_empty() {
                cfg.subgroups = subgroup;
            }
            if replicates.is_some() {
                cfg.importance_replicates = replicates;
            }
            commands::importance(&cfg, outdir)
        }
        Command::Report => commands::report(outdir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .parse_env("CAUSALKIT_LOG")
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            eprintln!("error USAGE: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error {}: {}", e.tag(), e.message().replace('\n', " "));
            ExitCode::from(e.code())
        }
    }
}
