use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fadeopt::cli::{self, ExperimentConfig, RunOptions};
use fadeopt::receivers::ReceiverStrategy;
use fadeopt::Error;

/// Adaptive coherent-state receivers over fading channels.
#[derive(Parser)]
#[command(name = "fadeopt", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Omit the timestamp header so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Helstrom, homodyne and annealed receivers across the amplitude sweep.
    Bounds,
    /// Anneal the displacements of the configured receiver.
    Optimize,
    /// Exhaustive search over the displacement grid.
    Gridsearch,
    /// Train the Q-learning agents.
    Train,
    /// Cross-check the exact evaluators against independent oracles.
    Validate,
    /// Monte-Carlo estimate of a strategy's success probability.
    Mc {
        /// Strategy JSON; the grid-search optimum when omitted.
        #[arg(long)]
        strategy: Option<PathBuf>,
        /// Write one JSON line per episode.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

enum Failure {
    Validation(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) => Failure::Io(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Failure::Io(format!("{}: {io}", path.display())),
            other => Failure::Validation(other.to_string()),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = load(&cli.common)?;
    let opts = RunOptions {
        out_dir: config.output_dir.clone(),
        deterministic: cli.common.deterministic,
    };
    match cli.command {
        Command::Bounds => {
            let rows = cli::cmd_bounds(&config, &opts)?;
            log::info!("wrote {} sweep points to {}", rows.len(), opts.out_dir.display());
        }
        Command::Optimize => {
            let (_, success) = cli::cmd_optimize(&config, &opts)?;
            println!("success {success:.12}");
        }
        Command::Gridsearch => {
            let (_, success, evaluated) = cli::cmd_gridsearch(&config, &opts)?;
            println!("success {success:.12} over {evaluated} configurations");
        }
        Command::Train => {
            let summary = cli::cmd_train(&config, &opts)?;
            for a in &summary.agents {
                log::info!("agent {}: final P_t {:?}", a.agent, a.final_success);
            }
            if let Some(m) = summary.mean_final_success {
                println!("mean final P_t {m:.12} over {} agents", summary.agents.len());
            }
        }
        Command::Validate => {
            let report = cli::cmd_validate(&config)?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(Failure::Validation("validation checks failed".into()));
            }
        }
        Command::Mc { strategy, trace } => {
            let strategy = match strategy {
                Some(path) => {
                    let text =
                        std::fs::read_to_string(&path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
                    let s: ReceiverStrategy<f64> = serde_json::from_str(&text)
                        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
                    Some(s)
                }
                None => None,
            };
            let r = cli::cmd_mc(&config, &opts, strategy, trace.as_deref())?;
            println!(
                "exact {:.12} estimate {:.12} stderr {:.3e} episodes {}",
                r.exact, r.estimate.estimate, r.estimate.stderr, r.estimate.episodes
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FADEOPT_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.common.jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(cli)),
            Err(e) => Err(Failure::Validation(format!("--jobs: {e}"))),
        },
        None => run(cli),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
