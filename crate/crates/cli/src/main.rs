use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fex_cli::{run_experiment, validate_config, CliError, Profile};
use fex_core::expr::parse_expression;
use fex_core::pde::PdeProblem;
use fex_core::rng::{stream, tag};
use fex_core::sampling::sample_interior;
use fex_core::search::score_from_loss;

#[derive(Parser)]
#[command(name = "fex", version, about = "Search for closed-form PDE solutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its reports.
    Run {
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `desk` or `paper`.
        #[arg(long)]
        profile: Option<Profile>,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a config and print it fully resolved.
    Validate {
        config: PathBuf,
        #[arg(long)]
        profile: Option<Profile>,
    },
    /// Evaluate the functional, score and error of a fixed expression.
    Score {
        #[arg(long)]
        problem: String,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expression in x1..xd (and t for time-dependent problems).
        expr: String,
    },
}

fn read(path: &PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, seed, out, profile, threads } => {
            let mut spec = validate_config(&read(&config)?, profile)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(o) = out {
                spec.output = o;
            }
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| CliError::Config(e.to_string()))?;
            }
            let dir = spec.output.clone();
            let output = run_experiment(&spec, &dir)?;
            for row in &output.summary {
                println!(
                    "{} d={} found {}/{} median error {}",
                    row.problem,
                    row.dimension,
                    row.found,
                    row.runs,
                    row.median_error.map_or("n/a".into(), |e| format!("{e:.3e}"))
                );
            }
            eprintln!("reports written to {}", dir.display());
            if output.found() == 0 {
                return Err(CliError::NoCandidate);
            }
            Ok(())
        }
        Command::Validate { config, profile } => {
            let spec = validate_config(&read(&config)?, profile)?;
            print!("{}", toml::to_string(&spec).map_err(|e| CliError::Output(e.to_string()))?);
            Ok(())
        }
        Command::Score { problem, dim, seed, expr } => {
            let p = PdeProblem::by_name(&problem, dim)?;
            let u = parse_expression(&expr, p.layout())?;
            let batches = p.sample(&mut stream(seed, &[tag::SCORE]))?;
            let loss = p.functional_value(&u, &batches)?;
            let points = sample_interior(p.domain(), 10_000, &mut stream(seed, &[tag::ERROR_BATCH]))?.points;
            let error = p.relative_error(&u, &points).transpose()?;
            let out = serde_json::json!({ "loss": loss, "score": score_from_loss(loss), "error": error });
            println!("{out}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
