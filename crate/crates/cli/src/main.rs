use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use diffscen::diffusion::DiffusionError;
use diffscen::gridopt::GridError;
use diffscen::planner::PlanError;

mod commands;
mod config;
mod gradcheck;
mod manifest;
mod plot;

use config::{Overrides, PipelineConfig};
use plot::PlotKind;

/// Bad configuration: malformed file, invalid value or unknown key.
#[derive(Debug, thiserror::Error)]
#[error("configuration: {0}")]
pub struct ConfigError(pub String);

/// Missing or malformed input artifact.
#[derive(Debug, thiserror::Error)]
#[error("input: {0}")]
pub struct InputError(pub String);

/// One or more gradient checks exceeded the tolerance.
#[derive(Debug, thiserror::Error)]
#[error("gradient checks failed: {0}")]
pub struct CheckFailed(pub String);

const EXIT_CONFIG: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "diffscen",
    version,
    about = "Policy-conditioned load scenarios and gradient-based grid planning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML pipeline configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a training set of (policy, day, load) samples.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of samples.
        #[arg(long = "M", alias = "m")]
        samples: Option<usize>,
    },
    /// Train the conditional diffusion generator on the dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate scenarios (and the policy Jacobian) for one policy and day.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Four comma-separated values: ev_adopt,ev_flex,hp_adopt,hp_eff.
        #[arg(long)]
        policy: Option<String>,
        /// Index into the baseline days.
        #[arg(long)]
        day: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Compare every analytic gradient with finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Largest accepted relative error.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Run the capacity and policy planning loop.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Maximum number of iterations.
        #[arg(long)]
        iters: Option<usize>,
        /// Learning rate for both blocks.
        #[arg(long)]
        lambda: Option<f64>,
        /// Fix or free a policy component, e.g. `pi_ev_adopt=1` or `hp_eff=free`.
        #[arg(long = "pin")]
        pins: Vec<String>,
    },
    /// Render a CSV artifact as SVG.
    Plot {
        /// Artifact to draw.
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Defaults to the input path with an `.svg` extension.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load(common: &Common, mut o: Overrides) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(common.config.as_deref())?;
    o.seed = common.seed;
    o.out = common.out.clone();
    cfg.apply(&o)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, samples } => {
            let cfg = load(&common, Overrides { samples, ..Overrides::default() })?;
            commands::simulate(&cfg)?;
        }
        Command::Train { common, epochs } => {
            let cfg = load(&common, Overrides { epochs, ..Overrides::default() })?;
            commands::train(&cfg)?;
        }
        Command::Sample {
            common,
            policy,
            day,
            draws,
        } => {
            let cfg = load(
                &common,
                Overrides {
                    policy,
                    day,
                    draws,
                    ..Overrides::default()
                },
            )?;
            commands::sample_cmd(&cfg)?;
        }
        Command::GradCheck { common, tolerance } => {
            let cfg = load(&common, Overrides { tolerance, ..Overrides::default() })?;
            gradcheck::grad_check(&cfg)?;
        }
        Command::Plan {
            common,
            iters,
            lambda,
            pins,
        } => {
            let cfg = load(
                &common,
                Overrides {
                    iterations: iters,
                    learning_rate: lambda,
                    pins,
                    ..Overrides::default()
                },
            )?;
            commands::plan(&cfg)?;
        }
        Command::Plot {
            input,
            kind,
            output,
        } => {
            let output = output.unwrap_or_else(|| input.with_extension("svg"));
            plot::plot(&input, kind, &output)?;
            println!("wrote {}", output.display());
        }
    }
    Ok(())
}

/// Maps the first recognised cause to an exit code; anything else is an
/// input problem.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return EXIT_CONFIG;
        }
        if cause.is::<CheckFailed>() {
            return EXIT_NUMERIC;
        }
        if cause.is::<InputError>() || cause.is::<std::io::Error>() {
            return EXIT_INPUT;
        }
        if let Some(e) = cause.downcast_ref::<PlanError>() {
            match e {
                PlanError::Config(_) => return EXIT_CONFIG,
                PlanError::Diverged { .. } | PlanError::NonFinite(_) | PlanError::Dispatch { .. } => {
                    return EXIT_NUMERIC
                }
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<DiffusionError>() {
            match e {
                DiffusionError::Config(_) | DiffusionError::Schedule(_) => return EXIT_CONFIG,
                DiffusionError::NonFiniteLoss { .. } | DiffusionError::Autodiff(_) => {
                    return EXIT_NUMERIC
                }
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<GridError>() {
            match e {
                GridError::NoConvergence { .. } | GridError::Singular(_) | GridError::Hour { .. } => {
                    return EXIT_NUMERIC
                }
                _ => {}
            }
        }
    }
    EXIT_INPUT
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_cause() {
        let cfg: anyhow::Error = ConfigError("x".into()).into();
        assert_eq!(exit_code(&cfg), EXIT_CONFIG);
        let nested = anyhow::Error::from(PlanError::Diverged {
            iteration: 3,
            objective: 1.0,
            initial: 0.1,
            factor: 10.0,
        })
        .context("planning");
        assert_eq!(exit_code(&nested), EXIT_NUMERIC);
        let io: anyhow::Error = std::io::Error::other("gone").into();
        assert_eq!(exit_code(&io), EXIT_INPUT);
        assert_eq!(exit_code(&CheckFailed("k".into()).into()), EXIT_NUMERIC);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
