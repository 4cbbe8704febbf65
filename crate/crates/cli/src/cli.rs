use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use lqbss_core::likelihood::GradientVariant;

use crate::commands;
use crate::config::{ExperimentConfig, ScoreChoice};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "lqbss",
    version,
    about = "Linear-quadratic blind source separation experiments"
)]
pub struct Cli {
    /// Experiment configuration file (key = value lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Output directory (default: output.dir from the config, else the current directory).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    pub gradient: Option<GradientArg>,

    #[arg(long, global = true, value_enum)]
    pub scores: Option<ScoresArg>,

    /// True sources, for scoring a separation.
    #[arg(long, global = true, value_name = "PATH")]
    pub truth: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradientArg {
    Corrected,
    Legacy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoresArg {
    Analytic,
    Kernel,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw i.i.d. sources into sources.csv.
    Generate,
    /// Mix a source file with the configured parameters into mixtures.csv.
    Mix { input: PathBuf },
    /// Train the separating structure on an observation file.
    Separate { input: PathBuf },
    /// Compare analytic derivatives against finite differences.
    Gradcheck,
    /// Write scatter data for the narrow and wide source ranges.
    Figures,
    /// Tabulate local stability of the recurrent structure over a source grid.
    Stability,
}

impl Cli {
    pub fn experiment_config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(g) = self.gradient {
            cfg.optimizer.gradient_variant = match g {
                GradientArg::Corrected => GradientVariant::Corrected,
                GradientArg::Legacy => GradientVariant::Legacy,
            };
        }
        if let Some(s) = self.scores {
            cfg.optimizer.scores = match s {
                ScoresArg::Analytic => ScoreChoice::Analytic,
                ScoresArg::Kernel => ScoreChoice::Kernel,
            };
        }
        if self.truth.is_some() && !matches!(self.command, Command::Separate { .. }) {
            return Err(CliError::Usage("--truth only applies to separate".into()));
        }
        Ok(cfg)
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let cfg = cli.experiment_config()?;
    match &cli.command {
        Command::Generate => commands::cmd_generate(&cfg, out).map(drop),
        Command::Mix { input } => commands::cmd_mix(&cfg, input, out, err).map(drop),
        Command::Separate { input } => {
            commands::cmd_separate(&cfg, input, cli.truth.as_deref(), out).map(drop)
        }
        Command::Gradcheck => commands::cmd_gradcheck(&cfg, out).map(drop),
        Command::Figures => commands::cmd_figures(&cfg, out).map(drop),
        Command::Stability => commands::cmd_stability(&cfg, out).map(drop),
    }
}
