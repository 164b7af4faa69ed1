//! Argument parsing and dispatch.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::RunConfig;
use crate::run::out_root;

#[derive(Debug, Parser)]
#[command(name = "nrdm", version, about = "Gated residual diffusion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a score model; writes a checkpoint and the loss log.
    Train(Common),
    /// Generate samples from a checkpoint and score them against the data.
    Sample(SampleArgs),
    /// Per-depth sensitivity profiles of a checkpoint or a fresh model.
    Sensitivity(SensitivityArgs),
    /// Train every residual variant over several seeds and compare.
    Variants(Common),
    /// Compare forward-SDE and probability-flow marginals.
    PfodeCheck(Common),
    /// Train gated and ungated stacks at several depths.
    DepthScaling(DepthArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output root (default: $NRDM_OUT_ROOT, then ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// `euler` or `heun`.
    #[arg(long)]
    pub solver: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DepthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated depths, e.g. `8,16,32,64`.
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<usize>>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

/// Runs the parsed command and returns the run directory.
pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Train(c) => commands::train(&c.load()?, &out_root(c.out.as_deref())),
        Command::Sample(a) => {
            let mut cfg = a.common.load()?;
            if let Some(p) = a.checkpoint {
                cfg.eval.checkpoint = Some(p);
            }
            if let Some(n) = a.n {
                cfg.eval.n = n;
            }
            if let Some(s) = &a.solver {
                cfg.eval.solver = s.parse()?;
            }
            if let Some(s) = a.steps {
                cfg.eval.steps = s;
            }
            cfg.validate()?;
            commands::sample(&cfg, &out_root(a.common.out.as_deref()))
        }
        Command::Sensitivity(a) => {
            let mut cfg = a.common.load()?;
            if let Some(p) = a.checkpoint {
                cfg.eval.checkpoint = Some(p);
            }
            commands::sensitivity(&cfg, &out_root(a.common.out.as_deref()))
        }
        Command::Variants(c) => commands::variants(&c.load()?, &out_root(c.out.as_deref()), c.jobs),
        Command::PfodeCheck(c) => commands::pfode_check(&c.load()?, &out_root(c.out.as_deref())),
        Command::DepthScaling(a) => {
            let mut cfg = a.common.load()?;
            if let Some(d) = a.depths {
                cfg.report.depths = d;
            }
            cfg.validate()?;
            commands::depth_scaling(&cfg, &out_root(a.common.out.as_deref()), a.common.jobs)
        }
    }
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// 3 for numerical failures anywhere in the error chain, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<nrdm::Error>())
        .any(nrdm::Error::is_numerical);
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}
