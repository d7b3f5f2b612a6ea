//! Command-line front end.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::pipeline::{self, Command};

#[derive(Debug, Parser)]
#[command(name = "geosae", version, about = "Small-area estimation with block-kriged covariates")]
pub struct Cli {
    /// Flat TOML configuration file; every key has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for all random streams.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Free-text note on the coordinate reference system.
    #[arg(long, global = true)]
    pub crs_note: Option<String>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Cmd {
    /// Post-stratified direct estimates per area.
    Direct,
    /// Variogram fit and block kriging of the gridded covariate.
    Upscale,
    /// REML fit of the area-level model and EBLUPs.
    Fit,
    /// Parametric bootstrap: SEs, percentile intervals, MSEs.
    Bootstrap,
    /// Monte Carlo likelihood-ratio test.
    Test,
    /// Synthetic scenario or covariate simulation rounds.
    Simulate,
    /// Diagnostic tables.
    Diagnose,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Direct => Command::Direct,
            Cmd::Upscale => Command::Upscale,
            Cmd::Fit => Command::Fit,
            Cmd::Bootstrap => Command::Bootstrap,
            Cmd::Test => Command::Test,
            Cmd::Simulate => Command::Simulate,
            Cmd::Diagnose => Command::Diagnose,
        }
    }
}

impl Cli {
    pub fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(c) = &self.crs_note {
            cfg.crs_note = c.clone();
        }
        Ok(cfg)
    }
}

/// Runs a parsed command line; returns the written paths.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = cli.config()?;
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let out = pool.install(|| pipeline::run(&cfg, cli.command.into()))?;
    out.write_all(&cfg.out)
}
