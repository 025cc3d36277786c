use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use metalcc_core::pipeline::{ExperimentConfig, Profile, Runner, CONFIG_FILE};

/// Consistency check for 2D metal segmentations of cone-beam CT scans.
#[derive(Parser)]
#[command(name = "metalcc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize the scene with and without metal.
    Phantom(Common),
    /// Forward project both phantoms into line integrals.
    Project(Common),
    /// Ground truth by subtraction and simulated soft segmentations.
    SegmentSim(Common),
    /// Binarize at every threshold and run the consistency check.
    Cc(Common),
    /// Evaluate pre- and post-check masks; writes metrics.json / metrics.txt.
    Metrics(Common),
    /// All stages in order.
    Pipeline(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config. Defaults to `<out>/config.json` when present,
    /// else the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Base configuration when no config file is given.
    #[arg(long, value_enum, default_value = "desk")]
    profile: ProfileArg,
    /// Worker threads; affects speed only.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let profile = match self.profile {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        };
        if profile == Profile::Paper {
            let p = profile.config();
            eprintln!(
                "warning: paper profile ({}² detector, {} views, {}³ back-projection grid) needs tens of GB of memory and hours of CPU time",
                p.geometry.detector_cols, p.geometry.n_views, p.cc_grid.nx
            );
        }
        let stored = self.out.as_deref().map(|o| o.join(CONFIG_FILE)).filter(|p| p.exists());
        let mut cfg = match (&self.config, stored) {
            (Some(p), _) => load(p)?,
            (None, Some(p)) => load(&p)?,
            (None, None) => profile.config(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let out = cfg.output_dir.clone();
        Ok((cfg, out))
    }
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Phantom(c)
        | Command::Project(c)
        | Command::SegmentSim(c)
        | Command::Cc(c)
        | Command::Metrics(c)
        | Command::Pipeline(c) => c,
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let (cfg, out) = common.resolve()?;
    let mut runner = Runner::new(cfg, &out)?;
    match cli.command {
        Command::Phantom(_) => {
            runner.phantom()?;
        }
        Command::Project(_) => {
            runner.project(None)?;
        }
        Command::SegmentSim(_) => {
            runner.segment(None)?;
        }
        Command::Cc(_) => {
            for r in runner.cc(None)? {
                eprintln!(
                    "threshold {}: {} metal voxels, {} pixels retained, {} removed",
                    r.threshold,
                    r.cc.metal3d.data.iter().filter(|&&m| m != 0).count(),
                    r.cc.retained_pixels.iter().sum::<u64>(),
                    r.cc.removed_pixels.iter().sum::<u64>(),
                );
            }
        }
        Command::Metrics(_) => print!("{}", runner.metrics(None, None, None)?.to_text()),
        Command::Pipeline(_) => print!("{}", runner.run_all()?.to_text()),
    }
    eprintln!("artifacts in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
