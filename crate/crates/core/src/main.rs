use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tactile::experiment::{self, ExperimentConfig};
use tactile::ingest::Manifest;
use tactile::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tactile",
    version,
    about = "Tactile sensor simulation and texture classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every run of the sweep into <out>/runs.
    Simulate(Common),
    /// Extract feature tables from field CSVs into <out>/features.
    Features {
        #[command(flatten)]
        common: Common,
        /// Directory of field CSVs (default <out>/runs).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Cross-validate k-NN per design and compare designs.
    Classify(Common),
    /// Segment recorded logs listed in a manifest into <out>/passes.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Session manifest (overrides the config's `manifest`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Re-render plots from an existing accuracy report.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment: initial-survey, wavelength-sweep or amplitude-sweep.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Recompute outputs that already exist.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name).ok_or_else(|| {
                Error::config(
                    "--preset",
                    format!("unknown preset `{name}` (initial-survey, wavelength-sweep, amplitude-sweep)"),
                )
            })?,
            (None, None) => return Err(Error::config("--config", "one of --config or --preset is required")),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.jobs == Some(0) {
            return Err(Error::config("--jobs", "must be at least 1"));
        }
        Ok(cfg)
    }
}

fn warn(msg: impl std::fmt::Display) {
    eprintln!("warning: {msg}");
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.config()?;
            let s = experiment::with_jobs(c.jobs, || experiment::cmd_simulate(&cfg, &c.out, c.force))??;
            s.warnings.iter().for_each(warn);
            println!("simulated {} runs, skipped {} up to date", s.computed, s.skipped);
        }
        Command::Features { common: c, input } => {
            let cfg = c.config()?;
            let input = input.unwrap_or_else(|| c.out.join("runs"));
            let s = experiment::with_jobs(c.jobs, || experiment::cmd_features(&cfg, &input, &c.out))??;
            for (path, e) in &s.failures {
                warn(format!("{}: {e}", path.display()));
            }
            println!("{} feature rows in {} tables", s.rows, s.tables.len());
            for t in &s.tables {
                println!("  {}", t.display());
            }
        }
        Command::Classify(c) => {
            let cfg = c.config()?;
            let report = experiment::with_jobs(c.jobs, || experiment::cmd_classify(&cfg, &c.out))??;
            for r in &report.results {
                println!(
                    "{:<16} {:<8} {:<9} {:.3} ± {:.3} ({} models)",
                    r.design,
                    r.scope,
                    r.mode.as_str(),
                    r.accuracy.mean(),
                    r.accuracy.std(),
                    r.accuracy.models.len()
                );
            }
            for cmp in &report.comparisons {
                println!("scope {}: F = {:.3}, p = {:.3e}", cmp.scope, cmp.anova.f, cmp.anova.p);
                for t in &cmp.tukey {
                    println!(
                        "  {} vs {}: diff {:+.3}, p = {:.3e}{}",
                        cmp.designs[t.a],
                        cmp.designs[t.b],
                        t.mean_diff,
                        t.p,
                        if t.significant { " (significant)" } else { "" }
                    );
                }
            }
        }
        Command::Ingest { common: c, manifest } => {
            let cfg = c.config()?;
            let path = manifest
                .or_else(|| cfg.manifest.clone())
                .ok_or_else(|| Error::config("manifest", "no manifest given (--manifest or config `manifest`)"))?;
            let m = load_manifest(&path)?;
            if m.session.is_empty() {
                warn("manifest lists no sessions");
            }
            let s = experiment::with_jobs(c.jobs, || experiment::cmd_ingest(&cfg, &m, &c.out))??;
            for (path, e) in &s.failures {
                warn(format!("{}: {e}", path.display()));
            }
            for (path, passes, flags) in &s.processed {
                println!("{}: {passes} passes", path.display());
                for f in flags {
                    println!("  {f}");
                }
            }
        }
        Command::Report(c) => {
            let cfg = c.config()?;
            for p in experiment::cmd_report(&cfg, &c.out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(4),
    }
}
