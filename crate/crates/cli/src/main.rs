use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sigctl_core::harness::{
    read_summary, report_text, run_experiment, write_report, write_summary, ControllerKind, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "sigctl", version, about = "Belief-space signal control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an experiment config and its intersection without simulating.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every controller x scenario x trial cell and write the outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict to these controllers (labels such as `ucatsc`, `ucatsc_no_hold`, `queue_proxy`).
        #[arg(long, value_delimiter = ',')]
        controller: Vec<String>,
        /// Restrict to these scenario labels.
        #[arg(long, value_delimiter = ',')]
        scenario: Vec<String>,
        /// Dump per-step decision traces.
        #[arg(long)]
        trace: bool,
    },
    /// Rebuild `report.txt` and `series/` from an existing `summary.json`.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))
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

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = load(&config)?;
            let ix = cfg.intersection()?;
            let problems = cfg.validate(&ix);
            if !problems.is_empty() {
                for p in &problems {
                    eprintln!("  {p}");
                }
                bail!("{} problem(s) in {}", problems.len(), config.display());
            }
            let cells: usize = cfg.scenarios.iter().map(|s| s.trials).sum::<usize>() * cfg.controllers.len();
            println!(
                "ok: {} movements, {} phases, {} controllers, {} scenarios, {} episodes",
                ix.movement_count(),
                ix.phase_count(),
                cfg.controllers.len(),
                cfg.scenarios.len(),
                cells
            );
        }
        Command::Run {
            config,
            out,
            seed,
            controller,
            scenario,
            trace,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if !controller.is_empty() {
                cfg.controllers = controller
                    .iter()
                    .map(|c| ControllerKind::parse(c).with_context(|| format!("unknown controller `{c}`")))
                    .collect::<Result<_>>()?;
            }
            if !scenario.is_empty() {
                cfg.scenarios.retain(|s| scenario.contains(&s.label()));
                if cfg.scenarios.is_empty() {
                    bail!("no scenario matches {scenario:?}");
                }
            }
            cfg.write_traces |= trace;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .context("no output directory: pass --out or set output_dir")?;
            let ix = cfg.intersection()?;
            let summary = run_experiment(&cfg, &ix, Some(&out))?;
            write_summary(&summary, &out)?;
            write_report(&summary, &out)?;
            print!("{}", report_text(&summary));
            let failed = summary.cells.iter().filter(|c| c.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} cell(s) failed; see summary.json");
            }
        }
        Command::Report { out } => {
            let summary = read_summary(&out).with_context(|| format!("reading summary in {}", out.display()))?;
            write_report(&summary, &out)?;
            print!("{}", report_text(&summary));
        }
    }
    Ok(())
}
