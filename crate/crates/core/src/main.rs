use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use stable_gauss::cli::{
    cmd_gradcheck, cmd_klprobe, cmd_sweep, cmd_table1, cmd_train, klprobe_csv, ConfigMap,
    KlProbeSpec, SweepSpec, TrainSpec,
};
use stable_gauss::precision::FloatMode;

#[derive(Parser)]
#[command(name = "stable-gauss", version, about = "Stress-test Normal-scale parameterizations for VAE training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// Experiment configuration file (`key = value` lines, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Float mode override: f64|f32|f16.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Reproduce the minimal-finite-scale table for the log-quotient forms.
    Table1 {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Dense KL finiteness/gradient scan over a (p1, p2) grid.
    Klprobe {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// One training run with per-step diagnostics and a run summary.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Multi-run stability sweep over lr x encoder x decoder x seeds.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Finite-difference validation of every analytic gradient.
    Gradcheck,
}

fn load_config(common: &CommonArgs) -> Result<ConfigMap> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            ConfigMap::parse(&text)?
        }
        None => ConfigMap::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", seed);
        cfg.set("seed_base", seed);
    }
    if let Some(mode) = &common.mode {
        cfg.set("mode", mode);
    }
    Ok(cfg)
}

fn write_out(path: &Option<PathBuf>, contents: &str) -> Result<()> {
    if let Some(path) = path {
        std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Table1 { common } => {
            let mode = common
                .mode
                .as_deref()
                .map(|m| m.parse::<FloatMode>().map_err(anyhow::Error::msg))
                .transpose()?;
            let report = cmd_table1(mode);
            print!("{}", report.render());
            write_out(&common.out, &report.csv())?;
            Ok(if report.all_match { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Klprobe { common } => {
            let cfg = load_config(&common)?;
            let spec = KlProbeSpec::from_config(&cfg)?;
            let rows = cmd_klprobe(&spec)?;
            let nonfinite = rows.iter().filter(|r| !r.finite).count();
            let high_grad = rows.iter().filter(|r| r.max_abs_grad > spec.grad_threshold).count();
            println!(
                "{} cells, {} non-finite, {} with |grad| > {:e}",
                rows.len(),
                nonfinite,
                high_grad,
                spec.grad_threshold
            );
            let csv = klprobe_csv(&rows);
            match &common.out {
                Some(_) => write_out(&common.out, &csv)?,
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let spec = TrainSpec::from_config(&cfg)?;
            let report = cmd_train(&spec)?;
            let s = &report.summary;
            println!(
                "steps: {} | diverged: {} | min smoothed loss: {:.4} | instability fraction: {:.4} | mean excess z: {:.4} | nonfinite steps: {} | threshold: {}",
                report.csv.lines().count() - 1,
                s.diverged,
                s.min_smoothed_loss,
                s.instability_fraction,
                s.mean_excess_z,
                s.nonfinite_steps,
                report.threshold,
            );
            match &common.out {
                Some(_) => write_out(&common.out, &report.csv)?,
                None => print!("{}", report.csv),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { common } => {
            let cfg = load_config(&common)?;
            let spec = SweepSpec::from_config(&cfg)?;
            let report = cmd_sweep(&spec)?;
            print!("{}", report.render());
            write_out(&common.out, &report.runs_csv())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck => {
            let report = cmd_gradcheck();
            print!("{}", report.render());
            Ok(if report.all_pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
