//! `dpsim` — run DPSIM experiment campaigns from the command line.
//!
//! Exit codes: 0 on success, 1 on invalid configuration or arguments,
//! 2 on runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dpsim::config::{parse_config, render_config, AlgoConfig, SystemConfig};
use dpsim::gradcheck::run_grad_check;
use dpsim::harness::{emit, run_experiment, ExperimentKind, ExperimentSpec, SweepAxis};

#[derive(Parser)]
#[command(name = "dpsim", version, about = "Dual-polarized stacked metasurface MIMO experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// NMSE per optimizer step
    Convergence(RunArgs),
    /// |αH| of the optimized stack for each mode and depth
    ChannelMatrix(RunArgs),
    /// Spectral efficiency against the number of streams
    SeVsStreams(RunArgs),
    /// Energy efficiency against transmit power
    EeVsPower(RunArgs),
    /// Parse, validate and print the resolved configuration
    ValidateConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic phase gradients with central finite differences
    GradCheck(GradArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file; the reference parameters are used if omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration)
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// `key=v1,v2,...`; may be repeated
    #[arg(long = "sweep")]
    sweeps: Vec<String>,
    /// Monte Carlo trials per sweep point (overrides the configuration)
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads (all cores by default)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct GradArgs {
    /// Configuration file; defaults to a 9-unit, 2-layer, single-stream stack
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

/// Marks failures that should exit with the validation status.
#[derive(Debug)]
struct Invalid;

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("invalid input")
    }
}

impl std::error::Error for Invalid {}

fn checked<T>(r: dpsim::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| {
        if e.is_validation() {
            anyhow::Error::new(e).context(Invalid)
        } else {
            e.into()
        }
    })
}

fn load_config(path: Option<&PathBuf>) -> anyhow::Result<(SystemConfig, AlgoConfig)> {
    match path {
        None => Ok((SystemConfig::default(), AlgoConfig::default())),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .context(Invalid)?;
            checked(parse_config(&text)).with_context(|| format!("in {}", p.display()))
        }
    }
}

fn run(kind: ExperimentKind, args: RunArgs) -> anyhow::Result<()> {
    let (sys, mut algo) = load_config(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        algo.master_seed = seed;
    }
    if args.threads == Some(0) {
        return Err(anyhow::anyhow!("--threads must be positive").context(Invalid));
    }
    let sweeps = args
        .sweeps
        .iter()
        .map(|s| checked(s.parse::<SweepAxis>()))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let spec = checked(ExperimentSpec::new(kind, sweeps, sys, algo, args.out.clone()))?;
    let report = checked(run_experiment(&spec, args.trials, args.threads))?;
    let paths = checked(emit(&report, &spec.output))?;

    let failed: Vec<_> = report.points.iter().filter_map(|p| p.error.as_ref().map(|e| (&p.params, e))).collect();
    for (params, e) in &failed {
        eprintln!("point {params:?} failed: {e}");
    }
    for p in &paths {
        println!("wrote {}", p.display());
    }
    if !failed.is_empty() {
        bail!("{} of {} sweep points failed", failed.len(), report.points.len());
    }
    Ok(())
}

fn grad_check(args: GradArgs) -> anyhow::Result<()> {
    let sys = match &args.config {
        Some(_) => load_config(args.config.as_ref())?.0,
        None => SystemConfig {
            streams_per_pol: 1,
            tx_layers: 2,
            rx_layers: 2,
            tx_units_per_layer: 9,
            rx_units_per_layer: 9,
            ..Default::default()
        },
    };
    let report = checked(run_grad_check(&sys, args.instances, args.step, args.seed))?;
    println!(
        "{} instances, {} partials, max relative error {:.3e} (tolerance {:.1e})",
        report.instances, report.entries, report.max_relative_error, args.tolerance
    );
    if let Some((i, side, layer, pol, unit)) = report.worst {
        println!("worst: instance {i}, {} layer {layer}, polarization {pol}, unit {unit}", side.as_str());
    }
    if !report.passes(args.tolerance) {
        bail!("gradient check failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Convergence(a) => run(ExperimentKind::Convergence, a),
        Command::ChannelMatrix(a) => run(ExperimentKind::ChannelMatrix, a),
        Command::SeVsStreams(a) => run(ExperimentKind::SeVsStreams, a),
        Command::EeVsPower(a) => run(ExperimentKind::EeVsPower, a),
        Command::ValidateConfig { config } => load_config(config.as_ref()).map(|(s, a)| print!("{}", render_config(&s, &a))),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
