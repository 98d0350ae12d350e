use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(
    name = "implicit-herd",
    version,
    about = "Simulate herding of evaders by robotic herders under Implicit Control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace, metrics and packet log.
    Run {
        /// Config file (same as --config).
        #[arg(value_name = "CONFIG")]
        config_file: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a scenario once per value of one parameter.
    Sweep {
        #[arg(value_name = "CONFIG")]
        config_file: Option<PathBuf>,
        /// Dotted path into the scenario, e.g. `estimator.r`.
        #[arg(long)]
        param: String,
        /// Comma separated JSON values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Trajectory and input gaps between two traces.
    Compare {
        trace_a: PathBuf,
        trace_b: PathBuf,
        /// Only report gaps after this time, s.
        #[arg(long, default_value_t = 2.0)]
        after: f64,
        /// Also write per-herder input differences here.
        #[arg(long)]
        plot_out: Option<PathBuf>,
    },
    /// Check the stability-test matrices at the initial state.
    ValidateGains {
        #[arg(value_name = "CONFIG")]
        config_file: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-run the estimator from a recorded packet log and compare RMSE.
    ReplayEstimator {
        trace: PathBuf,
        /// Defaults to config.json next to the trace.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to packets.csv next to the trace.
        #[arg(long)]
        packets: Option<PathBuf>,
    },
    /// Write columnar plot data from a trace.
    PlotData {
        trace: PathBuf,
        /// error-curves, input-diff, theta or rmse.
        #[arg(long)]
        kind: String,
        /// Second trace for input-diff.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    no_caging: bool,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
    #[arg(long, value_enum)]
    integrator: Option<IntegratorArg>,
}

#[derive(ValueEnum, Clone, Copy)]
enum ModeArg {
    Implicit,
    Adaptive,
    Baseline,
}

#[derive(ValueEnum, Clone, Copy)]
enum EstimatorArg {
    Perfect,
    Dkf,
}

#[derive(ValueEnum, Clone, Copy)]
enum IntegratorArg {
    Euler,
    Rk4,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config_file, overrides } => commands::run(config_file, &overrides),
        Command::Sweep { config_file, param, values, overrides } => {
            commands::sweep(config_file, &param, &values, &overrides)
        }
        Command::Compare { trace_a, trace_b, after, plot_out } => {
            commands::compare(&trace_a, &trace_b, after, plot_out.as_deref())
        }
        Command::ValidateGains { config_file, overrides } => commands::validate_gains(config_file, &overrides),
        Command::ReplayEstimator { trace, config, packets } => commands::replay(&trace, config, packets),
        Command::PlotData { trace, kind, baseline, out } => {
            commands::plot_data(&trace, &kind, baseline.as_deref(), out.as_deref())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("implicit-herd: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
