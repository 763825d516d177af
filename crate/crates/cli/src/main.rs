use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mlnn::gradcheck::GradCheckOptions;
use mlnn::Activation;
use mlnn_cli::commands::{self, DEFAULT_OUTPUT_ROOT, OUTPUT_ROOT_ENV};
use mlnn_cli::CliError;

#[derive(Parser)]
#[command(name = "mlnn", version, about = "Multi-level neural network solver for boundary-value problems")]
struct Cli {
    /// Worker threads for point-wise evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train all levels of a config and write histories, solution and summary.
    Run {
        config: PathBuf,
        /// Output directory, overriding the config's `output_dir`.
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Directory that relative output paths resolve against.
        #[arg(long, env = OUTPUT_ROOT_ENV, default_value = DEFAULT_OUTPUT_ROOT)]
        output_root: PathBuf,
    },
    /// Compare analytic derivatives with finite differences on every
    /// architecture and problem.
    GradCheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Hidden layer widths, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [8, 6])]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        wavenumbers: usize,
        #[arg(long, value_enum, default_value_t = ActivationArg::Tanh)]
        activation: ActivationArg,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        /// Finite-difference step for parameter gradients (default 1e-6, or
        /// 1e-2 with the identity activation, where the loss is quadratic
        /// along every parameter and larger steps only reduce round-off).
        #[arg(long)]
        param_step: Option<f64>,
        /// Flip the sign of the activation's second derivative.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Merge the level histories of a finished run into report.csv.
    Report { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Tanh,
    Identity,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Run { config, output, output_root } => {
            let result = commands::run_experiment(&config, output.as_deref(), &output_root)?;
            commands::print_run(&result);
        }
        Command::GradCheck { seeds, widths, wavenumbers, activation, tolerance, param_step, inject_fault } => {
            let activation = match (activation, inject_fault) {
                (_, true) => Activation::FaultyTanh,
                (ActivationArg::Tanh, false) => Activation::Tanh,
                (ActivationArg::Identity, false) => Activation::Identity,
            };
            let default_step = match activation {
                Activation::Identity => 1e-2,
                _ => GradCheckOptions::default().param_step,
            };
            let options = GradCheckOptions {
                param_step: param_step.unwrap_or(default_step),
                seeds,
                hidden_widths: widths,
                num_wavenumbers: wavenumbers,
                activation,
                tolerance,
                ..GradCheckOptions::default()
            };
            commands::grad_check(&options)?;
        }
        Command::Report { dir } => {
            commands::report(&dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
