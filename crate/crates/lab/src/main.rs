use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tdlab::config::{Experiment, ExperimentConfig};
use tdlab::experiments;
use tdlab::{plot, LabError, RunOptions};

#[derive(Parser)]
#[command(name = "tdlab", version, about = "Run TD learning dynamics experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Replace the config's seeds, e.g. `0,1,2`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Override a config entry, e.g. `parameters.discount=0.5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Parent directory for runs without `output_dir` (default: $TDLAB_OUTPUT_DIR or tdlab-runs).
        #[arg(long)]
        output_root: Option<PathBuf>,
        /// Print the acceptance checks and exit nonzero if any fails.
        #[arg(long)]
        check: bool,
    },
    /// Redraw the SVG plots of a finished run.
    Plot { manifest: PathBuf },
    /// List presets, or print the default config of one.
    Presets { name: Option<Experiment> },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, LabError> {
    match cli.command {
        Command::Run { config, seeds, mut overrides, jobs, output_root, check } => {
            if let Some(s) = seeds {
                overrides.push(format!("seeds={}", serde_json::to_string(&s).expect("seeds serialize")));
            }
            let config = ExperimentConfig::load(&config, &overrides)?;
            let summary = tdlab::run(&config, &RunOptions { jobs, output_root })?;
            println!("{}", summary.dir.display());
            let report = summary.manifest.report();
            if check {
                println!("{report}");
                if !report.passed() {
                    return Ok(ExitCode::FAILURE);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { manifest } => {
            for path in plot::emit_plots(&manifest)? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Presets { name: None } => {
            for e in Experiment::ALL {
                println!("{:<24} {}", e.name(), experiments::description(e));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Presets { name: Some(e) } => {
            let text = serde_json::to_string_pretty(&ExperimentConfig::preset(e).to_json()).expect("JSON serializes");
            println!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
