use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use teugel_cli::{run, Command, RunOptions};

/// Numerical experiments for BSDEs driven by Teugel martingales.
///
/// Log verbosity follows RUST_LOG (e.g. RUST_LOG=info).
#[derive(Debug, Parser)]
#[command(name = "teugel", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set monte_carlo.n_paths=5000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed; overrides `monte_carlo.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let opts = RunOptions {
        overrides: args.overrides,
        out: args.out,
        seed: args.seed,
    };
    match run(args.command, &args.config, &opts) {
        Ok(outcome) => {
            print!("{}", outcome.report.summary());
            for f in &outcome.files {
                log::info!("wrote {}", f.display());
            }
            let failed = outcome.report.failed();
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                for c in failed {
                    let m = outcome.report.metric(&c.metric).expect("checked metric is recorded");
                    eprintln!("failed check: {} = {:e} (required {})", c.metric, m.value, c.requirement);
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
