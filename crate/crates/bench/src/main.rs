use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use dlc_bench::report::{emit_report, RunInfo};
use dlc_bench::{ledger, parse_with_overrides, run_experiment, runner, BenchError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dlc-bench", version, about = "Class-incremental benchmark runner with task-specific ConvLoRA plugins")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured seed.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set run.dlc=false`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Re-emit a seed directory's report from its checkpoints.
    Report {
        /// A `seed_N` directory written by `run`.
        dir: PathBuf,
        /// Defaults to `config.txt` next to the seed directory.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Defaults to the seed directory itself.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// LoRA parameter ledger. Without a split, prints the five benchmark rows.
    CountParams {
        #[arg(long, requires_all = ["base_m", "inc_n"])]
        class_count: Option<usize>,
        #[arg(long)]
        base_m: Option<usize>,
        #[arg(long)]
        inc_n: Option<usize>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        /// Defaults to 8 below 512 channels, 16 from 512 on.
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long, default_value_t = 1)]
        plugins: usize,
    },
    /// φ drift at every layer between two stage checkpoints.
    Drift {
        before: PathBuf,
        after: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn load_config(path: &PathBuf, overrides: &[String]) -> Result<ExperimentConfig, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
    parse_with_overrides(&text, overrides)
}

fn execute(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let start = Instant::now();
            let (runs, files) = run_experiment(&cfg)?;
            for r in &runs {
                println!(
                    "seed {}: average {:.2}  last {:.2}",
                    r.seed,
                    r.report.average()?,
                    r.report.last()?
                );
            }
            for f in files {
                println!("{}", f.display());
            }
            eprintln!("finished in {:.1}s", start.elapsed().as_secs_f64());
        }
        Command::Report { dir, config, overrides, out } => {
            let config = config.unwrap_or_else(|| dir.parent().unwrap_or(&dir).join("config.txt"));
            let cfg = load_config(&config, &overrides)?;
            let (report, seed) = runner::report_from_checkpoints(&cfg, &dir)?;
            for f in emit_report(&report, &RunInfo::new(&cfg, seed), out.as_ref().unwrap_or(&dir))? {
                println!("{}", f.display());
            }
        }
        Command::CountParams { class_count, base_m, inc_n, channels, kernel, rank, plugins } => {
            let rows = match (class_count, base_m, inc_n) {
                (Some(c), Some(m), Some(n)) => vec![ledger::ledger_row("custom", c, m, n, channels, kernel, rank, plugins)?],
                _ => ledger::benchmark_rows(),
            };
            print!("{}", ledger::render(&rows));
        }
        Command::Drift { before, after, config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            println!("layer,probe_size,mean,max");
            for d in runner::drift_between(&cfg, &before, &after)? {
                println!("{},{},{},{}", d.layer, d.probe_size, d.mean, d.max);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
