//! Command-line driver: `ugconv verify|train|count`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ugconv::config::{preset, ExperimentConfig};
use ugconv::costmodel::overhead_ratio;
use ugconv::workflows::{run_count, run_train, run_verify, ArchSource};

#[derive(Parser)]
#[command(
    name = "ugconv",
    about = "Unitary group convolutions: property verification, the toy ablation protocol, and op-count reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suites and exit nonzero on any failure.
    Verify {
        /// Run only the named suite.
        #[arg(long)]
        suite: Option<String>,
    },
    /// Train the ablation networks per seed and write CSVs + checkpoints.
    Train(TrainArgs),
    /// Static parameter/multiply/add report for an architecture.
    Count(CountArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset, e.g. table2-row4-ortho-pq.
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated seed list overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory for CSVs and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory (defaults to $UGCONV_DATA_DIR, then ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    /// Built-in architecture name, e.g. resnet18-g8.
    #[arg(long, conflicts_with = "descriptor")]
    arch: Option<String>,
    /// Architecture descriptor JSON file.
    #[arg(long)]
    descriptor: Option<PathBuf>,
    /// Square input resolution.
    #[arg(long, default_value_t = 224)]
    input_size: usize,
    /// Also write the report as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn data_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("UGCONV_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Verify { suite } => {
            let (results, all_passed) = run_verify(suite.as_deref());
            for r in &results {
                println!(
                    "{} {:<14} {:>8.2}s  {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.seconds,
                    r.detail
                );
            }
            if all_passed {
                println!("all suites passed");
                Ok(())
            } else {
                Err("verification failed".into())
            }
        }
        Command::Train(args) => {
            let mut cfg: ExperimentConfig = match (&args.config, &args.preset) {
                (Some(path), None) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| format!("config: {}: {e}", path.display()))?;
                    ExperimentConfig::parse(&text).map_err(|e| format!("config: {e}"))?
                }
                (None, Some(name)) => preset(name).map_err(|e| format!("config: {e}"))?,
                _ => return Err("train: give exactly one of --config or --preset".into()),
            };
            if !args.seeds.is_empty() {
                cfg.seeds = args.seeds.clone();
            }
            let dir = data_dir(args.data_dir);
            let summary = run_train(&cfg, &dir, &args.out).map_err(|e| format!("train: {e}"))?;
            for o in &summary.per_seed {
                println!("seed {:>3}: test error {:.4}", o.seed, o.final_test_error);
            }
            println!(
                "mean {:.4} std {:.4} over {} seeds -> {}",
                summary.mean_error,
                summary.std_error,
                summary.per_seed.len(),
                args.out.display()
            );
            Ok(())
        }
        Command::Count(args) => {
            let src = match (&args.arch, &args.descriptor) {
                (Some(name), None) => ArchSource::Builtin(name),
                (None, Some(path)) => ArchSource::DescriptorPath(path),
                _ => return Err("count: give exactly one of --arch or --descriptor".into()),
            };
            let report = run_count(src, args.input_size, args.out.as_deref())
                .map_err(|e| format!("count: {e}"))?;
            print!("{}", report.to_table());
            let t = report.totals();
            println!(
                "totals: {} params, {} fpmuls, {} transform adds ({:.2}% overhead)",
                t.params,
                t.fpmuls,
                t.transform_adds,
                100.0 * overhead_ratio(&report)
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            // Single-line, machine-parseable failure prefix.
            eprintln!("ugconv: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
