use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybrid_bench::checks::{self, CheckResult};
use hybrid_bench::meta::BuildInfo;
use hybrid_bench::mqar::{self, MqarGrid};
use hybrid_bench::retrieval::{self, BenchSpec};
use hybrid_bench::{BenchError, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "hybrid", version, about = "Checks, MQAR sweeps and retrieval benchmarks")]
struct Cli {
    /// Seed for every random draw in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property and equivalence suite.
    Check {
        /// Restrict to one module: tensor, ssd, rope, dma, cdmoe, model, tasks.
        #[arg(long)]
        module: Option<String>,
        /// Also write the results as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train every cell of an MQAR grid.
    Mqar {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Full report with per-seed curves.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Time expert retrieval against the routed and brute-force baselines.
    Bench {
        /// JSON benchmark spec; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        experts: Option<Vec<usize>>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Overfit the micro model on one fixed batch.
    Train {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
    },
    /// Print build metadata and default configurations.
    Info,
}

fn sink(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn print_checks(results: &[CheckResult]) {
    println!(
        "{:<7} {:<36} {:>11} {:>11}  result",
        "module", "check", "tolerance", "observed"
    );
    for r in results {
        let cmp = if r.lower_bound { ">=" } else { "<=" };
        println!(
            "{:<7} {:<36} {cmp}{:>9.1e} {:>11.3e}  {}  {:.2}s  {}",
            r.module,
            r.name,
            r.tolerance,
            r.observed,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Check { module, json } => {
            let results = checks::run_checks(module.as_deref(), cli.seed).map_err(BenchError::Spec)?;
            print_checks(&results);
            if let Some(p) = json {
                write_json(&p, &results)?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            Ok(failed == 0)
        }
        Command::Mqar { config, out, json } => {
            let grid = MqarGrid::from_json(&std::fs::read_to_string(&config)?)?;
            let report = mqar::run_grid(&grid, cli.seed, |r| {
                eprintln!(
                    "{} d={} T={} seed={} acc={:.4} steps={} {:.1}s",
                    r.variant.name(),
                    r.d_model,
                    r.seq_len,
                    r.model_seed,
                    r.final_accuracy,
                    r.steps,
                    r.wall_seconds
                );
            })?;
            mqar::write_cells(&report.cells, sink(&out)?)?;
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
            Ok(true)
        }
        Command::Bench {
            config,
            experts,
            k,
            out,
            json,
        } => {
            let mut spec = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => BenchSpec::default(),
            };
            spec.seed = cli.seed;
            if let Some(e) = experts {
                spec.expert_counts = e;
            }
            if let Some(k) = k {
                spec.k = k;
            }
            let report = retrieval::bench_retrieval(&spec)?;
            retrieval::write_csv(&report.records, sink(&out)?)?;
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
            Ok(report.records.iter().all(|r| r.oracle_pass))
        }
        Command::Train { steps, lr } => {
            let run = checks::overfit(cli.seed, steps, lr)?;
            for (i, (loss, lr)) in run.losses.iter().zip(&run.lrs).enumerate() {
                if i % 10 == 0 || i + 1 == run.lrs.len() {
                    println!("step {i:>4}  lr {lr:.3e}  loss {loss:.5}");
                }
            }
            let reduction = run.reduction();
            println!(
                "final loss {:.5}, reduction {:.1}%",
                run.losses.last().copied().unwrap_or(f64::NAN),
                100.0 * reduction
            );
            Ok(reduction >= checks::LOSS_REDUCTION_MIN)
        }
        Command::Info => {
            let info = serde_json::json!({
                "build": BuildInfo::current(),
                "check_modules": checks::MODULES,
                "bench_defaults": BenchSpec::default(),
                "bench_csv_columns": retrieval::CSV_COLUMNS,
                "mqar_csv_columns": mqar::MQAR_CSV_COLUMNS,
            });
            println!("{}", serde_json::to_string_pretty(&info)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
