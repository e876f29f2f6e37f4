use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use coreeval::commands::{self, CommandError, Overrides, RunConfig};
use coreeval::knowledge::{TimeWindow, DEFAULT_MAX_RECORDS};
use coreeval::TaskKind;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "coreeval", version, about = "Contamination-resistant benchmark refresh and evaluation")]
struct Cli {
    /// Log filter, e.g. `info` or `coreeval=debug`. Falls back to RUST_LOG.
    #[arg(long, global = true)]
    log: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refresh a dataset with retrieved knowledge and write the updated,
    /// semantic and provenance files.
    Update {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        max_rounds: Option<u32>,
        #[arg(long)]
        t_start: Option<NaiveDate>,
        #[arg(long)]
        t_end: Option<NaiveDate>,
        /// Mock script replacing the one in the config.
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Score predictions against gold labels.
    Eval {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Pair run manifests into the contamination resistance table.
    Report {
        #[arg(long)]
        manifests: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Delta series over test/train proportions.
    Sweep {
        /// Manifest directory (recorded mode).
        #[arg(long, required_unless_present = "simulate")]
        manifests: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        /// Use the synthetic memorizing model instead of recorded runs.
        #[arg(long, requires_all = ["gold", "task"])]
        simulate: bool,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long, default_value_t = 0.6)]
        base_accuracy: f64,
    },
    /// Fleiss' kappa of an items x categories count matrix (CSV).
    Kappa { matrix: PathBuf },
    /// Record live GDELT responses as replayable fixtures.
    CaptureFixtures {
        #[arg(long = "entity", required = true)]
        entities: Vec<String>,
        #[arg(long)]
        start: NaiveDate,
        #[arg(long)]
        end: NaiveDate,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = DEFAULT_MAX_RECORDS)]
        max_records: usize,
    },
}

fn init_logging(filter: Option<&str>) {
    let filter = match filter {
        Some(f) => EnvFilter::new(f),
        None => EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
    };
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn run(command: Command) -> Result<(), CommandError> {
    match command {
        Command::Update {
            config,
            input,
            output_dir,
            seed,
            parallelism,
            max_rounds,
            t_start,
            t_end,
            script,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply(Overrides {
                input,
                output_dir,
                seed,
                parallelism,
                max_rounds,
                t_start,
                t_end,
                script,
            });
            let summary = commands::cmd_update(&cfg)?;
            let c = summary.counts;
            println!(
                "total {} accepted {} unresolved {} no_knowledge {} semantic {}",
                c.total, c.accepted, c.unresolved, c.no_knowledge, c.semantic
            );
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Eval {
            task,
            predictions,
            gold,
            output,
        } => {
            let report = commands::cmd_eval(task, &predictions, &gold, output.as_deref())?;
            println!("{}", commands::describe_eval(&report));
        }
        Command::Report { manifests, output } => {
            let (_, table) = commands::cmd_report(&manifests, output.as_deref())?;
            print!("{table}");
        }
        Command::Sweep {
            manifests,
            fractions,
            seed,
            output,
            simulate,
            gold,
            task,
            base_accuracy,
        } => {
            let report = if simulate {
                commands::cmd_sweep_synthetic(
                    task.expect("clap requires task"),
                    gold.as_deref().expect("clap requires gold"),
                    fractions.as_deref(),
                    base_accuracy,
                    seed,
                    &output,
                )?
            } else {
                let dir = manifests.as_deref().unwrap_or(Path::new("."));
                commands::cmd_sweep(dir, fractions.as_deref(), seed, &output)?
            };
            for s in &report.series {
                let points: Vec<String> = s
                    .points
                    .iter()
                    .map(|p| format!("{:.0}%={:.2}", p.fraction * 100.0, p.value))
                    .collect();
                println!("{} {} {} {:?}: {}", s.model, s.dataset_variant.short(), s.task.display_name(), s.delta, points.join(" "));
            }
        }
        Command::Kappa { matrix } => {
            let k = commands::cmd_kappa(&matrix)?;
            println!("{k:.2}");
        }
        Command::CaptureFixtures {
            entities,
            start,
            end,
            out,
            endpoint,
            max_records,
        } => {
            let window = TimeWindow::new(start, end).map_err(|e| CommandError::Config(e.to_string()))?;
            let n = commands::capture_fixtures(&entities, &window, max_records, endpoint.as_deref(), &out)?;
            println!("captured {n} records into {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log.as_deref());
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CommandError::Data { ids, .. } = &e {
                if !ids.is_empty() {
                    eprintln!("ids: {}", ids.join(", "));
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
