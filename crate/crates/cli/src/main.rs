use clap::{Args, Parser, Subcommand};
use impalloc::harness::{
    append_metrics, read_metrics, read_training_log, run_policy, train_marlia, write_convergence, write_training_log,
    ComparisonTable, Experiment, HarnessConfig, HarnessError, Oracles, Policy,
};
use impalloc::lp::solve_dual;
use impalloc::marlia::{MarliaModel, TrainError};
use impalloc::traffic::{
    generate_pair, generate_validation, load_contracts, load_impressions, save_contracts, save_impressions, DataError,
    TrafficError,
};
use impalloc::{Contract, Impression};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_BAD_ARGS: u8 = 2;
const EXIT_BAD_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(name = "impalloc", version, about = "Allocate impressions between guaranteed contracts and RTB")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, test and validation days plus their contracts.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the allocation LP of one day and write the dual solution as JSON.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Impressions JSONL of the day to solve.
        #[arg(long)]
        train_data: PathBuf,
        /// Contracts JSONL.
        #[arg(long)]
        contracts: PathBuf,
        /// Dual solution JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay the test day under one policy and append a metrics row.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pair: PairArgs,
        /// One of fp, msvv, pid, marlia.
        #[arg(long)]
        policy: String,
        /// Trained checkpoint for the marlia policy; trained on the spot if absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Training episodes when marlia is trained on the spot.
        #[arg(long)]
        episodes: Option<usize>,
        /// Name of the dataset column; defaults to the test file stem.
        #[arg(long)]
        dataset: Option<String>,
        /// Metrics CSV to append to.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the multi-agent policy and write a checkpoint and its training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Impressions JSONL of the training day.
        #[arg(long)]
        train_data: PathBuf,
        /// Contracts JSONL.
        #[arg(long)]
        contracts: PathBuf,
        /// Day used to pick the best checkpoint; the training day when absent.
        #[arg(long)]
        validation_data: Option<PathBuf>,
        /// Overrides the configured episode count.
        #[arg(long)]
        episodes: Option<usize>,
        /// Checkpoint JSON.
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Tabulate metrics CSVs and merge training logs.
    Report {
        /// Metrics CSVs written by `run`; repeatable.
        #[arg(long = "metrics", required = true)]
        metrics: Vec<PathBuf>,
        /// Training logs as `name=path`.
        #[arg(long = "log")]
        logs: Vec<String>,
        /// Output directory for `table.csv` and `convergence.csv`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PairArgs {
    /// Impressions JSONL the offsets and targets are derived from.
    #[arg(long)]
    train_data: PathBuf,
    /// Impressions JSONL of the day that is replayed and scored.
    #[arg(long)]
    test_data: PathBuf,
    /// Contracts JSONL.
    #[arg(long)]
    contracts: PathBuf,
    /// Checkpoint selection day when marlia is trained on the spot.
    #[arg(long)]
    validation_data: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Io(_) => EXIT_IO,
        _ => EXIT_BAD_DATA,
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::UnknownPolicy(_) | HarnessError::MissingModel | HarnessError::Traffic(_) => EXIT_BAD_ARGS,
            HarnessError::Data(d) => data_code(d),
            HarnessError::Train(TrainError::Divergence { .. }) => EXIT_DIVERGED,
            HarnessError::Io(_) => EXIT_IO,
            HarnessError::Csv(c) if c.is_io_error() => EXIT_IO,
            _ => EXIT_BAD_DATA,
        };
        Self::new(code, e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Self::new(data_code(&e), e.to_string())
    }
}

impl From<TrafficError> for Failure {
    fn from(e: TrafficError) -> Self {
        Self::new(EXIT_BAD_ARGS, e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn load_config(common: &Common) -> Result<HarnessConfig, Failure> {
    let cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            HarnessConfig::from_toml_str(&text)?
        }
        None => HarnessConfig::default(),
    };
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn load_day(path: &Path) -> Result<Vec<Impression>, Failure> {
    load_impressions(path).map_err(|e| Failure::new(data_code(&e), format!("{}: {e}", path.display())))
}

fn load_terms(path: &Path) -> Result<Vec<Contract>, Failure> {
    load_contracts(path).map_err(|e| Failure::new(data_code(&e), format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<MarliaModel, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    MarliaModel::from_json(&text).map_err(|e| Failure::new(EXIT_BAD_DATA, format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, json: &str) -> Result<(), Failure> {
    std::fs::write(path, json).map_err(|e| io_failure(path, e))
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen { common, out } => {
            let cfg = load_config(&common)?;
            let pair = generate_pair(&cfg.traffic)?;
            let validation = generate_validation(&cfg.traffic)?;
            std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
            for (name, day) in [("train", &pair.train), ("test", &pair.test), ("validation", &validation)] {
                let path = out.join(format!("{name}.jsonl"));
                save_impressions(&path, day).map_err(|e| io_failure(&path, e))?;
            }
            let path = out.join("contracts.jsonl");
            save_contracts(&path, &pair.contracts).map_err(|e| io_failure(&path, e))?;
            println!(
                "wrote {} train, {} test, {} validation impressions and {} contracts to {}",
                pair.train.len(),
                pair.test.len(),
                validation.len(),
                pair.contracts.len(),
                out.display()
            );
        }
        Command::Solve { common, train_data, contracts, out } => {
            let cfg = load_config(&common)?;
            let day = load_day(&train_data)?;
            let terms = load_terms(&contracts)?;
            let sol = solve_dual(&day, &terms, &cfg.dual).map_err(|e| Failure::from(HarnessError::from(e)))?;
            write_json(&out, &serde_json::to_string_pretty(&sol).expect("dual solution serializes"))?;
            println!("R* = {:.6}", sol.r_star);
        }
        Command::Run { common, pair, policy, model, episodes, dataset, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = episodes {
                cfg.marlia.episodes = n;
            }
            let policy: Policy = policy.parse()?;
            let train = load_day(&pair.train_data)?;
            let test = load_day(&pair.test_data)?;
            let terms = load_terms(&pair.contracts)?;
            let validation = pair.validation_data.as_deref().map(load_day).transpose()?;
            let name = dataset.unwrap_or_else(|| {
                pair.test_data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            });
            let exp = Experiment { name: &name, train: &train, test: &test, contracts: &terms, horizon: cfg.horizon };
            let oracles: Oracles = exp.oracles(&cfg.dual)?;
            let model = match (policy, model) {
                (Policy::Marlia, Some(path)) => Some(load_model(&path)?),
                (Policy::Marlia, None) => Some(train_marlia(&exp, &oracles, validation.as_deref(), &cfg)?.best),
                _ => None,
            };
            let row = run_policy(policy, &exp, &oracles, &cfg, model.as_ref())?;
            append_metrics(&out, std::slice::from_ref(&row))?;
            println!("{} {}: R/R* = {:.4}", row.dataset, row.policy, row.ratio);
        }
        Command::Train { common, train_data, contracts, validation_data, episodes, out, log } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = episodes {
                cfg.marlia.episodes = n;
            }
            let train = load_day(&train_data)?;
            let terms = load_terms(&contracts)?;
            let validation = validation_data.as_deref().map(load_day).transpose()?;
            let exp =
                Experiment { name: "train", train: &train, test: &train, contracts: &terms, horizon: cfg.horizon };
            let train_sol = solve_dual(&train, &terms, &cfg.dual).map_err(|e| Failure::from(HarnessError::from(e)))?;
            let oracles = Oracles { test: train_sol.clone(), train: train_sol };
            let outcome = train_marlia(&exp, &oracles, validation.as_deref(), &cfg)?;
            write_json(&out, &outcome.best.to_json())?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log.csv");
                PathBuf::from(p)
            });
            write_training_log(&log_path, &outcome.log)?;
            println!("best R/R* {:.4} at episode {}", outcome.best_ratio, outcome.best_episode);
        }
        Command::Report { metrics, logs, out } => {
            let mut rows = Vec::new();
            for path in &metrics {
                rows.extend(read_metrics(path)?);
            }
            let mut runs = Vec::new();
            for entry in &logs {
                let (name, path) = entry
                    .split_once('=')
                    .ok_or_else(|| Failure::new(EXIT_BAD_ARGS, format!("--log expects name=path, got {entry:?}")))?;
                runs.push((name.to_string(), read_training_log(Path::new(path))?));
            }
            std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
            let table = ComparisonTable::from_rows(&rows);
            table.write_csv(&out.join("table.csv"))?;
            write_convergence(&out.join("convergence.csv"), &runs)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
