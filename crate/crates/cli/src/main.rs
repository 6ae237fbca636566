use std::fs;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use prefbo_core::active::uniform_points;
use prefbo_core::bench::Benchmark;
use prefbo_core::expertsim::{CalibrationConfig, CalibrationTable};
use prefbo_core::harness::{
    ingest_csv, run_bo_experiment, run_elicitation_experiment, run_shape_experiment, to_preferences,
    ExperimentConfig, HarnessError,
};
use prefbo_core::rng_for;
use prefbo_service::{AppState, ServiceConfig, SystemClock};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Expert(#[from] prefbo_core::expertsim::ExpertError),
    #[error(transparent)]
    Bench(#[from] prefbo_core::bench::BenchError),
    #[error(transparent)]
    Pbnn(#[from] prefbo_core::pbnn::PbnnError),
    #[error(transparent)]
    Service(#[from] prefbo_service::ServiceError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser)]
#[command(name = "prefbo", version, about = "Preference elicitation and expert-augmented Bayesian optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hold-out preference accuracy after a number of active queries.
    Elicit {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to runs/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank agreement of the learned latent with the objective under noiseless answers.
    Shape {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expert-augmented optimization against the plain network baseline.
    Bo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrates a simulated expert's bias scale to a target accuracy.
    Simulate {
        #[arg(long)]
        benchmark: String,
        #[arg(long)]
        accuracy: f64,
        /// Size of the uniform point set the expert is drawn over.
        #[arg(long, default_value_t = 2000)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        draws: usize,
        /// Calibration cache; read if present, updated otherwise.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Turns a regression CSV into training and hold-out preference pairs.
    Ingest {
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 2000)]
        train_pairs: usize,
        #[arg(long, default_value_t = 1000)]
        test_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "ingested")]
        out: PathBuf,
    },
    /// Serves the session API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value_t = 120)]
        memorize_secs: u64,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 25)]
        budget: usize,
    },
}

fn run_dir(config: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| Path::new("runs").join(&config.name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Elicit { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let dir = run_dir(&config, out);
            let table = run_elicitation_experiment(&config, Some(&dir))?;
            println!("budget  mean    std     reps");
            for s in &table.summary {
                println!("{:<7} {:.4}  {:.4}  {}", s.budget, s.mean, s.std, s.replications);
            }
            println!("results in {}", dir.display());
        }
        Command::Shape { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let dir = run_dir(&config, out);
            let table = run_shape_experiment(&config, Some(&dir))?;
            println!("budget  mean rho  std     rho>=0.9  reps");
            for s in &table.summary {
                println!(
                    "{:<7} {:.4}    {:.4}  {:.2}      {}",
                    s.budget, s.mean, s.std, s.recovered, s.replications
                );
            }
            println!("results in {}", dir.display());
        }
        Command::Bo { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let dir = run_dir(&config, out);
            let result = run_bo_experiment(&config, Some(&dir))?;
            for arm in &result.arms {
                let last = result
                    .curves
                    .iter()
                    .filter(|c| c.label == arm.label)
                    .max_by_key(|c| c.j);
                if let Some(c) = last {
                    println!("{:<16} final y_best {:.4} ± {:.4} (j = {})", arm.label, c.mean, c.std, c.j);
                }
            }
            println!("results in {}", dir.display());
        }
        Command::Simulate {
            benchmark,
            accuracy,
            points,
            seed,
            draws,
            table,
        } => {
            let f = Benchmark::by_name(&benchmark)?;
            let pts = uniform_points(f.dim(), points, &mut rng_for(seed, 0xCA1));
            let config = CalibrationConfig {
                draws,
                seed,
                ..CalibrationConfig::default()
            };
            let mut cache = match &table {
                Some(p) if p.exists() => CalibrationTable::read_csv(fs::File::open(p).map_err(io_err(p))?)?,
                _ => CalibrationTable::default(),
            };
            let record = cache.get_or_calibrate(&benchmark, &f, &pts, accuracy, &config)?;
            println!(
                "{benchmark}: target {accuracy} -> sigma_delta {:.6}, measured accuracy {:.4}",
                record.sigma_delta, record.measured_accuracy
            );
            if let Some(p) = &table {
                cache.write_csv(fs::File::create(p).map_err(io_err(p))?)?;
            }
        }
        Command::Ingest {
            data,
            target,
            train_pairs,
            test_pairs,
            seed,
            out,
        } => {
            let table = ingest_csv(&data, &target)?;
            for w in &table.warnings {
                log::warn!("{w}");
            }
            let split = to_preferences(&table, train_pairs, test_pairs, seed)?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            let train = out.join("train.csv");
            split.train.write_csv(fs::File::create(&train).map_err(io_err(&train))?)?;
            let test = out.join("test.csv");
            split.test.write_csv(fs::File::create(&test).map_err(io_err(&test))?)?;
            println!("{} rows, {} features", table.len(), table.dim());
            for (name, s) in table.columns.iter().zip(&table.scales) {
                println!("  {name}: [{}, {}]", s.min, s.max);
            }
            println!("{} training and {} hold-out pairs in {}", split.train.len(), split.test.len(), out.display());
        }
        Command::Serve {
            port,
            data,
            memorize_secs,
            grid,
            budget,
        } => {
            let config = ServiceConfig {
                data_dir: Some(data),
                memorize: Duration::from_secs(memorize_secs),
                grid_size: grid,
                default_budget: budget,
                ..ServiceConfig::default()
            };
            let state = Arc::new(AppState::open(config, Arc::new(SystemClock))?);
            let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, port));
            let runtime = tokio::runtime::Runtime::new().map_err(io_err(Path::new("tokio runtime")))?;
            runtime
                .block_on(prefbo_service::serve(addr, state))
                .map_err(io_err(Path::new("server")))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
