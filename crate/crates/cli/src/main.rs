//! `leaware` command line: data generation, training runs, optimizer
//! comparisons and 1-D map exponents.
//!
//! Exit status: 0 on success, 1 for invalid configuration or arguments,
//! 2 when a training run diverged.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use leaware_core::domains;
use leaware_core::harness::{self, ExperimentConfig, RunStatus};
use leaware_core::lyapunov::{self, Map1d};
use leaware_core::{Error, OptimizerKind};

const EXIT_INVALID: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "leaware", version, about = "Lyapunov-exponent-aware training experiments")]
struct Cli {
    /// Log progress to stderr (per-iteration rows are also written by `train`).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the source and target datasets of a suite as CSV.
    GenData(CommonArgs),
    /// Train one model and write metrics and plot data.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        optimizer: Option<OptimizerKind>,
        /// Draw a fresh perturbation at the start of every epoch.
        #[arg(long)]
        reset_perturbation_per_epoch: bool,
    },
    /// Train every optimizer over `repeats` seeds and tabulate accuracies.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Optimizers to compare (repeatable); all five by default.
        #[arg(long = "optimizer")]
        optimizers: Vec<OptimizerKind>,
        /// Number of seeds, starting at the configured seed.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Lyapunov exponent of a 1-D map orbit.
    LeMap {
        /// logistic, tent or linear
        #[arg(long, default_value = "logistic")]
        map: String,
        /// r for logistic, μ for tent, a for linear
        #[arg(long, default_value_t = 4.0)]
        param: f64,
        #[arg(long, default_value_t = 0.3)]
        x0: f64,
        #[arg(long, default_value_t = 100_000)]
        steps: usize,
    },
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data_fraction: Option<f64>,
}

impl CommonArgs {
    fn resolve(&self, verbose: bool) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(f) = self.data_fraction {
            cfg.data_fraction = f;
        }
        cfg.verbose |= verbose;
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Failure {
    Invalid(String),
    Diverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("diverged: {msg}");
            ExitCode::from(EXIT_DIVERGED)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(common) => gen_data(&common.resolve(cli.verbose)?),
        Command::Train {
            common,
            optimizer,
            reset_perturbation_per_epoch,
        } => {
            let mut cfg = common.resolve(cli.verbose)?;
            if let Some(kind) = optimizer {
                cfg.optimizer.kind = kind;
            }
            cfg.lyapunov.reset_per_epoch |= reset_perturbation_per_epoch;
            train(&cfg)
        }
        Command::Compare {
            common,
            optimizers,
            repeats,
        } => {
            let mut cfg = common.resolve(cli.verbose)?;
            if let Some(r) = repeats {
                cfg.repeats = r;
            }
            let kinds = if optimizers.is_empty() {
                OptimizerKind::ALL.to_vec()
            } else {
                optimizers
            };
            compare(&cfg, &kinds)
        }
        Command::LeMap { map, param, x0, steps } => {
            let map = Map1d::parse(&map, param)?;
            let est = lyapunov::map_le(map, x0, steps)?;
            println!("{:.6}", est.value);
            Ok(())
        }
    }
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::Io { path, source: e })
}

fn gen_data(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let data = cfg.domains.build(cfg.seed, cfg.data_fraction)?;
    let dir = &cfg.output_dir;
    write_config(cfg, dir)?;
    domains::save_csv(&data.source, dir.join("source.csv"))?;
    for t in &data.targets {
        domains::save_csv(t, dir.join(format!("{}.csv", t.domain())))?;
    }
    log::info!(
        "wrote {} source samples and {} targets to {}",
        data.source.len(),
        data.targets.len(),
        dir.display()
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let result = harness::run_training(cfg)?;
    let dir = &cfg.output_dir;
    write_config(cfg, dir)?;
    harness::emit_metrics(&result.metrics, &result.target_tags, dir.join("metrics.csv"))?;
    harness::emit_plot_data(&result.metrics, dir)?;
    if cfg.verbose {
        harness::emit_iterations(&result.iterations, dir.join("iterations.csv"))?;
    }
    harness::write_params(&result.params, dir.join("params.txt"))?;
    for r in &result.metrics {
        log::info!(
            "epoch {:>3}  loss {:.4}  lr {:.4e}  le {:+.5}  mean acc {:.3}",
            r.epoch,
            r.train_loss,
            r.lr,
            r.le,
            r.mean_accuracy()
        );
    }
    match result.status {
        RunStatus::Completed => {
            if let Some(last) = result.metrics.last() {
                for (tag, acc) in &last.accuracies {
                    println!("{tag}: {:.2}%", 100.0 * acc);
                }
            }
            Ok(())
        }
        RunStatus::Diverged { epoch, iteration, reason } => Err(Failure::Diverged(format!(
            "epoch {epoch}, iteration {iteration}: {reason} (partial metrics in {})",
            dir.display()
        ))),
    }
}

fn compare(cfg: &ExperimentConfig, kinds: &[OptimizerKind]) -> Result<(), Failure> {
    if cfg.repeats == 0 {
        return Err(Failure::Invalid("repeats must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..cfg.repeats as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let table = harness::run_comparison(cfg, kinds, &seeds)?;
    write_config(cfg, &cfg.output_dir)?;
    table.write(&cfg.output_dir)?;
    print!("{}", table.render());
    Ok(())
}
