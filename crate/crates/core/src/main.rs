use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use zofair::exec::set_threads;
use zofair::experiment::{
    cmd_generate, cmd_invocation_bench, cmd_sweep, cmd_validate_gradients, emit_bench, emit_reports, emit_sweep,
    emit_validation, ExperimentConfig,
};
use zofair::model::serve;
use zofair::{Execution, MlpModel, ModelHandle, Precision, Result};

#[derive(Parser)]
#[command(name = "zofair", version, about = "Black-box individual fairness testing with zero-order gradients")]
struct Cli {
    /// Overrides the config's rng_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Global then local generation for every configured round.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// One generation run per perturbation size.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "h", value_delimiter = ',', required = true)]
        h: Vec<f64>,
    },
    /// Compares zero-order estimates against exact gradients.
    ValidateGradients {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Invocation counts and timings of the estimators.
    BenchInvocations {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
    },
    /// Serves a model file over the line-delimited JSON protocol on stdio.
    ServeModel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "f64")]
        precision: PrecisionArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F64 => Precision::F64,
            PrecisionArg::F32 => Precision::F32,
        }
    }
}

fn load_config(cli: &Cli, path: &PathBuf) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    let exec = match cli.jobs {
        Some(1) => Execution::Sequential,
        _ => Execution::Parallel,
    };
    Ok(cfg.with_execution(exec))
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(jobs) = cli.jobs {
        set_threads(jobs);
    }
    match &cli.command {
        Command::Generate { config } => {
            let cfg = load_config(cli, config)?;
            let run = cmd_generate(&cfg)?;
            emit_reports(&run, &cfg.output_dir)?;
            let agg = &run.report.outcome.aggregate;
            log::info!(
                "global {} local {} total {} unique instances, {:.1}/s",
                agg.global_unique,
                agg.local_unique,
                agg.total_unique,
                run.report.timing.speed
            );
            Ok(run.report.outcome.verified)
        }
        Command::Sweep { config, h } => {
            let cfg = load_config(cli, config)?;
            let runs = cmd_sweep(&cfg, h)?;
            emit_sweep(&runs, &cfg.output_dir)?;
            for (h, run) in &runs {
                log::info!("h={h:e}: {} unique instances", run.report.outcome.aggregate.total_unique);
            }
            Ok(runs.iter().all(|(_, r)| r.report.outcome.verified))
        }
        Command::ValidateGradients { config, samples } => {
            let cfg = load_config(cli, config)?;
            let report = cmd_validate_gradients(&cfg, *samples)?;
            emit_validation(&report, &cfg.output_dir)?;
            log::info!(
                "mean similarity: gradient {:.4} direction {:.4} probability {:.4}",
                report.mean_gradient_similarity,
                report.mean_direction_similarity,
                report.mean_probability_similarity
            );
            Ok(true)
        }
        Command::BenchInvocations { config, repetitions } => {
            let cfg = load_config(cli, config)?;
            let report = cmd_invocation_bench(&cfg, *repetitions)?;
            emit_bench(&report, &cfg.output_dir)?;
            for r in &report.rows {
                log::info!(
                    "{} n={}: naive {} inv {:.3e}s, vectored {} inv {:.3e}s",
                    r.model,
                    r.attributes,
                    r.naive_invocations,
                    r.naive_seconds,
                    r.vectored_invocations,
                    r.vectored_seconds
                );
            }
            Ok(true)
        }
        Command::ServeModel { model, precision } => {
            let handle = ModelHandle::in_process(MlpModel::load(model)?)
                .with_execution(Execution::Sequential)
                .with_precision((*precision).into());
            serve(&handle, io::stdin().lock(), BufWriter::new(io::stdout().lock()))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: run incomplete or some stored instances failed re-verification");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
