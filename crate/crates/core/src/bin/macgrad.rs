use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use macgrad::cli::{
    cmd_convlab, cmd_spectra, compare_table, exit_code, format_convlab, format_spectra,
    format_summary, run_training, RunConfig, SpectraArgs,
};
use macgrad::convergence::HarnessConfig;
use macgrad::curvature::OptimizerKind;
use macgrad::{Error, Result};

#[derive(Parser)]
#[command(
    name = "macgrad",
    version,
    about = "Mean-activation curvature optimizers and experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Eigenspectra and alignment diagnostics of a checkpoint on one batch.
    Spectra(SpectraCli),
    /// Two-layer ReLU convergence harness.
    Convlab(ConvlabArgs),
    /// Side-by-side table of finished runs.
    Compare { runs: Vec<PathBuf> },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    epochs: Option<u64>,
}

#[derive(Args)]
struct SpectraCli {
    #[arg(long)]
    checkpoint: PathBuf,
    /// e.g. `idx:images.gz,labels.gz` or `blobs:512,8,3`
    #[arg(long)]
    batch_source: String,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "report.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct ConvlabArgs {
    #[arg(long, default_value_t = 4096)]
    m: usize,
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    d: usize,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// absolute step size; overrides --eta-mult
    #[arg(long)]
    eta: Option<f64>,
    /// step size as a multiple of ρ/(λ_max(XᵀX)·λ_Γ)
    #[arg(long, default_value_t = 0.1)]
    eta_mult: f64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 10_000)]
    mc_samples: usize,
    #[arg(long, default_value = "trace.jsonl")]
    out: PathBuf,
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(out) = a.out {
        cfg.out = out;
    }
    if let Some(name) = a.optimizer {
        let kind =
            OptimizerKind::parse(&name).map_err(|e| Error::Config(format!("--optimizer: {e}")))?;
        if kind != cfg.optimizer.name {
            // overrides tuned for another optimizer do not carry over
            cfg.optimizer = macgrad::cli::OptimizerBlock {
                lr: cfg.optimizer.lr,
                ..macgrad::cli::OptimizerBlock::named(kind)
            };
        }
    }
    if let Some(e) = a.epochs {
        cfg.schedule.epochs = e;
    }
    let summary = run_training(&cfg)?;
    println!("{}", format_summary(&summary));
    println!("run written to {}", cfg.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Train(a) => train(a),
        Command::Spectra(a) => {
            let reports = cmd_spectra(&SpectraArgs {
                checkpoint: a.checkpoint,
                batch_source: a.batch_source,
                top_k: a.top_k,
                batch_size: a.batch_size,
                seed: a.seed,
                out: a.out.clone(),
            })?;
            print!("{}", format_spectra(&reports));
            println!("report written to {}", a.out.display());
            Ok(())
        }
        Command::Convlab(a) => {
            let cfg = HarnessConfig {
                m: a.m,
                n: a.n,
                d: a.d,
                rho: a.rho,
                eta_mult: a.eta_mult,
                eta: a.eta,
                iters: a.iters,
                seeds: a.seeds,
                mc_samples: a.mc_samples,
            };
            let runs = cmd_convlab(&cfg, &a.out)?;
            print!("{}", format_convlab(&runs));
            for r in &runs {
                for v in &r.report.violations {
                    println!("seed {}: {v}", r.seed);
                }
            }
            Ok(())
        }
        Command::Compare { runs } => {
            print!("{}", compare_table(&runs)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("MACGRAD_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    log::warn!("could not size thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: MACGRAD_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
