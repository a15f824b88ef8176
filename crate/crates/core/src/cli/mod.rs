//! Batch-experiment commands behind the `macgrad` binary.

pub mod config;
pub mod train;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DataConfig, LrSchedule, OptimizerBlock, RunConfig, ScheduleConfig};
pub use train::{
    conform, evaluate, format_summary, prepare_data, read_summary, run_training, RunSummary,
    CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE,
};

use crate::convergence::{run_seed, HarnessConfig, SeedRun};
use crate::data::{Checkpoint, DataSource};
use crate::error::{Error, Result};
use crate::spectra::{layer_report, SpectralReport};

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numerical failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::NumericFailure { .. } | Error::Singular { .. } => 3,
        _ => 1,
    }
}

/// One aligned row per run; wall time is relative to the first run.
pub fn compare_table(dirs: &[PathBuf]) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::Config(
            "compare needs at least one run directory".into(),
        ));
    }
    let runs = dirs
        .iter()
        .map(|d| read_summary(d).map(|s| (d, s)))
        .collect::<Result<Vec<_>>>()?;
    let base = runs[0].1.wall_ms;
    let name_w = runs
        .iter()
        .map(|(d, _)| d.display().to_string().len())
        .max()
        .unwrap_or(3)
        .max(3);
    let mut out = format!(
        "{:<name_w$}  {:<14} {:>6} {:>12} {:>9} {:>10} {:>8} {:>14}\n",
        "run", "optimizer", "epochs", "train_loss", "test_acc", "wall_s", "rel_time", "state_bytes"
    );
    for (dir, s) in &runs {
        let loss = s.final_train_loss.map_or("-".into(), |v| format!("{v:.6}"));
        let acc = s.final_test_acc.map_or("-".into(), |v| format!("{v:.4}"));
        let rel = if base > 0.0 { s.wall_ms / base } else { 1.0 };
        out.push_str(&format!(
            "{:<name_w$}  {:<14} {:>6} {:>12} {:>9} {:>10.2} {:>8.2} {:>14}\n",
            dir.display(),
            s.optimizer.name(),
            s.epochs,
            loss,
            acc,
            s.wall_ms / 1e3,
            rel,
            s.peak_state_bytes
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SpectraArgs {
    pub checkpoint: PathBuf,
    pub batch_source: String,
    pub top_k: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Spectral reports for every parameter block of a checkpointed model on
/// one batch, written as JSON lines.
pub fn cmd_spectra(args: &SpectraArgs) -> Result<Vec<SpectralReport>> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.restore_model()?;
    let source = DataSource::parse(&args.batch_source)?;
    let ds = conform(source.load(args.seed)?, &model.spec().input)?;
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(args.seed));
    idx.truncate(args.batch_size.max(1));
    let (mut x, y) = ds.gather(&idx)?;
    if let Some(norm) = &ckpt.norm {
        norm.apply(&mut x)?;
    }
    let pass = model.forward(&x)?;
    let grads = model.backward(&pass, &y)?;
    let mut reports = Vec::with_capacity(grads.blocks.len());
    let mut w = BufWriter::new(File::create(&args.out)?);
    for (i, g) in grads.blocks.iter().enumerate() {
        let mut r = layer_report(i, g, args.top_k)?;
        r.epoch = Some(ckpt.meta.epoch);
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
        reports.push(r);
    }
    w.flush()?;
    Ok(reports)
}

pub fn format_spectra(reports: &[SpectralReport]) -> String {
    let mut out = format!(
        "{:>5} {:>5} {:<8} {:>12} {:>12} {:>9} {:>11} {:>9}\n",
        "block", "layer", "kind", "top λ(A)", "top λ(P)", "cos", "dk_bound", "c"
    );
    for r in reports {
        out.push_str(&format!(
            "{:>5} {:>5} {:<8} {:>12.4e} {:>12.4e} {:>9.4} {:>11.4e} {:>9.4}\n",
            r.block,
            r.layer,
            format!("{:?}", r.kind).to_lowercase(),
            r.top_a.first().copied().unwrap_or(0.0),
            r.top_p.first().copied().unwrap_or(0.0),
            r.cos_align,
            r.dk_bound,
            r.prop1_c
        ));
    }
    out
}

/// Runs the convergence harness for seeds `0..cfg.seeds`, writing one JSON
/// line per seed.
pub fn cmd_convlab(cfg: &HarnessConfig, out: &Path) -> Result<Vec<SeedRun>> {
    if cfg.m == 0 || cfg.n == 0 || cfg.d == 0 {
        return Err(Error::Config("convlab: m, n and d must be positive".into()));
    }
    if !(cfg.rho > 0.0) {
        return Err(Error::Config("convlab: rho must be positive".into()));
    }
    let mut w = BufWriter::new(File::create(out)?);
    let mut runs = Vec::new();
    for seed in 0..cfg.seeds {
        let run = run_seed(cfg, seed)?;
        serde_json::to_writer(&mut w, &run)?;
        w.write_all(b"\n")?;
        runs.push(run);
    }
    w.flush()?;
    Ok(runs)
}

pub fn format_convlab(runs: &[SeedRun]) -> String {
    let mut out = format!(
        "{:>4} {:>10} {:>9} {:>9} {:>9} {:>9} {:>6} {:>7} {:>11}\n",
        "seed", "eta", "λ_Γ", "factor", "bound_ok", "monotone", "drift", "C", "‖x̄‖²/λmax"
    );
    for r in runs {
        out.push_str(&format!(
            "{:>4} {:>10.3e} {:>9.4} {:>9.6} {:>8.1}% {:>8.1}% {:>6} {:>7.3} {:>11.4}\n",
            r.seed,
            r.eta,
            r.lambda_gamma,
            r.report.factor,
            100.0 * r.report.ratio_ok_fraction,
            100.0 * r.report.monotone_fraction,
            if r.report.drift_ok { "ok" } else { "FAIL" },
            r.report.jacobian_c,
            r.factors.ratio()
        ));
    }
    out
}
