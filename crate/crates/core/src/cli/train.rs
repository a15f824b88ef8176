use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DataConfig, RunConfig};
use crate::convergence::mean_vs_top;
use crate::curvature::{dataset_mean, Optimizer, OptimizerKind};
use crate::data::{Checkpoint, CheckpointMeta, Dataset, MetricsRecord, MetricsWriter, RecordKind};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Model, Targets};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

const EVAL_CHUNK: usize = 256;

/// Final numbers of one run, also written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub optimizer: OptimizerKind,
    pub epochs: u64,
    pub steps: u64,
    pub final_train_loss: Option<f64>,
    pub final_test_acc: Option<f64>,
    pub wall_ms: f64,
    /// largest total curvature state over the run, in bytes
    pub peak_state_bytes: usize,
}

/// Loads, reshapes, splits and standardises the configured dataset.
pub fn prepare_data(cfg: &DataConfig, input: &[usize], seed: u64) -> Result<(Dataset, Dataset)> {
    let mut ds = cfg.source.load(seed)?;
    if let Some(limit) = cfg.limit {
        let keep: Vec<usize> = (0..limit.min(ds.len())).collect();
        ds = ds.subset(&keep)?;
    }
    let ds = conform(ds, cfg.shape.as_deref().unwrap_or(input))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = ds.split(cfg.test_fraction, &mut rng)?;
    if cfg.standardize {
        train.standardize_with(&mut test)?;
    }
    Ok((train, test))
}

/// Reinterprets examples as `shape` when the feature counts agree.
pub fn conform(ds: Dataset, shape: &[usize]) -> Result<Dataset> {
    if ds.example_shape() == shape {
        return Ok(ds);
    }
    let want: usize = shape.iter().product();
    if ds.features() != want {
        return Err(Error::Config(format!(
            "examples have shape {:?} ({} features) but the model expects {shape:?}",
            ds.example_shape(),
            ds.features()
        )));
    }
    ds.reshape_examples(shape)
}

/// Mean loss and accuracy over a dataset, in chunks.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<(f64, Option<f64>)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.gather(chunk)?;
        let logits = model.predict(&x)?;
        loss += crate::nn::loss_and_grad(model.spec().loss, &logits, &y)?.0 * chunk.len() as f64;
        if let Targets::Classes(c) = &y {
            correct += argmax_rows(&logits)
                .iter()
                .zip(c)
                .filter(|(p, t)| p == t)
                .count();
        }
    }
    let n = ds.len().max(1) as f64;
    let acc = matches!(ds.y, Targets::Classes(_)).then_some(correct as f64 / n);
    Ok((loss / n, acc))
}

fn numeric(step: u64, e: Error) -> Error {
    match e {
        Error::Singular { ratio } => Error::NumericFailure {
            step,
            what: format!("singular curvature factor (pivot ratio {ratio:.3e})"),
        },
        other => other,
    }
}

/// Runs one training job and writes metrics, checkpoint and summary into
/// `cfg.out`.
pub fn run_training(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let ocfg = cfg.optimizer.resolve();
    let (train, test) = prepare_data(&cfg.data, &cfg.model.input, cfg.seed)?;
    if train.is_empty() {
        return Err(Error::Config("data: training split is empty".into()));
    }
    let design = train.design_matrix()?;
    let fc = mean_vs_top(&design)?;
    log::info!(
        "train split: {} examples; ‖x̄‖² = {:.4e}, λ_max(XᵀX) ≥ {:.4e}, ratio {:.3e}",
        train.len(),
        fc.mean_norm_sq,
        fc.lambda_max,
        fc.ratio()
    );

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(ocfg.clone(), &model)?;
    if ocfg.precomputed_first_layer {
        opt.set_first_layer_mean(&dataset_mean(&train.x)?)?;
    }

    let out = &cfg.out;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let mut writer = MetricsWriter::create(&out.join(METRICS_FILE))?;

    let bs = cfg.schedule.batch_size;
    let per_epoch = train.len().div_ceil(bs) as u64;
    let total = per_epoch * cfg.schedule.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_7463_6865_73);
    let start = Instant::now();
    let mut step = 0u64;
    let mut peak = opt.curvature_bytes().iter().sum::<usize>();
    let mut last = (None, None);

    for epoch in 0..cfg.schedule.epochs {
        for idx in train.batches(bs, &mut rng) {
            let lr = cfg.schedule.lr_schedule.lr(ocfg.lr, step, total);
            let (x, y) = train.gather(&idx)?;
            let pass = model.forward(&x)?;
            let grads = model.backward(&pass, &y)?;
            if !grads.loss.is_finite() {
                log::error!("step {step}: training loss is {}", grads.loss);
                return Err(Error::NumericFailure {
                    step,
                    what: format!("training loss is {}", grads.loss),
                });
            }
            opt.step(&mut model, &grads, lr).map_err(|e| {
                let e = numeric(step, e);
                log::error!("step {step}: {e}");
                e
            })?;
            let bytes = opt.curvature_bytes();
            peak = peak.max(bytes.iter().sum());
            if step % cfg.schedule.log_every == 0 {
                writer.write(&MetricsRecord {
                    kind: RecordKind::Step,
                    step,
                    epoch,
                    lr,
                    train_loss: grads.loss,
                    test_acc: None,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                    state_bytes: bytes,
                })?;
            }
            step += 1;
        }
        let (train_loss, _) = evaluate(&model, &train)?;
        if !train_loss.is_finite() {
            log::error!("epoch {epoch}: training loss is {train_loss}");
            return Err(Error::NumericFailure {
                step,
                what: format!("training loss is {train_loss} after epoch {epoch}"),
            });
        }
        let test_acc = if test.is_empty() {
            None
        } else {
            evaluate(&model, &test)?.1
        };
        writer.write(&MetricsRecord {
            kind: RecordKind::Epoch,
            step,
            epoch,
            lr: cfg.schedule.lr_schedule.lr(ocfg.lr, step, total),
            train_loss,
            test_acc,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            state_bytes: opt.curvature_bytes(),
        })?;
        log::info!("epoch {epoch}: train loss {train_loss:.5}, test acc {test_acc:?}");
        last = (Some(train_loss), test_acc);
    }
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;

    let meta = CheckpointMeta {
        epoch: cfg.schedule.epochs,
        step,
        seed: cfg.seed,
    };
    Checkpoint::capture(&model, Some(&opt), train.norm.as_ref(), meta)?
        .save(&out.join(CHECKPOINT_FILE))?;
    let summary = RunSummary {
        optimizer: ocfg.optimizer,
        epochs: cfg.schedule.epochs,
        steps: step,
        final_train_loss: last.0,
        final_test_acc: last.1,
        wall_ms,
        peak_state_bytes: peak,
    };
    fs::write(
        out.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path: PathBuf = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("{} is not a completed run: {e}", dir.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn format_summary(s: &RunSummary) -> String {
    let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    format!(
        "{:<10} {:>6} {:>7} {:>12} {:>9} {:>10} {:>14}\n{:<10} {:>6} {:>7} {:>12} {:>9} {:>10.2} {:>14}",
        "optimizer",
        "epochs",
        "steps",
        "train_loss",
        "test_acc",
        "wall_s",
        "state_bytes",
        s.optimizer.name(),
        s.epochs,
        s.steps,
        opt(s.final_train_loss, 6),
        opt(s.final_test_acc, 4),
        s.wall_ms / 1e3,
        s.peak_state_bytes
    )
}
