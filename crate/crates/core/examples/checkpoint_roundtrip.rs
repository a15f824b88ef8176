//! Save a model and optimizer state, reload them, and check predictions.

use macgrad::curvature::{Optimizer, OptimizerConfig, OptimizerKind};
use macgrad::data::{synth_two_moons, Checkpoint, CheckpointMeta};
use macgrad::nn::{Model, ModelSpec};

fn main() -> macgrad::Result<()> {
    let data = synth_two_moons(400, 0.1, 0)?;
    let mut model = Model::new(ModelSpec::mlp(2, &[32], 2), 0)?;
    let mut opt = Optimizer::new(OptimizerConfig::profile(OptimizerKind::Smac), &model)?;
    for _ in 0..20 {
        let g = model.backward(&model.forward(&data.x)?, &data.y)?;
        opt.step(&mut model, &g, 0.1)?;
    }
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("moons.ckpt");
    Checkpoint::capture(
        &model,
        Some(&opt),
        None,
        CheckpointMeta {
            epoch: 0,
            step: 20,
            seed: 0,
        },
    )?
    .save(&path)?;

    let back = Checkpoint::load(&path)?;
    let restored = back.restore_model()?;
    let same = model
        .predict(&data.x)?
        .bitwise_eq(&restored.predict(&data.x)?);
    println!(
        "{} bytes on disk, predictions identical: {same}",
        std::fs::metadata(&path)?.len()
    );
    println!(
        "optimizer state restored: {}",
        back.optimizer_for(OptimizerKind::Smac)?.is_some()
    );
    Ok(())
}
