//! SGD, MAC, SMAC and KFAC on Gaussian blobs with the same batches.

use macgrad::curvature::{Optimizer, OptimizerConfig, OptimizerKind};
use macgrad::data::synth_blobs;
use macgrad::nn::{Model, ModelSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> macgrad::Result<()> {
    let data = synth_blobs(2000, 16, 4, 3.0, 0)?.data;
    for kind in [
        OptimizerKind::Sgd,
        OptimizerKind::Mac,
        OptimizerKind::Smac,
        OptimizerKind::Kfac,
    ] {
        let mut model = Model::new(ModelSpec::mlp(16, &[64, 64], 4), 0)?;
        let cfg = OptimizerConfig {
            lr: 0.05,
            ..OptimizerConfig::profile(kind)
        };
        let lr = cfg.lr;
        let mut opt = Optimizer::new(cfg, &model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for epoch in 0..3 {
            for batch in data.batches(64, &mut rng) {
                let (x, y) = data.gather(&batch)?;
                let g = model.backward(&model.forward(&x)?, &y)?;
                opt.step(&mut model, &g, lr)?;
            }
            let loss = model.loss(&data.x, &data.y)?;
            println!("{:<5} epoch {epoch}: loss {loss:.4}", kind.name());
        }
        println!(
            "{:<5} curvature bytes per block {:?}",
            kind.name(),
            opt.curvature_bytes()
        );
    }
    Ok(())
}
