//! Kronecker-factor spectra and mean alignment after a short training run.

use macgrad::curvature::{Optimizer, OptimizerConfig, OptimizerKind};
use macgrad::data::synth_blobs;
use macgrad::nn::{Model, ModelSpec};
use macgrad::spectra::layer_report;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> macgrad::Result<()> {
    let data = synth_blobs(3000, 20, 5, 3.0, 4)?.data;
    let mut model = Model::new(ModelSpec::mlp(20, &[128, 128], 5), 4)?;
    let cfg = OptimizerConfig {
        lr: 0.02,
        ..OptimizerConfig::profile(OptimizerKind::Sgd)
    };
    let lr = cfg.lr;
    let mut opt = Optimizer::new(cfg, &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        for batch in data.batches(64, &mut rng) {
            let (x, y) = data.gather(&batch)?;
            let g = model.backward(&model.forward(&x)?, &y)?;
            opt.step(&mut model, &g, lr)?;
        }
    }
    let idx: Vec<usize> = (0..512).collect();
    let (x, y) = data.gather(&idx)?;
    let g = model.backward(&model.forward(&x)?, &y)?;
    for (b, grad) in g.blocks.iter().enumerate() {
        let r = layer_report(b, grad, 3)?;
        println!(
            "block {b}: top A {:?} cos(v1, mean) {:.4} |mean|^2 {:.3} prop1 c {:.3}",
            r.top_a
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>(),
            r.cos_align,
            r.mean_norm_sq,
            r.prop1_c
        );
    }
    Ok(())
}
