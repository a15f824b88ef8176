//! Curvature state bytes of one square layer as its width grows.

use macgrad::curvature::{Optimizer, OptimizerConfig, OptimizerKind};
use macgrad::nn::{Model, ModelSpec};

fn main() -> macgrad::Result<()> {
    let kinds = [
        OptimizerKind::Mac,
        OptimizerKind::Smac,
        OptimizerKind::Eva,
        OptimizerKind::Foof,
        OptimizerKind::Kfac,
    ];
    print!("{:>6}", "width");
    kinds.iter().for_each(|k| print!("{:>12}", k.name()));
    println!();
    for w in [64, 128, 256, 512, 1024] {
        let model = Model::new(ModelSpec::mlp(w, &[w], 2), 0)?;
        print!("{w:>6}");
        for kind in kinds {
            let opt = Optimizer::new(OptimizerConfig::profile(kind), &model)?;
            print!("{:>12}", opt.curvature_bytes()[0]);
        }
        println!();
    }
    Ok(())
}
