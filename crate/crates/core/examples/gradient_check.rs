//! Central finite differences against backward for a small CNN.

use macgrad::nn::{
    flatten_gradients, numeric_gradient, relative_error, LayerSpec, LossKind, Model, ModelSpec,
    Targets,
};
use macgrad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> macgrad::Result<()> {
    let spec = ModelSpec {
        input: vec![1, 6, 6],
        layers: vec![
            LayerSpec::Conv2d {
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Linear { out: 4, bias: true },
        ],
        loss: LossKind::SoftmaxCrossEntropy,
        capture: false,
    };
    let model = Model::new(spec, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(
        vec![3, 1, 6, 6],
        (0..108).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let y = Targets::Classes(vec![0, 2, 3]);

    let analytic = flatten_gradients(&model.backward(&model.forward(&x)?, &y)?);
    let numeric = numeric_gradient(&model, &x, &y, 1e-6)?;
    println!(
        "{} parameters, relative error {:.3e}",
        analytic.len(),
        relative_error(&analytic, &numeric)
    );
    Ok(())
}
