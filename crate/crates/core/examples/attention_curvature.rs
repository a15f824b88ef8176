//! Mean-attention statistics and the fused QKV preconditioner.

use macgrad::attn_curvature::{attention_statistics, precondition_attn};
use macgrad::curvature::build_mac_factor;
use macgrad::nn::{LayerSpec, LossKind, Model, ModelSpec, Targets};
use macgrad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> macgrad::Result<()> {
    let (tokens, d) = (5, 8);
    let spec = ModelSpec {
        input: vec![tokens, d],
        layers: vec![
            LayerSpec::Attention { heads: 2 },
            LayerSpec::TokenMean,
            LayerSpec::Linear { out: 3, bias: true },
        ],
        loss: LossKind::SoftmaxCrossEntropy,
        capture: true,
    };
    let model = Model::new(spec, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = 16;
    let x = Tensor::new(
        vec![batch, tokens, d],
        (0..batch * tokens * d)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )?;
    let y = Targets::Classes((0..batch).map(|_| rng.gen_range(0..3)).collect());
    let g = model.backward(&model.forward(&x)?, &y)?;

    let stats = g.blocks[0]
        .stats
        .as_ref()
        .and_then(|s| s.attention.as_ref())
        .expect("captured");
    let (x_mean, trace, v_mean) = attention_statistics(&stats.x, &stats.t)?;
    println!(
        "|x_mean|^2 = {:.4}, tr E[x x^T] = {trace:.4}",
        x_mean.iter().map(|v| v * v).sum::<f64>()
    );
    println!(
        "value statistic {:?}",
        v_mean.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
    );

    let rho = 1.0;
    let pre = precondition_attn(
        &g.blocks[0].weight,
        &build_mac_factor(&x_mean, rho)?,
        &build_mac_factor(&v_mean, rho)?,
    )?;
    println!(
        "|G_qkv| = {:.4e}, |preconditioned| = {:.4e}",
        g.blocks[0].weight.frobenius_norm(),
        pre.frobenius_norm()
    );
    Ok(())
}
