//! Rank-one MAC factor versus the dense inverse it replaces.

use macgrad::curvature::{build_mac_factor, precondition_mac};
use macgrad::tensor::dense_inverse;
use macgrad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> macgrad::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, inp, rho) = (4, 6, 0.5);
    let a_hat: Vec<f64> = (0..inp).map(|_| rng.gen_range(0.0..1.0)).collect();
    let g = Tensor::new(
        vec![out, inp],
        (0..out * inp).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;

    let m = build_mac_factor(&a_hat, rho)?;
    let fast = precondition_mac(&g, &m)?;

    let dense = Tensor::outer(&a_hat, &a_hat).add(&Tensor::eye(inp).scale(rho))?;
    let slow = g.matmul(&dense_inverse(&dense)?)?.scale(rho);

    println!("coefficient 1/(rho + |a|^2) = {:.6}", m.coeff());
    println!(
        "max |fast - dense| = {:.3e}",
        fast.sub(&slow)?
            .data()
            .iter()
            .fold(0.0_f64, |a, v| a.max(v.abs()))
    );
    // the update shrinks only along the mean direction
    let along = |t: &Tensor| -> macgrad::Result<f64> {
        Ok(t.matvec(&a_hat)?.iter().map(|v| v * v).sum::<f64>().sqrt())
    };
    println!("|G a| = {:.4}, |G M a| = {:.4}", along(&g)?, along(&fast)?);
    Ok(())
}
