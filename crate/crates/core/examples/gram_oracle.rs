//! Monte-Carlo limiting Gram matrix against its arc-cosine closed form,
//! with a z-score calibration check of the reported standard errors.

use macgrad::convergence::{gram_closed_form, gram_sigma_inf, make_dataset};

fn main() -> macgrad::Result<()> {
    let (x, _) = make_dataset(6, 10, 0)?;
    let mc = gram_sigma_inf(&x, 100_000, 1)?;
    let exact = gram_closed_form(&x)?;
    let mut z = Vec::new();
    for i in 0..6 {
        for j in i..6 {
            z.push((mc.mean.at(i, j) - exact.at(i, j)) / mc.se.at(i, j));
        }
    }
    println!("lambda_min {:.4} +- {:.4}", mc.lambda_min, mc.lambda_min_se);
    println!(
        "z-scores {:?}",
        z.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()
    );
    Ok(())
}
