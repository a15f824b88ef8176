use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Targets;
use crate::tensor::Tensor;

/// Gaussian blobs with the centres that generated them.
#[derive(Debug, Clone)]
pub struct Blobs {
    pub data: Dataset,
    /// `[classes, d]`
    pub centers: Tensor,
}

/// Unit-variance blobs around centres at pairwise distance at least `margin`.
pub fn synth_blobs(n: usize, d: usize, classes: usize, margin: f64, seed: u64) -> Result<Blobs> {
    if classes == 0 || d == 0 {
        return Err(Error::Config(
            "blobs need at least one class and one feature".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = margin * (classes as f64).sqrt();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centers.len() < classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config(format!(
                "cannot place {classes} centres {margin} apart in {d} dimensions"
            )));
        }
        let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-radius..radius)).collect();
        let far = centers.iter().all(|o| {
            let dist: f64 = o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
            dist.sqrt() >= margin
        });
        if far {
            centers.push(c);
        }
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut x = Vec::with_capacity(n * d);
    for &l in &labels {
        for c in &centers[l] {
            let z: f64 = StandardNormal.sample(&mut rng);
            x.push(c + z);
        }
    }
    Ok(Blobs {
        data: Dataset::new(
            Tensor::new(vec![n, d], x)?,
            Targets::Classes(labels),
            classes,
        )?,
        centers: Tensor::new(vec![classes, d], centers.concat())?,
    })
}

/// Two interleaved half circles in the plane with Gaussian jitter.
pub fn synth_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_upper = n.div_ceil(2);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let upper = i < n_upper;
        let (count, k) = if upper {
            (n_upper, i)
        } else {
            (n - n_upper, i - n_upper)
        };
        let t = if count > 1 {
            PI * k as f64 / (count - 1) as f64
        } else {
            0.0
        };
        let (px, py) = if upper {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let jx: f64 = StandardNormal.sample(&mut rng);
        let jy: f64 = StandardNormal.sample(&mut rng);
        x.extend([px + noise * jx, py + noise * jy]);
        y.push(if upper { 0 } else { 1 });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let ds = Dataset::new(Tensor::new(vec![n, 2], x)?, Targets::Classes(y), 2)?;
    ds.subset(&order)
}

#[cfg(test)]
pub(crate) fn row_dist_sq(a: &[f64], b: &[f64]) -> f64 {
    crate::tensor::norm_sq(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
}
