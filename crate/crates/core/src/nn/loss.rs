use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// `½‖u − y‖²` per example.
    Squared,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(z: &Tensor) -> Result<Tensor> {
    let (r, c) = z.dims2()?;
    let mut out = z.clone();
    for i in 0..r {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    debug_assert_eq!(out.shape(), &[r, c]);
    Ok(out)
}

/// Mean loss over the batch and its gradient with respect to `logits`.
pub fn loss_and_grad(kind: LossKind, logits: &Tensor, targets: &Targets) -> Result<(f64, Tensor)> {
    let (b, c) = logits.dims2()?;
    if targets.len() != b {
        return Err(Error::shape("loss", logits.shape(), &[targets.len()]));
    }
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let inv_b = 1.0 / b as f64;
    match (kind, targets) {
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            let mut grad = softmax_rows(logits)?;
            let mut loss = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::Contract(format!(
                        "label {y} out of range for {c} classes"
                    )));
                }
                let row = grad.row_mut(i);
                loss -= row[y].max(f64::MIN_POSITIVE).ln();
                row[y] -= 1.0;
                row.iter_mut().for_each(|v| *v *= inv_b);
            }
            Ok((loss * inv_b, grad))
        }
        (LossKind::Squared, Targets::Values(y)) => {
            if y.shape() != logits.shape() {
                return Err(Error::shape("squared loss", logits.shape(), y.shape()));
            }
            let diff = logits.sub(y)?;
            let loss = 0.5 * diff.data().iter().map(|v| v * v).sum::<f64>() * inv_b;
            Ok((loss, diff.scale(inv_b)))
        }
        (LossKind::Squared, Targets::Classes(labels)) => {
            let mut onehot = Tensor::zeros(&[b, c]);
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::Contract(format!(
                        "label {y} out of range for {c} classes"
                    )));
                }
                onehot.set(i, y, 1.0);
            }
            loss_and_grad(kind, logits, &Targets::Values(onehot))
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Values(_)) => {
            Err(Error::Contract("cross-entropy needs class labels".into()))
        }
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
