use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dense_solve, dot, norm_sq, Tensor};

/// Smallest damping ever handed to a rank-one inverse.
pub const RHO_FLOOR: f64 = 1e-8;

/// `M = I − â âᵀ / (ρ + ‖â‖²)`, kept in rank-one form so that storing it
/// costs `O(d_in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacFactor {
    pub a_hat: Vec<f64>,
    pub rho: f64,
    coeff: f64,
}

impl MacFactor {
    pub fn dim(&self) -> usize {
        self.a_hat.len()
    }

    /// `1 / (ρ + ‖â‖²)`
    pub fn coeff(&self) -> f64 {
        self.coeff
    }

    pub fn dense(&self) -> Tensor {
        let n = self.dim();
        let mut m = Tensor::eye(n);
        for i in 0..n {
            for j in 0..n {
                let v = m.at(i, j) - self.a_hat[i] * self.a_hat[j] * self.coeff;
                m.set(i, j, v);
            }
        }
        m
    }

    /// `w ↦ M w` for a single vector.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        let s = dot(w, &self.a_hat) * self.coeff;
        w.iter().zip(&self.a_hat).map(|(x, a)| x - s * a).collect()
    }
}

pub fn build_mac_factor(a_hat: &[f64], rho: f64) -> Result<MacFactor> {
    if !(rho >= RHO_FLOOR) || !rho.is_finite() {
        return Err(Error::Contract(format!(
            "damping {rho} below floor {RHO_FLOOR}"
        )));
    }
    Ok(MacFactor {
        a_hat: a_hat.to_vec(),
        rho,
        coeff: 1.0 / (rho + norm_sq(a_hat)),
    })
}

/// `ρ = max(ρ_floor, (tr E[aaᵀ] − ‖â‖²) / dim)`.
pub fn adaptive_rho(second_moment_trace: f64, a_hat: &[f64]) -> f64 {
    let raw = (second_moment_trace - norm_sq(a_hat)) / a_hat.len().max(1) as f64;
    if raw.is_finite() {
        raw.max(RHO_FLOOR)
    } else {
        RHO_FLOOR
    }
}

fn check_cols(op: &'static str, g: &Tensor, dim: usize) -> Result<(usize, usize)> {
    let (r, c) = g.dims2()?;
    if c != dim {
        return Err(Error::shape(op, g.shape(), &[r, dim]));
    }
    Ok((r, c))
}

/// `Ĝ = G M = G − (G â) âᵀ / (ρ + ‖â‖²)` with two matrix-vector products.
pub fn precondition_mac(g: &Tensor, m: &MacFactor) -> Result<Tensor> {
    let (r, _) = check_cols("precondition_mac", g, m.dim())?;
    let mut out = g.clone();
    for i in 0..r {
        let row = out.row_mut(i);
        let s = dot(row, &m.a_hat) * m.coeff;
        for (x, a) in row.iter_mut().zip(&m.a_hat) {
            *x -= s * a;
        }
    }
    Ok(out)
}

/// `Ĝ = diag(p̂ + ρ)⁻¹ G M`.
pub fn precondition_smac(g: &Tensor, m: &MacFactor, p_hat: &[f64], rho: f64) -> Result<Tensor> {
    if g.rows() != p_hat.len() {
        return Err(Error::shape(
            "precondition_smac",
            g.shape(),
            &[p_hat.len(), m.dim()],
        ));
    }
    if p_hat.iter().any(|p| *p < 0.0) {
        return Err(Error::Contract("p_hat must be non-negative".into()));
    }
    let mut out = precondition_mac(g, m)?;
    for (i, p) in p_hat.iter().enumerate() {
        let s = 1.0 / (p + rho);
        out.row_mut(i).iter_mut().for_each(|x| *x *= s);
    }
    Ok(out)
}

fn damped(a: &Tensor, rho: f64) -> Result<Tensor> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::shape("damped factor", a.shape(), &[n, n]));
    }
    Ok(a.add(&Tensor::eye(n).scale(rho))?)
}

/// `Ĝ = G (A + ρI)⁻¹` for symmetric `A`.
pub fn precondition_foof(g: &Tensor, a: &Tensor, rho: f64) -> Result<Tensor> {
    check_cols("precondition_foof", g, a.rows())?;
    dense_solve(&damped(a, rho)?, &g.transpose()?)?.transpose()
}

/// `Ĝ = (P + ρI)⁻¹ G (A + ρI)⁻¹` for symmetric `A`, `P`.
pub fn precondition_kfac(g: &Tensor, a: &Tensor, p: &Tensor, rho: f64) -> Result<Tensor> {
    check_cols("precondition_kfac", g, a.rows())?;
    if g.rows() != p.rows() {
        return Err(Error::shape(
            "precondition_kfac",
            g.shape(),
            &[p.rows(), a.rows()],
        ));
    }
    let left = dense_solve(&damped(p, rho)?, g)?;
    dense_solve(&damped(a, rho)?, &left.transpose()?)?.transpose()
}

/// `Ĝ = (p̄p̄ᵀ + ρI)⁻¹ G (āāᵀ + ρI)⁻¹`, both inverses by Sherman–Morrison.
pub fn precondition_eva(g: &Tensor, a_bar: &[f64], p_bar: &[f64], rho: f64) -> Result<Tensor> {
    if g.rows() != p_bar.len() {
        return Err(Error::shape(
            "precondition_eva",
            g.shape(),
            &[p_bar.len(), a_bar.len()],
        ));
    }
    let ma = build_mac_factor(a_bar, rho)?;
    let mp = build_mac_factor(p_bar, rho)?;
    let right = precondition_mac(g, &ma)?;
    // (p̄p̄ᵀ + ρI)⁻¹ = M_p / ρ, applied column by column via the transpose
    let left = precondition_mac(&right.transpose()?, &mp)?.transpose()?;
    Ok(left.scale(1.0 / (rho * rho)))
}

/// Momentum buffer update followed by the parameter step.
///
/// Coupled decay folds `wd·θ` into the velocity; decoupled decay shrinks
/// `θ` by `η·wd·θ` outside the momentum buffer.
pub fn apply_update(
    theta: &mut [f64],
    velocity: &mut [f64],
    g_hat: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    decoupled: bool,
) -> Result<()> {
    if theta.len() != g_hat.len() || velocity.len() != g_hat.len() {
        return Err(Error::shape("apply_update", &[theta.len()], &[g_hat.len()]));
    }
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(g_hat) {
        if decoupled {
            *v = momentum * *v + g;
            *t -= lr * *v + lr * weight_decay * *t;
        } else {
            *v = momentum * *v + g + weight_decay * *t;
            *t -= lr * *v;
        }
    }
    Ok(())
}
