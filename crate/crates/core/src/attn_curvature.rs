//! Mean-activation curvature for fused query/key/value projections.
//!
//! The query and key blocks share a factor built from the mean input token;
//! the value block uses the attention-weighted mean token `Xᵀt̄`.

use serde::{Deserialize, Serialize};

use crate::curvature::{
    adaptive_rho, build_mac_factor, precondition_mac, Damping, MacFactor, VectorEma,
};
use crate::error::{Error, Result};
use crate::nn::{column_block, AttentionStats};
use crate::tensor::Tensor;

/// Column means of a score matrix: the average attention distribution.
pub fn mean_attention(t: &Tensor) -> Result<Vec<f64>> {
    let (n, m) = t.dims2()?;
    if n != m || n == 0 {
        return Err(Error::shape("mean_attention", t.shape(), &[n, n]));
    }
    for i in 0..n {
        let s: f64 = t.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            log::warn!("attention row {i} sums to {s}, not 1");
        }
    }
    Ok(t.mean_axis(0)?.into_data())
}

/// `Xᵀ t̄ = Σᵢ t̄ᵢ xᵢ`.
pub fn value_statistic(x: &Tensor, t_bar: &[f64]) -> Result<Vec<f64>> {
    let (n, d) = x.dims2()?;
    if t_bar.len() != n {
        return Err(Error::shape("value_statistic", &[t_bar.len()], &[n, d]));
    }
    let mut out = vec![0.0; d];
    for (i, w) in t_bar.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Batch statistics for one attention layer: the mean token over batch and
/// tokens, its second-moment trace, and the head-averaged value statistic.
pub fn attention_statistics(
    xs: &[Tensor],
    ts: &[Vec<Tensor>],
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    if xs.is_empty() || xs.len() != ts.len() {
        return Err(Error::Contract(
            "attention statistics need one score set per example".into(),
        ));
    }
    let d = xs[0].cols();
    let mut x_mean = vec![0.0; d];
    let mut trace = 0.0;
    let mut v_mean = vec![0.0; d];
    let mut rows = 0usize;
    let mut count = 0usize;
    for (x, heads) in xs.iter().zip(ts) {
        if x.cols() != d {
            return Err(Error::shape(
                "attention statistics",
                x.shape(),
                &[x.rows(), d],
            ));
        }
        for i in 0..x.rows() {
            for (m, v) in x_mean.iter_mut().zip(x.row(i)) {
                *m += v;
                trace += v * v;
            }
        }
        rows += x.rows();
        for t in heads {
            let vs = value_statistic(x, &mean_attention(t)?)?;
            for (m, v) in v_mean.iter_mut().zip(vs) {
                *m += v;
            }
            count += 1;
        }
    }
    x_mean.iter_mut().for_each(|v| *v /= rows as f64);
    v_mean.iter_mut().for_each(|v| *v /= count as f64);
    Ok((x_mean, trace / rows as f64, v_mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnCurvState {
    pub x_ema: VectorEma,
    pub v_ema: VectorEma,
    pub trace_ema: VectorEma,
    pub damping: Damping,
    pub rho: f64,
    pub qk_factor: Option<MacFactor>,
    pub v_factor: Option<MacFactor>,
}

impl AttnCurvState {
    pub fn new(d: usize, beta2: f64, damping: Damping) -> Self {
        AttnCurvState {
            x_ema: VectorEma::new(d, beta2),
            v_ema: VectorEma::new(d, beta2),
            trace_ema: VectorEma::new(1, beta2),
            damping,
            rho: match damping {
                Damping::Fixed(r) => r,
                Damping::Adaptive => 1.0,
            },
            qk_factor: None,
            v_factor: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.x_ema.tilde.len()
    }

    pub fn update_attn_ema(&mut self, xs: &[Tensor], ts: &[Vec<Tensor>]) -> Result<()> {
        let (x_mean, trace, v_mean) = attention_statistics(xs, ts)?;
        self.x_ema.update(&x_mean)?;
        self.v_ema.update(&v_mean)?;
        self.trace_ema.update(&[trace])
    }

    pub fn update_from_stats(&mut self, s: &AttentionStats) -> Result<()> {
        self.update_attn_ema(&s.x, &s.t)
    }

    pub fn rebuild(&mut self) -> Result<()> {
        let x_hat = self.x_ema.bias_correct()?;
        let v_hat = self.v_ema.bias_correct()?;
        if let Damping::Adaptive = self.damping {
            self.rho = adaptive_rho(self.trace_ema.bias_correct()?[0], &x_hat);
        }
        self.qk_factor = Some(build_mac_factor(&x_hat, self.rho)?);
        self.v_factor = Some(build_mac_factor(&v_hat, self.rho)?);
        Ok(())
    }

    pub fn precondition(&self, g_qkv: &Tensor) -> Result<Tensor> {
        let (Some(qk), Some(v)) = (&self.qk_factor, &self.v_factor) else {
            return Err(Error::State(
                "attention factors used before they were built".into(),
            ));
        };
        precondition_attn(g_qkv, qk, v)
    }

    pub fn state_bytes(&self) -> usize {
        let d = self.dim();
        8 * (2 * d + 1 + 2 * (d + 2) + 1)
    }
}

/// Right-multiplies the query and key row blocks of a fused `[3d, d]`
/// gradient by the mean-token factor and the value block by the value factor.
pub fn precondition_attn(g_qkv: &Tensor, qk: &MacFactor, v: &MacFactor) -> Result<Tensor> {
    let (r, d) = g_qkv.dims2()?;
    if r != 3 * d || qk.dim() != d || v.dim() != d {
        return Err(Error::shape(
            "precondition_attn",
            g_qkv.shape(),
            &[3 * qk.dim(), qk.dim()],
        ));
    }
    let top = precondition_mac(&row_block(g_qkv, 0, 2 * d), qk)?;
    let bottom = precondition_mac(&row_block(g_qkv, 2 * d, d), v)?;
    let mut data = top.into_data();
    data.extend_from_slice(bottom.data());
    Tensor::new(vec![r, d], data)
}

fn row_block(m: &Tensor, start: usize, rows: usize) -> Tensor {
    let c = m.cols();
    Tensor::new(
        vec![rows, c],
        m.data()[start * c..(start + rows) * c].to_vec(),
    )
    .expect("sized")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

/// `(Bᵀ ⊗ Aᵀ) vec(M)`, i.e. `vec(Aᵀ M B)` evaluated through the explicit
/// Kronecker matrix.
pub fn kron_vec(a: &Tensor, m: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let k = b.transpose()?.kron(&a.transpose()?)?;
    k.matvec(&m.vec_col_major()?)
}

/// Per-example vectorised gradient of one projection (input × output
/// layout, all heads side by side), assembled from the Kronecker identities.
pub fn projection_gradient(
    stats: &AttentionStats,
    example: usize,
    which: Projection,
) -> Result<Vec<f64>> {
    let x = &stats.x[example];
    let d = x.cols();
    let dk = d / stats.heads;
    let mut out = Vec::with_capacity(d * d);
    for h in 0..stats.heads {
        let g = match which {
            Projection::Query => {
                let k = column_block(&stats.k[example], h * dk, dk);
                kron_vec(x, &stats.delta_r[example][h], &k)?
            }
            Projection::Key => {
                let q = column_block(&stats.q[example], h * dk, dk);
                kron_vec(x, &stats.delta_r[example][h].transpose()?, &q)?
            }
            Projection::Value => {
                let dh = column_block(&stats.delta_h[example], h * dk, dk);
                kron_vec(x, &stats.t[example][h].transpose()?, &dh)?
            }
        };
        // column-major vec of the [d, dk] head block continues the [d, d] vec
        out.extend(g);
    }
    Ok(out)
}

/// `E[vec(∂L/∂W) vec(∂L/∂W)ᵀ]` over the captured examples. Only meant for
/// tiny layers: the result is `(d·d)²`.
pub fn empirical_fim_attention(stats: &AttentionStats, which: Projection) -> Result<Tensor> {
    let n_ex = stats.x.len();
    if n_ex == 0 {
        return Err(Error::Contract("no captured examples".into()));
    }
    let d = stats.x[0].cols();
    if d > 8 || stats.x[0].rows() > 6 {
        return Err(Error::Contract(format!(
            "explicit attention FIM limited to N ≤ 6, d ≤ 8 (got N={}, d={d})",
            stats.x[0].rows()
        )));
    }
    let p = d * d;
    let mut fim = Tensor::zeros(&[p, p]);
    for e in 0..n_ex {
        let g = projection_gradient(stats, e, which)?;
        fim.axpy(1.0 / n_ex as f64, &Tensor::outer(&g, &g))?;
    }
    Ok(fim)
}
