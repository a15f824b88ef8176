//! Structural diagnostics of the Kronecker factors: eigenspectra of `A`,
//! `P` and `A⊗P`, alignment of the top activation eigenvector with the mean
//! activation, the mean-dominance constant, and attention-score spectra.

use serde::{Deserialize, Serialize};

use crate::attn_curvature::mean_attention;
use crate::error::{Error, Result};
use crate::nn::{BlockGrad, BlockKind, BlockStats};
use crate::tensor::{dot, norm_sq, sym_eig, sym_eigvals, Tensor};

/// Top eigenvalues of two factors and of their Kronecker product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfSpectrum {
    pub a: Vec<f64>,
    pub p: Vec<f64>,
    pub kron: Vec<f64>,
}

/// The Kronecker eigenvalues are the pairwise products, so `A⊗P` is never
/// formed.
pub fn kf_spectrum(a: &Tensor, p: &Tensor, k: usize) -> Result<KfSpectrum> {
    let la = sym_eigvals(a)?;
    let lp = sym_eigvals(p)?;
    Ok(kron_top(&la, &lp, k))
}

fn kron_top(la: &[f64], lp: &[f64], k: usize) -> KfSpectrum {
    let mut kron: Vec<f64> = la
        .iter()
        .flat_map(|x| lp.iter().map(move |y| x * y))
        .collect();
    kron.sort_by(|x, y| y.total_cmp(x));
    kron.truncate(k);
    KfSpectrum {
        a: la.iter().take(k).copied().collect(),
        p: lp.iter().take(k).copied().collect(),
        kron,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `|cos|` between the top eigenvector of `A` and `ā`
    pub cos_align: f64,
    /// `‖A − āāᵀ‖_F`
    pub sigma_norm: f64,
    pub mean_norm_sq: f64,
    /// `2√2‖Σ_a‖_F / ‖ā‖²`
    pub dk_bound: f64,
}

pub fn alignment(a: &Tensor, a_bar: &[f64]) -> Result<Alignment> {
    let (n, _) = a.dims2()?;
    if a_bar.len() != n {
        return Err(Error::shape("alignment", a.shape(), &[a_bar.len()]));
    }
    let eig = sym_eig(a)?;
    alignment_with(a, &eig.vector(0), a_bar)
}

fn alignment_with(a: &Tensor, top: &[f64], a_bar: &[f64]) -> Result<Alignment> {
    let mean_norm_sq = norm_sq(a_bar);
    if mean_norm_sq == 0.0 {
        return Err(Error::Contract("zero-mean input".into()));
    }
    let sigma = a.sub(&Tensor::outer(a_bar, a_bar))?;
    let sigma_norm = sigma.frobenius_norm();
    let cos = dot(top, a_bar).abs() / (norm_sq(top).sqrt() * mean_norm_sq.sqrt());
    Ok(Alignment {
        cos_align: cos.min(1.0),
        sigma_norm,
        mean_norm_sq,
        dk_bound: 2.0 * std::f64::consts::SQRT_2 * sigma_norm / mean_norm_sq,
    })
}

/// How far the rows of `X` are from their mean, measured against the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanDominance {
    /// `‖E‖_F / (√m‖x̄‖)` with `E = X − 1x̄ᵀ`
    pub c: f64,
    /// smallest ε the sufficient condition certifies: `(1+c)² − 1`
    pub epsilon_implied: f64,
    /// `‖XᵀX − m x̄x̄ᵀ‖_F / ‖XᵀX‖_F`
    pub rel_err: f64,
    /// `‖XᵀX − m x̄x̄ᵀ‖_F`
    pub lhs: f64,
    /// `2√m‖x̄‖‖E‖_F + ‖E‖_F²`
    pub rhs: f64,
}

pub fn prop1_check(x: &Tensor) -> Result<MeanDominance> {
    let (m, _) = x.dims2()?;
    if m == 0 {
        return Err(Error::Contract("no rows".into()));
    }
    let mean = x.mean_axis(0)?.into_data();
    let mean_norm = norm_sq(&mean).sqrt();
    if mean_norm == 0.0 {
        return Err(Error::Contract("zero-mean input".into()));
    }
    let mut e_sq = 0.0;
    for i in 0..m {
        e_sq += x
            .row(i)
            .iter()
            .zip(&mean)
            .map(|(v, mu)| (v - mu).powi(2))
            .sum::<f64>();
    }
    let e_norm = e_sq.sqrt();
    let gram = x.matmul_tn(x)?;
    let lhs = gram
        .sub(&Tensor::outer(&mean, &mean).scale(m as f64))?
        .frobenius_norm();
    let root_m = (m as f64).sqrt();
    let rhs = 2.0 * root_m * mean_norm * e_norm + e_sq;
    let c = e_norm / (root_m * mean_norm);
    // the bound is exact algebra; slack only for rounding in the Gram matrix
    if lhs > rhs + 1e-10 * gram.frobenius_norm() {
        return Err(Error::NumericFailure {
            step: 0,
            what: format!("mean-dominance bound violated: {lhs} > {rhs}"),
        });
    }
    let gram_norm = gram.frobenius_norm();
    Ok(MeanDominance {
        c,
        epsilon_implied: (1.0 + c).powi(2) - 1.0,
        rel_err: if gram_norm > 0.0 {
            lhs / gram_norm
        } else {
            0.0
        },
        lhs,
        rhs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpectrum {
    /// top singular values of `T`
    pub singular: Vec<f64>,
    /// singular values above `1e-8·σ₁`
    pub rank: usize,
    /// `|cos|` between the top right singular vector and `t̄`
    pub cos_mean: f64,
}

pub fn attention_spectrum(t: &Tensor, k: usize) -> Result<AttentionSpectrum> {
    let t_bar = mean_attention(t)?;
    let eig = sym_eig(&t.matmul_tn(t)?)?;
    let singular: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    let top = singular[0];
    let rank = singular.iter().filter(|s| **s > 1e-8 * top).count();
    let v = eig.vector(0);
    let cos_mean = dot(&v, &t_bar).abs() / norm_sq(&t_bar).sqrt();
    Ok(AttentionSpectrum {
        singular: singular.into_iter().take(k).collect(),
        rank,
        cos_mean: cos_mean.min(1.0),
    })
}

/// Head- and example-averaged attention spectrum of one attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub singular: Vec<f64>,
    pub mean_rank: f64,
    pub cos_mean: f64,
    pub matrices: usize,
}

pub fn summarize_attention(ts: &[Vec<Tensor>], k: usize) -> Result<AttentionSummary> {
    let mut singular: Vec<f64> = Vec::new();
    let mut rank = 0.0;
    let mut cos = 0.0;
    let mut count = 0usize;
    for t in ts.iter().flatten() {
        let s = attention_spectrum(t, k)?;
        if singular.is_empty() {
            singular = vec![0.0; s.singular.len()];
        }
        for (acc, v) in singular.iter_mut().zip(&s.singular) {
            *acc += v;
        }
        rank += s.rank as f64;
        cos += s.cos_mean;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("no attention matrices".into()));
    }
    let c = count as f64;
    Ok(AttentionSummary {
        singular: singular.into_iter().map(|v| v / c).collect(),
        mean_rank: rank / c,
        cos_mean: cos / c,
        matrices: count,
    })
}

/// One JSON line per parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub epoch: Option<u64>,
    pub block: usize,
    pub layer: usize,
    pub kind: BlockKind,
    pub top_a: Vec<f64>,
    pub top_p: Vec<f64>,
    pub top_kron: Vec<f64>,
    pub cos_align: f64,
    pub sigma_norm: f64,
    pub mean_norm_sq: f64,
    pub dk_bound: f64,
    pub prop1_c: f64,
    pub attention: Option<AttentionSummary>,
}

/// Statistics are batch means over the captured rows, without bias
/// augmentation: `A = E[aaᵀ]`, `P = E[ppᵀ]`.
pub fn layer_report(block: usize, grad: &BlockGrad, k: usize) -> Result<SpectralReport> {
    let stats: &BlockStats = grad
        .stats
        .as_ref()
        .ok_or_else(|| Error::State("block gradient carries no statistics".into()))?;
    let rows = stats.a_in.rows() as f64;
    let a = stats.a_in.matmul_tn(&stats.a_in)?.scale(1.0 / rows);
    let p = stats
        .p_out
        .matmul_tn(&stats.p_out)?
        .scale(1.0 / stats.p_out.rows() as f64);
    let a_bar = stats.a_in.mean_axis(0)?.into_data();

    let eig_a = sym_eig(&a)?;
    let lp = sym_eigvals(&p)?;
    let spec = kron_top(&eig_a.eigenvalues, &lp, k);
    let align = alignment_with(&a, &eig_a.vector(0), &a_bar)?;
    // ‖E‖²/m is the trace of the centred covariance
    let trace_sigma = a.trace()? - align.mean_norm_sq;
    let prop1_c = trace_sigma.max(0.0).sqrt() / align.mean_norm_sq.sqrt();
    let attention = match (&stats.attention, grad.info.kind) {
        (Some(att), BlockKind::AttnQkv) => Some(summarize_attention(&att.t, k)?),
        _ => None,
    };
    Ok(SpectralReport {
        epoch: None,
        block,
        layer: grad.info.layer,
        kind: grad.info.kind,
        top_a: spec.a,
        top_p: spec.p,
        top_kron: spec.kron,
        cos_align: align.cos_align,
        sigma_norm: align.sigma_norm,
        mean_norm_sq: align.mean_norm_sq,
        dk_bound: align.dk_bound,
        prop1_c,
        attention,
    })
}
