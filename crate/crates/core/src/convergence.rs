//! Two-layer ReLU network trained with the mean-activation natural gradient,
//! the limiting Gram matrix, and an empirical check of the linear
//! contraction rate.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curvature::{build_mac_factor, precondition_mac};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm_sq, sym_eigvals, Tensor};

/// Rows closer than this to parallel (in |cos|) are rejected.
const PARALLEL_TOL: f64 = 1e-6;

/// `f(x) = (1/√m) Σ q_r relu(w_rᵀx)` with the output weights frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    /// `[m, d]`, row `r` is `w_r`
    pub w: Tensor,
    q: Vec<f64>,
}

impl TwoLayerNet {
    /// `w_r ~ N(0, I)`, `q_r ~ U(−1, 1)`.
    pub fn init(m: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..m * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let q = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TwoLayerNet {
            w: Tensor::new(vec![m, d], w).expect("sized"),
            q,
        }
    }

    pub fn width(&self) -> usize {
        self.w.rows()
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// `[n, m]` pre-activations `Xwᵣ`.
    fn pre(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.w.cols() {
            return Err(Error::shape(
                "two-layer net",
                x.shape(),
                &[x.rows(), self.w.cols()],
            ));
        }
        x.matmul_nt(&self.w)
    }

    pub fn outputs(&self, x: &Tensor) -> Result<Vec<f64>> {
        let z = self.pre(x)?;
        let s = 1.0 / (self.width() as f64).sqrt();
        Ok((0..x.rows())
            .map(|i| {
                s * z
                    .row(i)
                    .iter()
                    .zip(&self.q)
                    .map(|(z, q)| q * z.max(0.0))
                    .sum::<f64>()
            })
            .collect())
    }

    /// Gradient of `½‖u − y‖²` with respect to `W`, i.e. `Jᵀ(u − y)` in
    /// matrix form. The ReLU derivative at exactly 0 is taken as 0.
    pub fn gradient(&self, x: &Tensor, y: &[f64]) -> Result<Tensor> {
        let u = self.outputs(x)?;
        self.gradient_at(x, &u, y)
    }

    fn gradient_at(&self, x: &Tensor, u: &[f64], y: &[f64]) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if y.len() != n {
            return Err(Error::shape("targets", &[y.len()], &[n]));
        }
        let z = self.pre(x)?;
        let m = self.width();
        let s = 1.0 / (m as f64).sqrt();
        let mut g = Tensor::zeros(&[m, d]);
        for i in 0..n {
            let e = u[i] - y[i];
            if e == 0.0 {
                continue;
            }
            let xi = x.row(i);
            for r in 0..m {
                if z.at(i, r) > 0.0 {
                    let c = e * s * self.q[r];
                    for (gv, xv) in g.row_mut(r).iter_mut().zip(xi) {
                        *gv += c * xv;
                    }
                }
            }
        }
        Ok(g)
    }

    /// `Σ(θ)_ij = (1/m) Σ_r x_iᵀx_j 𝟙(w_rᵀx_i ≥ 0, w_rᵀx_j ≥ 0)`.
    pub fn gram(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.pre(x)?;
        let n = x.rows();
        let m = self.width();
        let mut counts = vec![0u32; n * n];
        let mut active = Vec::with_capacity(n);
        for r in 0..m {
            active.clear();
            active.extend((0..n).filter(|&i| z.at(i, r) >= 0.0));
            for &i in &active {
                for &j in &active {
                    counts[i * n + j] += 1;
                }
            }
        }
        let xx = x.matmul_nt(x)?;
        Tensor::new(
            vec![n, n],
            counts
                .iter()
                .zip(xx.data())
                .map(|(c, v)| v * *c as f64 / m as f64)
                .collect(),
        )
    }

    /// `‖J(θ) − J(θ₀)‖₂` through the `n×n` matrix `ΔJ ΔJᵀ`.
    pub fn jacobian_drift(&self, w0: &Tensor, x: &Tensor) -> Result<f64> {
        let z = self.pre(x)?;
        let z0 = x.matmul_nt(w0)?;
        let n = x.rows();
        let m = self.width();
        let mut acc = Tensor::zeros(&[n, n]);
        let mut delta = vec![0.0; n];
        for r in 0..m {
            let mut any = false;
            for (i, dv) in delta.iter_mut().enumerate() {
                let a = (z.at(i, r) > 0.0) as i32 as f64;
                let b = (z0.at(i, r) > 0.0) as i32 as f64;
                *dv = a - b;
                any |= a != b;
            }
            if !any {
                continue;
            }
            let q2 = self.q[r] * self.q[r];
            for i in 0..n {
                if delta[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    if delta[j] != 0.0 {
                        let v = acc.at(i, j) + q2 * delta[i] * delta[j];
                        acc.set(i, j, v);
                    }
                }
            }
        }
        let xx = x.matmul_nt(x)?;
        let dd = acc.mul(&xx)?.scale(1.0 / m as f64);
        Ok(sym_eigvals(&dd)?[0].max(0.0).sqrt())
    }
}

/// Unit-norm rows, no two parallel, targets in `[−1, 1]`.
pub fn make_dataset(n: usize, d: usize, seed: u64) -> Result<(Tensor, Vec<f64>)> {
    if d < 2 && n > 1 {
        return Err(Error::Config("non-parallel rows need d ≥ 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while rows.len() < n {
        attempts += 1;
        if attempts > 1000 * n.max(1) {
            return Err(Error::Config(format!(
                "could not draw {n} non-parallel unit rows in {d} dimensions"
            )));
        }
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = norm_sq(&v).sqrt();
        if norm < 1e-12 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        if rows.iter().all(|r| dot(r, &v).abs() < 1.0 - PARALLEL_TOL) {
            rows.push(v);
        }
    }
    let y = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok((Tensor::from_rows(&rows)?, y))
}

/// Rejects inputs that break the unit-norm / non-parallel assumption.
pub fn check_inputs(x: &Tensor) -> Result<()> {
    let (n, _) = x.dims2()?;
    for i in 0..n {
        let norm = norm_sq(x.row(i)).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "row {i} has norm {norm}, expected 1"
            )));
        }
        for j in 0..i {
            if dot(x.row(i), x.row(j)).abs() >= 1.0 - PARALLEL_TOL {
                return Err(Error::Contract(format!("rows {j} and {i} are parallel")));
            }
        }
    }
    Ok(())
}

/// Monte-Carlo estimate of the limiting Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMc {
    pub mean: Tensor,
    /// entrywise standard error
    pub se: Tensor,
    pub samples: usize,
    /// `λ_min` of `mean`
    pub lambda_min: f64,
    /// standard error of `λ_min` from batch means
    pub lambda_min_se: f64,
}

impl GramMc {
    /// Conservative `λ_Γ`: the estimate minus two standard errors.
    pub fn lambda_gamma(&self) -> f64 {
        self.lambda_min - 2.0 * self.lambda_min_se
    }
}

const GRAM_BATCHES: usize = 20;

pub fn gram_sigma_inf(x: &Tensor, samples: usize, seed: u64) -> Result<GramMc> {
    let (n, d) = x.dims2()?;
    if samples < 1000 {
        log::warn!("{samples} Monte-Carlo samples for the Gram matrix; expect noisy estimates");
    }
    if samples < 2 * GRAM_BATCHES {
        return Err(Error::Config(format!(
            "need at least {} Monte-Carlo samples",
            2 * GRAM_BATCHES
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = vec![vec![0u32; n * n]; GRAM_BATCHES];
    let mut w = vec![0.0; d];
    let mut active = Vec::with_capacity(n);
    for s in 0..samples {
        w.iter_mut()
            .for_each(|v| *v = StandardNormal.sample(&mut rng));
        active.clear();
        active.extend((0..n).filter(|&i| dot(x.row(i), &w) >= 0.0));
        let counts = &mut batches[s * GRAM_BATCHES / samples];
        for &i in &active {
            for &j in &active {
                counts[i * n + j] += 1;
            }
        }
    }
    let xx = x.matmul_nt(x)?;
    let total: Vec<u32> = (0..n * n)
        .map(|k| batches.iter().map(|b| b[k]).sum())
        .collect();
    let sf = samples as f64;
    let mean = Tensor::new(
        vec![n, n],
        total
            .iter()
            .zip(xx.data())
            .map(|(c, v)| v * *c as f64 / sf)
            .collect(),
    )?;
    let se = Tensor::new(
        vec![n, n],
        total
            .iter()
            .zip(xx.data())
            .map(|(c, v)| {
                let p = *c as f64 / sf;
                v.abs() * (p * (1.0 - p) / (sf - 1.0)).sqrt()
            })
            .collect(),
    )?;
    let lambda_min = *sym_eigvals(&mean)?.last().unwrap_or(&0.0);
    let mut per_batch = Vec::with_capacity(GRAM_BATCHES);
    for (b, counts) in batches.iter().enumerate() {
        let size = (b + 1) * samples / GRAM_BATCHES - b * samples / GRAM_BATCHES;
        let est = Tensor::new(
            vec![n, n],
            counts
                .iter()
                .zip(xx.data())
                .map(|(c, v)| v * *c as f64 / size as f64)
                .collect(),
        )?;
        per_batch.push(*sym_eigvals(&est)?.last().unwrap_or(&0.0));
    }
    let mu = per_batch.iter().sum::<f64>() / GRAM_BATCHES as f64;
    let var = per_batch.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (GRAM_BATCHES - 1) as f64;
    Ok(GramMc {
        mean,
        se,
        samples,
        lambda_min,
        lambda_min_se: (var / GRAM_BATCHES as f64).sqrt(),
    })
}

/// Arc-cosine closed form `x_iᵀx_j (π − θ_ij) / (2π)`.
pub fn gram_closed_form(x: &Tensor) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let ip = dot(x.row(i), x.row(j));
            let norms = (norm_sq(x.row(i)) * norm_sq(x.row(j))).sqrt();
            let theta = if norms > 0.0 {
                (ip / norms).clamp(-1.0, 1.0).acos()
            } else {
                0.0
            };
            out.set(i, j, ip * (PI - theta) / (2.0 * PI));
        }
    }
    Ok(out)
}

/// `W ← W − η G (x̄x̄ᵀ + ρI)⁻¹`, the inverse applied as `(1/ρ)(I − x̄x̄ᵀ/(ρ+‖x̄‖²))`.
pub fn mac_ngd_step(
    net: &mut TwoLayerNet,
    x: &Tensor,
    y: &[f64],
    eta: f64,
    rho: f64,
) -> Result<()> {
    let g = net.gradient(x, y)?;
    mac_ngd_apply(net, x, &g, eta, rho)
}

fn mac_ngd_apply(net: &mut TwoLayerNet, x: &Tensor, g: &Tensor, eta: f64, rho: f64) -> Result<()> {
    let x_bar = x.mean_axis(0)?.into_data();
    let factor = build_mac_factor(&x_bar, rho)?;
    let step = precondition_mac(g, &factor)?;
    net.w.axpy(-eta / rho, &step)
}

/// Per-iteration record of a MAC-NGD run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    /// `‖y − u(θ_k)‖²` for `k = 0..=iters`
    pub residual: Vec<f64>,
    /// `‖J(θ_k) − J(θ₀)‖₂`
    pub jacobian_drift: Vec<f64>,
    /// `‖θ_k − θ₀‖`
    pub weight_drift: Vec<f64>,
}

pub fn run_mac_ngd(
    net: &mut TwoLayerNet,
    x: &Tensor,
    y: &[f64],
    eta: f64,
    rho: f64,
    iters: usize,
) -> Result<ConvergenceTrace> {
    let w0 = net.w.clone();
    let mut trace = ConvergenceTrace {
        residual: Vec::with_capacity(iters + 1),
        jacobian_drift: Vec::with_capacity(iters + 1),
        weight_drift: Vec::with_capacity(iters + 1),
    };
    for k in 0..=iters {
        let u = net.outputs(x)?;
        let r: f64 = u.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
        if !r.is_finite() {
            return Err(Error::NumericFailure {
                step: k as u64,
                what: "residual is not finite".into(),
            });
        }
        trace.residual.push(r);
        trace.jacobian_drift.push(net.jacobian_drift(&w0, x)?);
        trace.weight_drift.push(net.w.sub(&w0)?.frobenius_norm());
        if k < iters {
            let g = net.gradient_at(x, &u, y)?;
            mac_ngd_apply(net, x, &g, eta, rho)?;
        }
    }
    Ok(trace)
}

/// Spectral quantities of the data that enter the contraction rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorCompare {
    pub mean_norm_sq: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
}

impl FactorCompare {
    pub fn ratio(&self) -> f64 {
        self.mean_norm_sq / self.lambda_max
    }
}

/// `(‖x̄‖², λ_max(XᵀX), λ_min(XᵀX))`. Since `x̄ = Xᵀ1/n`, `‖x̄‖² ≤ λ_max/n`
/// always; a violation means the eigensolver or the data is broken.
pub fn convergence_factor_compare(x: &Tensor) -> Result<FactorCompare> {
    let (n, _) = x.dims2()?;
    if n == 0 {
        return Err(Error::Contract("no rows".into()));
    }
    let x_bar = x.mean_axis(0)?.into_data();
    let mean_norm_sq = norm_sq(&x_bar);
    let vals = sym_eigvals(&x.matmul_tn(x)?)?;
    let (lambda_max, lambda_min) = (vals[0], *vals.last().expect("non-empty"));
    if mean_norm_sq > lambda_max * (1.0 + 1e-12) + 1e-300 {
        return Err(Error::NumericFailure {
            step: 0,
            what: format!("‖x̄‖² = {mean_norm_sq} exceeds λ_max(XᵀX) = {lambda_max}"),
        });
    }
    Ok(FactorCompare {
        mean_norm_sq,
        lambda_max,
        lambda_min,
    })
}

/// `‖x̄‖²` against a power-iteration lower bound on `λ_max(XᵀX)`, cheap
/// enough for wide inputs. `λ_min` is not computed and reported as 0.
/// Starting from `x̄`, the Rayleigh quotient is already `≥ n‖x̄‖²` and never
/// decreases, so the check is exact even though `λ_max` is only bounded.
pub fn mean_vs_top(x: &Tensor) -> Result<FactorCompare> {
    let (n, d) = x.dims2()?;
    if n == 0 {
        return Err(Error::Contract("no rows".into()));
    }
    let x_bar = x.mean_axis(0)?.into_data();
    let mean_norm_sq = norm_sq(&x_bar);
    let mut v = if mean_norm_sq > 0.0 {
        x_bar.clone()
    } else {
        vec![1.0; d]
    };
    let mut lambda = 0.0;
    for _ in 0..30 {
        let norm = norm_sq(&v).sqrt();
        if norm == 0.0 {
            break;
        }
        v.iter_mut().for_each(|e| *e /= norm);
        let xv = x.matvec(&v)?;
        lambda = norm_sq(&xv);
        v = vec![0.0; d];
        for (i, w) in xv.iter().enumerate() {
            v.iter_mut().zip(x.row(i)).for_each(|(o, e)| *o += w * e);
        }
    }
    if mean_norm_sq > lambda * (1.0 + 1e-12) + 1e-300 {
        return Err(Error::NumericFailure {
            step: 0,
            what: format!("‖x̄‖² = {mean_norm_sq} exceeds λ_max(XᵀX) ≥ {lambda}"),
        });
    }
    Ok(FactorCompare {
        mean_norm_sq,
        lambda_max: lambda,
        lambda_min: 0.0,
    })
}

/// Outcome of checking a trace against the contraction theorem. Violations
/// are reported, never asserted: the statement only holds with high
/// probability and for wide enough networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    /// `1 − ηλ_Γλ_min(XᵀX) / (2(‖x̄‖² + ρ))`
    pub factor: f64,
    pub ratio_ok_fraction: f64,
    pub monotone_fraction: f64,
    /// `√λ_max(XᵀX)‖y − u₀‖ / λ_Γ`
    pub drift_bound: f64,
    pub drift_ok: bool,
    pub max_jacobian_drift: f64,
    /// smallest `C` with `‖J − J₀‖₂ ≤ Cρ/(2σ_max(X))` over the run
    pub jacobian_c: f64,
    pub violations: Vec<String>,
}

pub fn verify_theorem1(
    trace: &ConvergenceTrace,
    lambda_gamma: f64,
    x: &Tensor,
    eta: f64,
    rho: f64,
) -> Result<TheoremReport> {
    let fc = convergence_factor_compare(x)?;
    let factor = 1.0 - eta * lambda_gamma * fc.lambda_min / (2.0 * (fc.mean_norm_sq + rho));
    let steps = trace.residual.len().saturating_sub(1);
    let mut ratio_ok = 0usize;
    let mut monotone = 0usize;
    for w in trace.residual.windows(2) {
        let (r0, r1) = (w[0], w[1]);
        // an exact zero residual satisfies every bound
        if r0 == 0.0 || r1 <= factor * r0 {
            ratio_ok += 1;
        }
        if r1 <= r0 {
            monotone += 1;
        }
    }
    let frac = |c: usize| {
        if steps == 0 {
            1.0
        } else {
            c as f64 / steps as f64
        }
    };
    let r0 = trace.residual.first().copied().unwrap_or(0.0);
    let drift_bound = fc.lambda_max.sqrt() * r0.sqrt() / lambda_gamma;
    let drift_ok = lambda_gamma > 0.0 && trace.weight_drift.iter().all(|d| *d <= drift_bound);
    let max_jacobian_drift = trace.jacobian_drift.iter().copied().fold(0.0, f64::max);
    let sigma_max = fc.lambda_max.sqrt();
    let jacobian_c = 2.0 * sigma_max * max_jacobian_drift / rho;

    let mut violations = Vec::new();
    if lambda_gamma <= 0.0 {
        violations.push(format!(
            "Gram estimate not positive definite (λ_Γ = {lambda_gamma:.3e})"
        ));
    }
    if frac(ratio_ok) < 1.0 {
        violations.push(format!(
            "contraction bound failed on {} of {steps} steps",
            steps - ratio_ok
        ));
    }
    if frac(monotone) < 1.0 {
        violations.push(format!(
            "residual increased on {} of {steps} steps",
            steps - monotone
        ));
    }
    if !drift_ok {
        violations.push(format!("weight drift exceeded {drift_bound:.3e}"));
    }
    if jacobian_c >= 0.5 {
        violations.push(format!(
            "stable-Jacobian condition needs C = {jacobian_c:.3} ≥ 1/2"
        ));
    }
    Ok(TheoremReport {
        factor,
        ratio_ok_fraction: frac(ratio_ok),
        monotone_fraction: frac(monotone),
        drift_bound,
        drift_ok,
        max_jacobian_drift,
        jacobian_c,
        violations,
    })
}

/// Harness settings; `eta` overrides `eta_mult·ρ/(λ_max λ_Γ)` when set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub rho: f64,
    pub eta_mult: f64,
    pub eta: Option<f64>,
    pub iters: usize,
    pub seeds: u64,
    pub mc_samples: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            m: 4096,
            n: 32,
            d: 10,
            rho: 0.5,
            eta_mult: 0.1,
            eta: None,
            iters: 200,
            seeds: 5,
            mc_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub eta: f64,
    pub lambda_gamma: f64,
    pub factors: FactorCompare,
    /// `‖Σ(0) − Σ∞‖₂` against the Monte-Carlo estimate
    pub init_gram_gap: f64,
    pub report: TheoremReport,
    pub trace: ConvergenceTrace,
}

pub fn run_seed(cfg: &HarnessConfig, seed: u64) -> Result<SeedRun> {
    let (x, y) = make_dataset(cfg.n, cfg.d, seed)?;
    let gram = gram_sigma_inf(&x, cfg.mc_samples, seed ^ 0x5eed)?;
    let lambda_gamma = gram.lambda_gamma();
    let factors = convergence_factor_compare(&x)?;
    let eta = match cfg.eta {
        Some(e) => e,
        None if lambda_gamma > 0.0 => cfg.eta_mult * cfg.rho / (factors.lambda_max * lambda_gamma),
        None => {
            return Err(Error::NumericFailure {
                step: 0,
                what: format!(
                    "λ_Γ estimate {lambda_gamma:.3e} is not positive; set eta explicitly"
                ),
            })
        }
    };
    let mut net = TwoLayerNet::init(cfg.m, cfg.d, seed.wrapping_add(1));
    let sigma_0 = net.gram(&x)?;
    let diff = sigma_0.sub(&gram.mean)?;
    let init_gram_gap = sym_eigvals(&diff)?
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let trace = run_mac_ngd(&mut net, &x, &y, eta, cfg.rho, cfg.iters)?;
    let report = verify_theorem1(&trace, lambda_gamma, &x, eta, cfg.rho)?;
    Ok(SeedRun {
        seed,
        eta,
        lambda_gamma,
        factors,
        init_gram_gap,
        report,
        trace,
    })
}
