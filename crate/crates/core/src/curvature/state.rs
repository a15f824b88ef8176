use serde::{Deserialize, Serialize};

use super::factors::{
    adaptive_rho, build_mac_factor, precondition_eva, precondition_mac, precondition_smac,
    MacFactor,
};
use crate::error::{Error, Result};
use crate::tensor::{dense_inverse, Tensor};

/// Exponential moving average with a step counter for bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorEma {
    pub tilde: Vec<f64>,
    pub k_tau: u64,
    pub beta2: f64,
}

impl VectorEma {
    pub fn new(dim: usize, beta2: f64) -> Self {
        VectorEma {
            tilde: vec![0.0; dim],
            k_tau: 0,
            beta2,
        }
    }

    pub fn update(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.tilde.len() {
            return Err(Error::shape("ema update", &[x.len()], &[self.tilde.len()]));
        }
        let b = self.beta2;
        for (t, v) in self.tilde.iter_mut().zip(x) {
            *t = b * *t + (1.0 - b) * v;
        }
        self.k_tau += 1;
        Ok(())
    }

    /// `x̃ / (1 − β₂^{k_τ})`
    pub fn bias_correct(&self) -> Result<Vec<f64>> {
        if self.k_tau == 0 {
            return Err(Error::State("bias correction before any EMA update".into()));
        }
        let c = 1.0 - self.beta2.powi(self.k_tau.min(i32::MAX as u64) as i32);
        Ok(self.tilde.iter().map(|v| v / c).collect())
    }
}

/// How the damping term is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DampingRepr", into = "DampingRepr")]
pub enum Damping {
    Fixed(f64),
    /// match the trace of the true activation covariance
    Adaptive,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DampingRepr {
    Value(f64),
    Word(String),
}

impl TryFrom<DampingRepr> for Damping {
    type Error = String;

    fn try_from(r: DampingRepr) -> std::result::Result<Self, String> {
        match r {
            DampingRepr::Value(v) if v > 0.0 && v.is_finite() => Ok(Damping::Fixed(v)),
            DampingRepr::Value(v) => Err(format!("damping must be positive, got {v}")),
            DampingRepr::Word(w) if w == "adaptive" => Ok(Damping::Adaptive),
            DampingRepr::Word(w) => Err(format!(
                "damping must be a number or \"adaptive\", got {w:?}"
            )),
        }
    }
}

impl From<Damping> for DampingRepr {
    fn from(d: Damping) -> Self {
        match d {
            Damping::Fixed(v) => DampingRepr::Value(v),
            Damping::Adaptive => DampingRepr::Word("adaptive".into()),
        }
    }
}

impl Damping {
    fn initial(self) -> f64 {
        match self {
            Damping::Fixed(v) => v,
            Damping::Adaptive => 1.0,
        }
    }
}

/// Mean of the rows of `a`, with a trailing 1 when `bias` is set, and
/// `tr E[aaᵀ]` of the same augmented rows.
pub fn activation_moments(a: &Tensor, bias: bool) -> Result<(Vec<f64>, f64)> {
    let (r, c) = a.dims2()?;
    if r == 0 {
        return Err(Error::Contract("no activation rows".into()));
    }
    let mut mean = a.mean_axis(0)?.into_data();
    let mut trace = a.data().iter().map(|v| v * v).sum::<f64>() / r as f64;
    if bias {
        mean.push(1.0);
        trace += 1.0;
    }
    debug_assert_eq!(mean.len(), c + bias as usize);
    Ok((mean, trace))
}

/// `E[aaᵀ]` over the rows of `a`, augmented like [`activation_moments`].
pub fn activation_second_moment(a: &Tensor, bias: bool) -> Result<Tensor> {
    let r = a.rows() as f64;
    let aug = if bias { augment_ones(a)? } else { a.clone() };
    Ok(aug.matmul_tn(&aug)?.scale(1.0 / r))
}

/// `E[p²]` per output coordinate.
pub fn gradient_sq_mean(p: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = p.dims2()?;
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(p.row(i)) {
            *o += v * v;
        }
    }
    Ok(out.into_iter().map(|v| v / r as f64).collect())
}

pub fn augment_ones(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let mut data = Vec::with_capacity(r * (c + 1));
    for i in 0..r {
        data.extend_from_slice(a.row(i));
        data.push(1.0);
    }
    Tensor::new(vec![r, c + 1], data)
}

/// MAC curvature for one layer: EMA of the mean activation and its
/// rank-one damped inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacState {
    pub a_ema: VectorEma,
    pub trace_ema: VectorEma,
    pub damping: Damping,
    pub rho: f64,
    pub factor: Option<MacFactor>,
    /// replaces the running mean when the full-data input mean is known
    pub fixed_mean: Option<Vec<f64>>,
}

impl MacState {
    pub fn new(dim: usize, beta2: f64, damping: Damping) -> Self {
        MacState {
            a_ema: VectorEma::new(dim, beta2),
            trace_ema: VectorEma::new(1, beta2),
            damping,
            rho: damping.initial(),
            factor: None,
            fixed_mean: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.a_ema.tilde.len()
    }

    pub fn k_tau(&self) -> u64 {
        self.a_ema.k_tau
    }

    pub fn update_activation_ema(&mut self, a_bar: &[f64], second_moment_trace: f64) -> Result<()> {
        self.a_ema.update(a_bar)?;
        self.trace_ema.update(&[second_moment_trace])
    }

    pub fn bias_correct(&self) -> Result<Vec<f64>> {
        match &self.fixed_mean {
            Some(m) => Ok(m.clone()),
            None => self.a_ema.bias_correct(),
        }
    }

    /// Recompute `â`, the damping (when adaptive) and the factor.
    pub fn rebuild(&mut self) -> Result<()> {
        let a_hat = self.bias_correct()?;
        if let Damping::Adaptive = self.damping {
            self.rho = adaptive_rho(self.trace_ema.bias_correct()?[0], &a_hat);
        }
        self.factor = Some(build_mac_factor(&a_hat, self.rho)?);
        Ok(())
    }

    pub fn factor(&self) -> Result<&MacFactor> {
        self.factor
            .as_ref()
            .ok_or_else(|| Error::State("MAC factor used before it was built".into()))
    }

    pub fn precondition(&self, g: &Tensor) -> Result<Tensor> {
        precondition_mac(g, self.factor()?)
    }

    pub fn state_bytes(&self) -> usize {
        let floats = self.a_ema.tilde.len()
            + self.trace_ema.tilde.len()
            + self.factor.as_ref().map_or(0, |f| f.a_hat.len() + 2)
            + self.fixed_mean.as_ref().map_or(0, |m| m.len())
            + 2;
        floats * 8
    }
}

/// Diagonal second moment of pre-activation gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGradState {
    pub p_ema: VectorEma,
    pub p_hat: Option<Vec<f64>>,
    /// forces `p̂` regardless of observed statistics
    pub p_override: Option<Vec<f64>>,
}

impl DiagGradState {
    pub fn new(dim: usize, beta2: f64) -> Self {
        DiagGradState {
            p_ema: VectorEma::new(dim, beta2),
            p_hat: None,
            p_override: None,
        }
    }

    pub fn update(&mut self, p: &Tensor) -> Result<()> {
        self.p_ema.update(&gradient_sq_mean(p)?)
    }

    pub fn rebuild(&mut self) -> Result<()> {
        self.p_hat = Some(self.p_ema.bias_correct()?);
        Ok(())
    }

    pub fn p_hat(&self) -> Result<&[f64]> {
        if let Some(p) = &self.p_override {
            return Ok(p);
        }
        self.p_hat
            .as_deref()
            .ok_or_else(|| Error::State("gradient factor used before it was built".into()))
    }

    pub fn state_bytes(&self) -> usize {
        8 * (self.p_ema.tilde.len() + self.p_hat.as_ref().map_or(0, |p| p.len()) + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmacState {
    pub mac: MacState,
    pub p: DiagGradState,
}

impl SmacState {
    pub fn new(d_in: usize, d_out: usize, beta2: f64, damping: Damping) -> Self {
        SmacState {
            mac: MacState::new(d_in, beta2, damping),
            p: DiagGradState::new(d_out, beta2),
        }
    }

    pub fn precondition(&self, g: &Tensor) -> Result<Tensor> {
        let f = self.mac.factor()?;
        precondition_smac(g, f, self.p.p_hat()?, f.rho)
    }

    pub fn state_bytes(&self) -> usize {
        self.mac.state_bytes() + self.p.state_bytes()
    }
}

/// Dense Kronecker factors `A = E[aaᵀ]`, `P = E[ppᵀ]` with cached damped inverses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfacState {
    pub d_in: usize,
    pub d_out: usize,
    pub a_ema: VectorEma,
    pub p_ema: VectorEma,
    pub rho: f64,
    pub a_inv: Option<Vec<f64>>,
    pub p_inv: Option<Vec<f64>>,
}

impl KfacState {
    pub fn new(d_in: usize, d_out: usize, beta2: f64, rho: f64) -> Self {
        KfacState {
            d_in,
            d_out,
            a_ema: VectorEma::new(d_in * d_in, beta2),
            p_ema: VectorEma::new(d_out * d_out, beta2),
            rho,
            a_inv: None,
            p_inv: None,
        }
    }

    pub fn update(&mut self, a_second: &Tensor, p_second: &Tensor) -> Result<()> {
        self.a_ema.update(a_second.data())?;
        self.p_ema.update(p_second.data())
    }

    pub fn a(&self) -> Result<Tensor> {
        Tensor::new(vec![self.d_in, self.d_in], self.a_ema.bias_correct()?)
    }

    pub fn p(&self) -> Result<Tensor> {
        Tensor::new(vec![self.d_out, self.d_out], self.p_ema.bias_correct()?)
    }

    pub fn rebuild(&mut self) -> Result<()> {
        let ai = dense_inverse(&self.a()?.add(&Tensor::eye(self.d_in).scale(self.rho))?)?;
        let pi = dense_inverse(&self.p()?.add(&Tensor::eye(self.d_out).scale(self.rho))?)?;
        self.a_inv = Some(ai.into_data());
        self.p_inv = Some(pi.into_data());
        Ok(())
    }

    pub fn precondition(&self, g: &Tensor) -> Result<Tensor> {
        let (Some(ai), Some(pi)) = (&self.a_inv, &self.p_inv) else {
            return Err(Error::State(
                "KFAC inverses used before they were built".into(),
            ));
        };
        let ai = Tensor::new(vec![self.d_in, self.d_in], ai.clone())?;
        let pi = Tensor::new(vec![self.d_out, self.d_out], pi.clone())?;
        pi.matmul(g)?.matmul(&ai)
    }

    pub fn state_bytes(&self) -> usize {
        let sq = self.d_in * self.d_in + self.d_out * self.d_out;
        8 * (2 * sq + 2)
    }
}

/// Dense activation factor only; gradients pass through unscaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoofState {
    pub d_in: usize,
    pub a_ema: VectorEma,
    pub rho: f64,
    pub a_inv: Option<Vec<f64>>,
}

impl FoofState {
    pub fn new(d_in: usize, beta2: f64, rho: f64) -> Self {
        FoofState {
            d_in,
            a_ema: VectorEma::new(d_in * d_in, beta2),
            rho,
            a_inv: None,
        }
    }

    pub fn rebuild(&mut self) -> Result<()> {
        let a = Tensor::new(vec![self.d_in, self.d_in], self.a_ema.bias_correct()?)?;
        let ai = dense_inverse(&a.add(&Tensor::eye(self.d_in).scale(self.rho))?)?;
        self.a_inv = Some(ai.into_data());
        Ok(())
    }

    pub fn precondition(&self, g: &Tensor) -> Result<Tensor> {
        let ai = self
            .a_inv
            .as_ref()
            .ok_or_else(|| Error::State("FOOF inverse used before it was built".into()))?;
        g.matmul(&Tensor::new(vec![self.d_in, self.d_in], ai.clone())?)
    }

    pub fn state_bytes(&self) -> usize {
        8 * (2 * self.d_in * self.d_in + 1)
    }
}

/// Rank-one factors on both sides, from running means of `a` and `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaState {
    pub a_ema: VectorEma,
    pub p_ema: VectorEma,
    pub rho: f64,
    pub a_hat: Option<Vec<f64>>,
    pub p_hat: Option<Vec<f64>>,
}

impl EvaState {
    pub fn new(d_in: usize, d_out: usize, beta2: f64, rho: f64) -> Self {
        EvaState {
            a_ema: VectorEma::new(d_in, beta2),
            p_ema: VectorEma::new(d_out, beta2),
            rho,
            a_hat: None,
            p_hat: None,
        }
    }

    pub fn rebuild(&mut self) -> Result<()> {
        self.a_hat = Some(self.a_ema.bias_correct()?);
        self.p_hat = Some(self.p_ema.bias_correct()?);
        Ok(())
    }

    pub fn precondition(&self, g: &Tensor) -> Result<Tensor> {
        let (Some(a), Some(p)) = (&self.a_hat, &self.p_hat) else {
            return Err(Error::State(
                "Eva factors used before they were built".into(),
            ));
        };
        precondition_eva(g, a, p, self.rho)
    }

    pub fn state_bytes(&self) -> usize {
        8 * (2 * self.a_ema.tilde.len() + 2 * self.p_ema.tilde.len() + 1)
    }
}
