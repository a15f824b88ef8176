use std::fmt;

use serde::{Deserialize, Serialize};

use super::factors::apply_update;
use super::state::{
    activation_moments, activation_second_moment, Damping, DiagGradState, EvaState, FoofState,
    KfacState, MacState, SmacState,
};
use crate::attn_curvature::AttnCurvState;
use crate::error::{Error, Result};
use crate::nn::{BlockGrad, BlockInfo, BlockKind, BlockStats, Gradients, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "mac")]
    Mac,
    #[serde(rename = "smac")]
    Smac,
    #[serde(rename = "kfac")]
    Kfac,
    #[serde(rename = "foof")]
    Foof,
    #[serde(rename = "eva")]
    Eva,
    #[serde(rename = "adamw-baseline")]
    AdamW,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 7] = [
        OptimizerKind::Sgd,
        OptimizerKind::Mac,
        OptimizerKind::Smac,
        OptimizerKind::Kfac,
        OptimizerKind::Foof,
        OptimizerKind::Eva,
        OptimizerKind::AdamW,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Mac => "mac",
            OptimizerKind::Smac => "smac",
            OptimizerKind::Kfac => "kfac",
            OptimizerKind::Foof => "foof",
            OptimizerKind::Eva => "eva",
            OptimizerKind::AdamW => "adamw-baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown optimizer {s:?}")))
    }

    pub fn uses_curvature(self) -> bool {
        !matches!(self, OptimizerKind::Sgd | OptimizerKind::AdamW)
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fully resolved optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decoupled_wd: bool,
    pub ema_beta2: f64,
    pub damping: Damping,
    pub tau_cov: u64,
    pub tau_inv: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// use a supplied full-data input mean for the first layer
    pub precomputed_first_layer: bool,
}

impl OptimizerConfig {
    /// Default hyperparameters per optimizer (CIFAR-style table).
    pub fn profile(kind: OptimizerKind) -> Self {
        let base = OptimizerConfig {
            optimizer: kind,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            decoupled_wd: false,
            ema_beta2: 0.95,
            damping: Damping::Fixed(1.0),
            tau_cov: 5,
            tau_inv: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            precomputed_first_layer: false,
        };
        match kind {
            OptimizerKind::Kfac | OptimizerKind::Eva => OptimizerConfig {
                damping: Damping::Fixed(0.03),
                ..base
            },
            OptimizerKind::AdamW => OptimizerConfig {
                lr: 1e-3,
                momentum: 0.0,
                weight_decay: 0.5,
                decoupled_wd: true,
                ..base
            },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("optimizer.{field}: {why}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_beta2) {
            return bad("ema_beta2", "must lie in [0, 1)");
        }
        if self.tau_cov == 0 || self.tau_inv == 0 {
            return bad("tau_cov/tau_inv", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta1/adam_beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if self.damping == Damping::Adaptive
            && !matches!(self.optimizer, OptimizerKind::Mac | OptimizerKind::Smac)
        {
            return bad("damping", "\"adaptive\" is only defined for mac and smac");
        }
        Ok(())
    }

    fn fixed_rho(&self) -> f64 {
        match self.damping {
            Damping::Fixed(r) => r,
            Damping::Adaptive => 1.0,
        }
    }
}

/// Per-block preconditioner state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preconditioner {
    Identity,
    Mac(MacState),
    Smac(SmacState),
    Kfac(KfacState),
    Foof(FoofState),
    Eva(EvaState),
    Attention {
        state: AttnCurvState,
        /// diagonal gradient factor when running SMAC
        p: Option<DiagGradState>,
    },
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockState {
    pub layer: usize,
    pub kind: BlockKind,
    pub out: usize,
    pub inp: usize,
    pub bias: bool,
    pub velocity: Vec<f64>,
    pub precond: Preconditioner,
}

impl BlockState {
    fn aug_in(&self) -> usize {
        self.inp + self.bias as usize
    }

    /// Bytes held by the curvature statistics and factors (momentum excluded).
    pub fn curvature_bytes(&self) -> usize {
        match &self.precond {
            Preconditioner::Identity => 0,
            Preconditioner::Mac(s) => s.state_bytes(),
            Preconditioner::Smac(s) => s.state_bytes(),
            Preconditioner::Kfac(s) => s.state_bytes(),
            Preconditioner::Foof(s) => s.state_bytes(),
            Preconditioner::Eva(s) => s.state_bytes(),
            Preconditioner::Attention { state, p } => {
                state.state_bytes() + p.as_ref().map_or(0, |p| p.state_bytes())
            }
            Preconditioner::Adam { m, v } => 8 * (m.len() + v.len()),
        }
    }
}

/// Optimizer driver: owns per-block state and applies one step per call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    pub blocks: Vec<BlockState>,
}

fn info_of(b: &BlockState) -> BlockInfo {
    BlockInfo {
        layer: b.layer,
        kind: b.kind,
        out: b.out,
        inp: b.inp,
        bias: b.bias,
    }
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, model: &Model) -> Result<Self> {
        config.validate()?;
        let beta2 = config.ema_beta2;
        let rho = config.fixed_rho();
        let blocks = model
            .blocks()
            .into_iter()
            .map(|info| {
                let din = info.inp + info.bias as usize;
                let dout = info.out;
                let n_params = dout * din;
                let attn = info.kind == BlockKind::AttnQkv;
                let precond = match config.optimizer {
                    OptimizerKind::Sgd => Preconditioner::Identity,
                    OptimizerKind::Mac if attn => Preconditioner::Attention {
                        state: AttnCurvState::new(info.inp, beta2, config.damping),
                        p: None,
                    },
                    OptimizerKind::Smac if attn => Preconditioner::Attention {
                        state: AttnCurvState::new(info.inp, beta2, config.damping),
                        p: Some(DiagGradState::new(dout, beta2)),
                    },
                    OptimizerKind::Mac => {
                        Preconditioner::Mac(MacState::new(din, beta2, config.damping))
                    }
                    OptimizerKind::Smac => {
                        Preconditioner::Smac(SmacState::new(din, dout, beta2, config.damping))
                    }
                    OptimizerKind::Kfac => {
                        Preconditioner::Kfac(KfacState::new(din, dout, beta2, rho))
                    }
                    OptimizerKind::Foof => Preconditioner::Foof(FoofState::new(din, beta2, rho)),
                    OptimizerKind::Eva => Preconditioner::Eva(EvaState::new(din, dout, beta2, rho)),
                    OptimizerKind::AdamW => Preconditioner::Adam {
                        m: vec![0.0; n_params],
                        v: vec![0.0; n_params],
                    },
                };
                BlockState {
                    layer: info.layer,
                    kind: info.kind,
                    out: info.out,
                    inp: info.inp,
                    bias: info.bias,
                    velocity: vec![0.0; n_params],
                    precond,
                }
            })
            .collect();
        Ok(Optimizer {
            config,
            step: 0,
            blocks,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.config.optimizer
    }

    /// Pins the first layer's mean activation to a full-data input mean
    /// (without the bias coordinate, which is appended here).
    pub fn set_first_layer_mean(&mut self, mean: &[f64]) -> Result<()> {
        let b = self
            .blocks
            .first_mut()
            .ok_or_else(|| Error::Contract("model has no parameter blocks".into()))?;
        let mut m = mean.to_vec();
        if b.bias {
            m.push(1.0);
        }
        let dim = b.aug_in();
        let mac = match &mut b.precond {
            Preconditioner::Mac(s) => s,
            Preconditioner::Smac(s) => &mut s.mac,
            _ => {
                return Err(Error::Config(
                    "a precomputed first-layer mean needs mac or smac".into(),
                ))
            }
        };
        if m.len() != dim {
            return Err(Error::shape("first-layer mean", &[m.len()], &[dim]));
        }
        mac.fixed_mean = Some(m);
        Ok(())
    }

    /// Forces `p̂` for every SMAC block (used to reduce SMAC to MAC).
    pub fn force_p_hat(&mut self, value: f64) {
        for b in &mut self.blocks {
            match &mut b.precond {
                Preconditioner::Smac(s) => s.p.p_override = Some(vec![value; b.out]),
                Preconditioner::Attention { p: Some(p), .. } => {
                    p.p_override = Some(vec![value; b.out])
                }
                _ => {}
            }
        }
    }

    pub fn curvature_bytes(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(BlockState::curvature_bytes)
            .collect()
    }

    pub fn is_stat_step(&self) -> bool {
        self.kind().uses_curvature() && self.step % self.config.tau_cov == 0
    }

    pub fn is_rebuild_step(&self) -> bool {
        self.kind().uses_curvature() && self.step % self.config.tau_inv == 0
    }

    /// Current damping of every block that has one.
    pub fn damping(&self) -> Vec<Option<f64>> {
        self.blocks
            .iter()
            .map(|b| match &b.precond {
                Preconditioner::Mac(s) => Some(s.rho),
                Preconditioner::Smac(s) => Some(s.mac.rho),
                Preconditioner::Kfac(s) => Some(s.rho),
                Preconditioner::Foof(s) => Some(s.rho),
                Preconditioner::Eva(s) => Some(s.rho),
                Preconditioner::Attention { state, .. } => Some(state.rho),
                _ => None,
            })
            .collect()
    }

    /// Preconditioned augmented gradients for the current step, updating
    /// statistics and factors on their schedules.
    pub fn precondition(&mut self, grads: &Gradients) -> Result<Vec<Tensor>> {
        if grads.blocks.len() != self.blocks.len() {
            return Err(Error::Incompatible(format!(
                "optimizer has {} blocks, gradients have {}",
                self.blocks.len(),
                grads.blocks.len()
            )));
        }
        let stat = self.is_stat_step();
        let rebuild = self.is_rebuild_step();
        let t = self.step + 1;
        let cfg = self.config.clone();
        self.blocks
            .iter_mut()
            .zip(&grads.blocks)
            .map(|(b, g)| {
                if info_of(b) != g.info {
                    return Err(Error::Incompatible(format!(
                        "block mismatch {:?} vs {:?}",
                        info_of(b),
                        g.info
                    )));
                }
                let gmat = augmented(g)?;
                let stats = || {
                    g.stats.as_ref().ok_or_else(|| {
                        Error::State("curvature update needs captured statistics".into())
                    })
                };
                if stat {
                    observe(&mut b.precond, b.bias, stats()?)?;
                }
                if rebuild {
                    rebuild_factor(&mut b.precond)?;
                }
                apply_precond(&mut b.precond, &gmat, &cfg, t)
            })
            .collect()
    }

    /// One optimizer step on `model`.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
        let g_hats = self.precondition(grads)?;
        let cfg = &self.config;
        let adam = cfg.optimizer == OptimizerKind::AdamW;
        for (i, (b, gh)) in self.blocks.iter_mut().zip(g_hats).enumerate() {
            let (w, bias) = model.block_params_mut(i)?;
            let din = b.inp + b.bias as usize;
            // gather θ in augmented [out, in(+1)] layout
            let mut theta = vec![0.0; b.out * din];
            for o in 0..b.out {
                theta[o * din..o * din + b.inp].copy_from_slice(&w[o * b.inp..(o + 1) * b.inp]);
                if let Some(bs) = &bias {
                    theta[o * din + b.inp] = bs[o];
                }
            }
            if adam {
                let decay = 1.0 - lr * cfg.weight_decay;
                theta
                    .iter_mut()
                    .zip(gh.data())
                    .for_each(|(t, u)| *t = *t * decay - lr * u);
            } else {
                apply_update(
                    &mut theta,
                    &mut b.velocity,
                    gh.data(),
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                    cfg.decoupled_wd,
                )?;
            }
            for o in 0..b.out {
                w[o * b.inp..(o + 1) * b.inp].copy_from_slice(&theta[o * din..o * din + b.inp]);
            }
            if let Some(bs) = bias {
                for o in 0..b.out {
                    bs[o] = theta[o * din + b.inp];
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// `[∂L/∂W | ∂L/∂b]`
fn augmented(g: &BlockGrad) -> Result<Tensor> {
    let (out, inp) = (g.info.out, g.info.inp);
    let w = g.weight.clone().reshape(&[out, inp])?;
    match &g.bias {
        None => Ok(w),
        Some(b) => {
            let mut data = Vec::with_capacity(out * (inp + 1));
            for o in 0..out {
                data.extend_from_slice(w.row(o));
                data.push(b.data()[o]);
            }
            Tensor::new(vec![out, inp + 1], data)
        }
    }
}

fn observe(p: &mut Preconditioner, bias: bool, s: &BlockStats) -> Result<()> {
    match p {
        Preconditioner::Identity | Preconditioner::Adam { .. } => {}
        Preconditioner::Mac(m) => {
            let (mean, trace) = activation_moments(&s.a_in, bias)?;
            m.update_activation_ema(&mean, trace)?;
        }
        Preconditioner::Smac(sm) => {
            let (mean, trace) = activation_moments(&s.a_in, bias)?;
            sm.mac.update_activation_ema(&mean, trace)?;
            sm.p.update(&s.p_out)?;
        }
        Preconditioner::Kfac(k) => {
            let a = activation_second_moment(&s.a_in, bias)?;
            let pp = s
                .p_out
                .matmul_tn(&s.p_out)?
                .scale(1.0 / s.p_out.rows() as f64);
            k.update(&a, &pp)?;
        }
        Preconditioner::Foof(f) => {
            f.a_ema
                .update(activation_second_moment(&s.a_in, bias)?.data())?;
        }
        Preconditioner::Eva(e) => {
            let (mean, _) = activation_moments(&s.a_in, bias)?;
            e.a_ema.update(&mean)?;
            e.p_ema.update(s.p_out.mean_axis(0)?.data())?;
        }
        Preconditioner::Attention { state, p } => {
            let attn = s.attention.as_ref().ok_or_else(|| {
                Error::State("attention block without attention statistics".into())
            })?;
            state.update_from_stats(attn)?;
            if let Some(p) = p {
                p.update(&s.p_out)?;
            }
        }
    }
    Ok(())
}

fn rebuild_factor(p: &mut Preconditioner) -> Result<()> {
    match p {
        Preconditioner::Identity | Preconditioner::Adam { .. } => Ok(()),
        Preconditioner::Mac(m) => m.rebuild(),
        Preconditioner::Smac(s) => {
            s.mac.rebuild()?;
            s.p.rebuild()
        }
        Preconditioner::Kfac(k) => k.rebuild(),
        Preconditioner::Foof(f) => f.rebuild(),
        Preconditioner::Eva(e) => e.rebuild(),
        Preconditioner::Attention { state, p } => {
            state.rebuild()?;
            match p {
                Some(p) => p.rebuild(),
                None => Ok(()),
            }
        }
    }
}

fn apply_precond(
    p: &mut Preconditioner,
    g: &Tensor,
    cfg: &OptimizerConfig,
    t: u64,
) -> Result<Tensor> {
    match p {
        Preconditioner::Identity => Ok(g.clone()),
        Preconditioner::Mac(m) => m.precondition(g),
        Preconditioner::Smac(s) => s.precondition(g),
        Preconditioner::Kfac(k) => k.precondition(g),
        Preconditioner::Foof(f) => f.precondition(g),
        Preconditioner::Eva(e) => e.precondition(g),
        Preconditioner::Attention { state, p } => {
            let gh = state.precondition(g)?;
            match p {
                None => Ok(gh),
                Some(p) => {
                    let ph = p.p_hat()?;
                    let mut out = gh;
                    for (i, v) in ph.iter().enumerate() {
                        let s = 1.0 / (v + state.rho);
                        out.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    }
                    Ok(out)
                }
            }
        }
        Preconditioner::Adam { m, v } => {
            let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
            let c1 = 1.0 - b1.powi(t as i32);
            let c2 = 1.0 - b2.powi(t as i32);
            let mut out = Vec::with_capacity(m.len());
            for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                out.push((*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps));
            }
            Tensor::new(g.shape().to_vec(), out)
        }
    }
}

/// Input mean of a design matrix, the quantity behind the optional
/// precomputed first-layer factor.
pub fn dataset_mean(x: &Tensor) -> Result<Vec<f64>> {
    let rows = x.shape()[0];
    let per = x.len() / rows.max(1);
    Ok(x.clone().reshape(&[rows, per])?.mean_axis(0)?.into_data())
}
