use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{Attention, AttentionCache, Conv2d, Linear};
use super::loss::{loss_and_grad, LossKind, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        out: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    Flatten,
    Attention {
        heads: usize,
    },
    /// Averages a `[N, d]` token sequence down to `[d]`.
    TokenMean,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

/// Declarative architecture: per-example input shape, layer list and loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Record curvature statistics during backward.
    #[serde(default = "yes")]
    pub capture: bool,
}

fn default_loss() -> LossKind {
    LossKind::SoftmaxCrossEntropy
}

impl ModelSpec {
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Linear { out: h, bias: true });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Linear {
            out: classes,
            bias: true,
        });
        ModelSpec {
            input: vec![input],
            layers,
            loss: LossKind::SoftmaxCrossEntropy,
            capture: true,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    Relu,
    Flatten,
    Attention(Attention),
    TokenMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Linear,
    Conv2d,
    /// fused query/key/value projection of an attention layer
    AttnQkv,
    /// output projection of an attention layer
    AttnOut,
}

/// One trainable weight matrix (plus optional bias) as seen by optimizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub layer: usize,
    pub kind: BlockKind,
    pub out: usize,
    pub inp: usize,
    pub bias: bool,
}

#[derive(Debug, Clone)]
enum Cache {
    Rows { x: Tensor, shape: Vec<usize> },
    Conv { cols: Tensor },
    Relu { x: Tensor },
    Flatten { shape: Vec<usize> },
    Attention(Vec<AttentionCache>),
    TokenMean { shape: Vec<usize> },
}

/// Output of [`Model::forward`]; holds what backward needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Tensor,
    caches: Vec<Cache>,
    batch: usize,
    model_id: u64,
    version: u64,
}

impl ForwardPass {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Attention score matrices `[layer][example][head]` recorded in the pass.
    pub fn attention_scores(&self) -> Vec<Vec<Vec<Tensor>>> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                Cache::Attention(per) => Some(per.iter().map(|a| a.t.clone()).collect()),
                _ => None,
            })
            .collect()
    }
}

/// Per-example attention quantities captured for curvature estimation.
#[derive(Debug, Clone)]
pub struct AttentionStats {
    pub heads: usize,
    pub x: Vec<Tensor>,
    pub q: Vec<Tensor>,
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// `[example][head]`
    pub t: Vec<Vec<Tensor>>,
    pub delta_h: Vec<Tensor>,
    /// `[example][head]`
    pub delta_r: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct BlockStats {
    /// layer inputs, one row per example (or example × position)
    pub a_in: Tensor,
    /// per-example pre-activation gradients `B·∂L/∂z`, rows aligned with `a_in`
    pub p_out: Tensor,
    pub batch: usize,
    pub attention: Option<AttentionStats>,
}

#[derive(Debug, Clone)]
pub struct BlockGrad {
    pub info: BlockInfo,
    /// `[out, in]`, mean over the batch
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stats: Option<BlockStats>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub blocks: Vec<BlockGrad>,
    pub input: Tensor,
}

#[derive(Debug)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    id: u64,
    version: u64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = spec.input.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Config(format!("input shape {shape:?} is empty")));
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let bad = |what: &str| Error::Config(format!("layer {i}: {what}, got input {shape:?}"));
            let layer = match *ls {
                LayerSpec::Linear { out, bias } => {
                    let inp = *shape.last().expect("non-empty");
                    if out == 0 {
                        return Err(bad("linear width must be positive"));
                    }
                    *shape.last_mut().unwrap() = out;
                    Layer::Linear(Linear::init(inp, out, bias, &mut rng))
                }
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(bad("conv2d needs [C, H, W]"));
                    };
                    if out_channels == 0 || kernel == 0 {
                        return Err(bad("conv2d needs positive channels and kernel"));
                    }
                    let conv = Conv2d::init(
                        [c, h, w],
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        bias,
                        &mut rng,
                    )
                    .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                    shape = conv.out_shape()?.to_vec();
                    Layer::Conv2d(conv)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
                LayerSpec::Attention { heads } => {
                    let [_, d] = shape[..] else {
                        return Err(bad("attention needs [tokens, dim]"));
                    };
                    Layer::Attention(
                        Attention::init(d, heads, &mut rng)
                            .map_err(|e| Error::Config(format!("layer {i}: {e}")))?,
                    )
                }
                LayerSpec::TokenMean => {
                    let [_, d] = shape[..] else {
                        return Err(bad("token_mean needs [tokens, dim]"));
                    };
                    shape = vec![d];
                    Layer::TokenMean
                }
            };
            layers.push(layer);
        }
        if shape.len() != 1 {
            return Err(Error::Config(format!(
                "model output must be a vector per example, got {shape:?}"
            )));
        }
        Ok(Model {
            spec,
            layers,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable layer access; invalidates outstanding forward passes.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn blocks(&self) -> Vec<BlockInfo> {
        let mut out = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Linear(lin) => out.push(BlockInfo {
                    layer,
                    kind: BlockKind::Linear,
                    out: lin.out_features(),
                    inp: lin.in_features(),
                    bias: lin.bias.is_some(),
                }),
                Layer::Conv2d(c) => out.push(BlockInfo {
                    layer,
                    kind: BlockKind::Conv2d,
                    out: c.out_channels(),
                    inp: c.geometry.patch_len(),
                    bias: c.bias.is_some(),
                }),
                Layer::Attention(a) => {
                    let d = a.dim();
                    out.push(BlockInfo {
                        layer,
                        kind: BlockKind::AttnQkv,
                        out: 3 * d,
                        inp: d,
                        bias: false,
                    });
                    out.push(BlockInfo {
                        layer,
                        kind: BlockKind::AttnOut,
                        out: d,
                        inp: d,
                        bias: false,
                    });
                }
                _ => {}
            }
        }
        out
    }

    /// Weight (row-major `[out, in]` data) and bias of block `b`.
    pub fn block_params_mut(&mut self, b: usize) -> Result<(&mut [f64], Option<&mut [f64]>)> {
        let info = *self
            .blocks()
            .get(b)
            .ok_or_else(|| Error::Contract(format!("no parameter block {b}")))?;
        self.version += 1;
        Ok(match (&mut self.layers[info.layer], info.kind) {
            (Layer::Linear(l), _) => (l.weight.data_mut(), l.bias.as_mut().map(|t| t.data_mut())),
            (Layer::Conv2d(c), _) => (c.kernel.data_mut(), c.bias.as_mut().map(|t| t.data_mut())),
            (Layer::Attention(a), BlockKind::AttnQkv) => (a.w_qkv.data_mut(), None),
            (Layer::Attention(a), _) => (a.w_out.data_mut(), None),
            _ => unreachable!("blocks() only lists parameterised layers"),
        })
    }

    pub fn block_params(&self, b: usize) -> Result<(&[f64], Option<&[f64]>)> {
        let info = *self
            .blocks()
            .get(b)
            .ok_or_else(|| Error::Contract(format!("no parameter block {b}")))?;
        Ok(match (&self.layers[info.layer], info.kind) {
            (Layer::Linear(l), _) => (l.weight.data(), l.bias.as_ref().map(|t| t.data())),
            (Layer::Conv2d(c), _) => (c.kernel.data(), c.bias.as_ref().map(|t| t.data())),
            (Layer::Attention(a), BlockKind::AttnQkv) => (a.w_qkv.data(), None),
            (Layer::Attention(a), _) => (a.w_out.data(), None),
            _ => unreachable!("blocks() only lists parameterised layers"),
        })
    }

    pub fn param_count(&self) -> usize {
        self.blocks()
            .iter()
            .map(|b| b.out * b.inp + if b.bias { b.out } else { 0 })
            .sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardPass> {
        let mut expected = vec![0];
        expected.extend_from_slice(&self.spec.input);
        if x.rank() != expected.len() || x.shape()[1..] != self.spec.input[..] {
            return Err(Error::shape("forward", x.shape(), &expected));
        }
        let batch = x.shape()[0];
        if batch == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Linear(l) => {
                    let shape = h.shape().to_vec();
                    let rows =
                        h.reshape(&[shape[..shape.len() - 1].iter().product(), l.in_features()])?;
                    let z = l.forward_rows(&rows)?;
                    let mut out_shape = shape.clone();
                    *out_shape.last_mut().unwrap() = l.out_features();
                    (z.reshape(&out_shape)?, Cache::Rows { x: rows, shape })
                }
                Layer::Conv2d(c) => {
                    let (y, cols) = c.forward(&h)?;
                    (y, Cache::Conv { cols })
                }
                Layer::Relu => (relu(&h), Cache::Relu { x: h }),
                Layer::Flatten => {
                    let shape = h.shape().to_vec();
                    let per: usize = shape[1..].iter().product();
                    (h.reshape(&[batch, per])?, Cache::Flatten { shape })
                }
                Layer::Attention(a) => {
                    let (n, d) = (h.shape()[1], h.shape()[2]);
                    let outs: Vec<(Tensor, AttentionCache)> = (0..batch)
                        .into_par_iter()
                        .map(|i| {
                            let xi = Tensor::new(
                                vec![n, d],
                                h.data()[i * n * d..(i + 1) * n * d].to_vec(),
                            )?;
                            a.forward_one(&xi)
                        })
                        .collect::<Result<_>>()?;
                    let mut y = Vec::with_capacity(batch * n * d);
                    let mut cs = Vec::with_capacity(batch);
                    for (yi, ci) in outs {
                        y.extend_from_slice(yi.data());
                        cs.push(ci);
                    }
                    (Tensor::new(vec![batch, n, d], y)?, Cache::Attention(cs))
                }
                Layer::TokenMean => {
                    let shape = h.shape().to_vec();
                    let (n, d) = (shape[1], shape[2]);
                    let mut y = vec![0.0; batch * d];
                    for b in 0..batch {
                        for t in 0..n {
                            for j in 0..d {
                                y[b * d + j] += h.data()[(b * n + t) * d + j] / n as f64;
                            }
                        }
                    }
                    (Tensor::new(vec![batch, d], y)?, Cache::TokenMean { shape })
                }
            };
            caches.push(cache);
            h = next;
        }
        Ok(ForwardPass {
            logits: h,
            caches,
            batch,
            model_id: self.id,
            version: self.version,
        })
    }

    /// Mean loss over the batch and per-block gradients; fills curvature
    /// statistics when the spec has `capture` set.
    pub fn backward(&self, pass: &ForwardPass, targets: &Targets) -> Result<Gradients> {
        if pass.model_id != self.id || pass.version != self.version {
            return Err(Error::State(
                "backward called without a matching forward pass".into(),
            ));
        }
        let (loss, dlogits) = loss_and_grad(self.spec.loss, &pass.logits, targets)?;
        let batch = pass.batch;
        let bf = batch as f64;
        let capture = self.spec.capture;
        let mut g = dlogits;
        let mut blocks = Vec::new();
        let infos = self.blocks();
        let mut info_idx = infos.len();
        for (layer, cache) in self.layers.iter().zip(&pass.caches).rev() {
            g = match (layer, cache) {
                (Layer::Linear(l), Cache::Rows { x, shape }) => {
                    let dz = g.reshape(&[x.rows(), l.out_features()])?;
                    let (dw, db, dx) = l.backward_rows(x, &dz)?;
                    info_idx -= 1;
                    blocks.push(BlockGrad {
                        info: infos[info_idx],
                        weight: dw,
                        bias: db,
                        stats: capture.then(|| BlockStats {
                            a_in: x.clone(),
                            p_out: dz.scale(bf),
                            batch,
                            attention: None,
                        }),
                    });
                    dx.reshape(shape)?
                }
                (Layer::Conv2d(c), Cache::Conv { cols }) => {
                    let (dk, db, dx, dy_rows) = c.backward(cols, &g)?;
                    info_idx -= 1;
                    blocks.push(BlockGrad {
                        info: infos[info_idx],
                        weight: dk,
                        bias: db,
                        stats: capture.then(|| BlockStats {
                            a_in: cols.clone(),
                            p_out: dy_rows.scale(bf),
                            batch,
                            attention: None,
                        }),
                    });
                    dx
                }
                (Layer::Relu, Cache::Relu { x }) => g.mul(&relu_grad(x))?,
                (Layer::Flatten, Cache::Flatten { shape }) => g.reshape(shape)?,
                (Layer::TokenMean, Cache::TokenMean { shape }) => {
                    let (n, d) = (shape[1], shape[2]);
                    let mut dx = vec![0.0; batch * n * d];
                    for b in 0..batch {
                        for t in 0..n {
                            for j in 0..d {
                                dx[(b * n + t) * d + j] = g.data()[b * d + j] / n as f64;
                            }
                        }
                    }
                    Tensor::new(shape.clone(), dx)?
                }
                (Layer::Attention(a), Cache::Attention(cs)) => {
                    let (n, d) = (g.shape()[1], g.shape()[2]);
                    let grads = cs
                        .par_iter()
                        .enumerate()
                        .map(|(i, c)| {
                            let dy = Tensor::new(
                                vec![n, d],
                                g.data()[i * n * d..(i + 1) * n * d].to_vec(),
                            )?;
                            a.backward_one(c, &dy)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut d_qkv = Tensor::zeros(&[3 * d, d]);
                    let mut d_out = Tensor::zeros(&[d, d]);
                    let mut dx = Vec::with_capacity(batch * n * d);
                    for gr in &grads {
                        d_qkv.axpy(1.0, &gr.d_qkv)?;
                        d_out.axpy(1.0, &gr.d_out)?;
                        dx.extend_from_slice(gr.dx.data());
                    }
                    info_idx -= 2;
                    let (qkv_stats, out_stats) = if capture {
                        let attn = AttentionStats {
                            heads: a.heads,
                            x: cs.iter().map(|c| c.x.clone()).collect(),
                            q: cs.iter().map(|c| c.q.clone()).collect(),
                            k: cs.iter().map(|c| c.k.clone()).collect(),
                            v: cs.iter().map(|c| c.v.clone()).collect(),
                            t: cs.iter().map(|c| c.t.clone()).collect(),
                            delta_h: grads.iter().map(|g| g.delta_h.scale(bf)).collect(),
                            delta_r: grads
                                .iter()
                                .map(|g| g.delta_r.iter().map(|r| r.scale(bf)).collect())
                                .collect(),
                        };
                        (
                            Some(BlockStats {
                                a_in: stack_rows(cs.iter().map(|c| &c.x), d)?,
                                p_out: stack_rows(grads.iter().map(|g| &g.dz), 3 * d)?.scale(bf),
                                batch,
                                attention: Some(attn),
                            }),
                            Some(BlockStats {
                                a_in: stack_rows(cs.iter().map(|c| &c.h), d)?,
                                p_out: g.clone().reshape(&[batch * n, d])?.scale(bf),
                                batch,
                                attention: None,
                            }),
                        )
                    } else {
                        (None, None)
                    };
                    blocks.push(BlockGrad {
                        info: infos[info_idx + 1],
                        weight: d_out,
                        bias: None,
                        stats: out_stats,
                    });
                    blocks.push(BlockGrad {
                        info: infos[info_idx],
                        weight: d_qkv,
                        bias: None,
                        stats: qkv_stats,
                    });
                    Tensor::new(vec![batch, n, d], dx)?
                }
                _ => return Err(Error::State("forward cache does not match layer".into())),
            };
        }
        blocks.reverse();
        Ok(Gradients {
            loss,
            blocks,
            input: g,
        })
    }

    /// Mean loss only.
    pub fn loss(&self, x: &Tensor, targets: &Targets) -> Result<f64> {
        let pass = self.forward(x)?;
        Ok(loss_and_grad(self.spec.loss, &pass.logits, targets)?.0)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.logits)
    }
}

fn stack_rows<'a>(parts: impl Iterator<Item = &'a Tensor>, width: usize) -> Result<Tensor> {
    let mut v = Vec::new();
    for p in parts {
        v.extend_from_slice(p.data());
    }
    let rows = v.len() / width;
    Tensor::new(vec![rows, width], v)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Derivative of [`relu`], taken as 0 at 0.
pub fn relu_grad(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}
