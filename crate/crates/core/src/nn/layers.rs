use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::loss::softmax_rows;
use crate::error::{Error, Result};
use crate::tensor::{col2im, im2col, ConvGeometry, Tensor};

fn kaiming_uniform(out: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    (0..out * fan_in).map(|_| dist.sample(rng)).collect()
}

/// `z = W a + b`, applied to every row of the flattened input.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn init(inp: usize, out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::new(vec![out, inp], kaiming_uniform(out, inp, rng)).expect("sized"),
            bias: bias.then(|| Tensor::zeros(&[out])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward_rows(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = x.matmul_nt(&self.weight)?;
        if let Some(b) = &self.bias {
            add_row_bias(&mut z, b.data());
        }
        Ok(z)
    }

    /// Returns `(dW, db, dx)` for input rows `x` and output gradient rows `dz`.
    pub fn backward_rows(
        &self,
        x: &Tensor,
        dz: &Tensor,
    ) -> Result<(Tensor, Option<Tensor>, Tensor)> {
        let dw = dz.matmul_tn(x)?;
        let db = match self.bias {
            Some(_) => Some(dz.sum_axis(0)?),
            None => None,
        };
        let dx = dz.matmul(&self.weight)?;
        Ok((dw, db, dx))
    }
}

pub(crate) fn add_row_bias(z: &mut Tensor, b: &[f64]) {
    for i in 0..z.rows() {
        for (v, bb) in z.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

/// 2-D convolution over NCHW input, lowered to a matrix product via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out, in, kh, kw]`
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
    pub geometry: ConvGeometry,
}

impl Conv2d {
    pub fn init(
        in_shape: [usize; 3],
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let geometry = ConvGeometry {
            channels: in_shape[0],
            height: in_shape[1],
            width: in_shape[2],
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        };
        geometry.out_hw()?;
        let fan_in = geometry.patch_len();
        Ok(Conv2d {
            kernel: Tensor::new(
                vec![out_channels, in_shape[0], kernel, kernel],
                kaiming_uniform(out_channels, fan_in, rng),
            )?,
            bias: bias.then(|| Tensor::zeros(&[out_channels])),
            geometry,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn kernel_matrix(&self) -> Tensor {
        self.kernel
            .clone()
            .reshape(&[self.out_channels(), self.geometry.patch_len()])
            .expect("kernel is contiguous")
    }

    pub fn out_shape(&self) -> Result<[usize; 3]> {
        let (oh, ow) = self.geometry.out_hw()?;
        Ok([self.out_channels(), oh, ow])
    }

    /// Returns the output `[B, out, OH, OW]` and the patch rows.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let batch = x.shape()[0];
        let cols = im2col(x, &self.geometry)?;
        let mut rows = cols.matmul_nt(&self.kernel_matrix())?;
        if let Some(b) = &self.bias {
            add_row_bias(&mut rows, b.data());
        }
        let [oc, oh, ow] = self.out_shape()?;
        Ok((rows_to_nchw(&rows, batch, oc, oh * ow), cols))
            .map(|(y, c)| (y.reshape(&[batch, oc, oh, ow]).expect("sized"), c))
    }

    /// Returns `(dK, db, dx, dy_rows)` where `dy_rows` is `[B·OH·OW, out]`.
    pub fn backward(
        &self,
        cols: &Tensor,
        dy: &Tensor,
    ) -> Result<(Tensor, Option<Tensor>, Tensor, Tensor)> {
        let batch = dy.shape()[0];
        let [oc, oh, ow] = self.out_shape()?;
        let dy_rows = nchw_to_rows(dy, batch, oc, oh * ow);
        let dk = dy_rows.matmul_tn(cols)?;
        let db = match self.bias {
            Some(_) => Some(dy_rows.sum_axis(0)?),
            None => None,
        };
        let dcols = dy_rows.matmul(&self.kernel_matrix())?;
        let dx = col2im(&dcols, &self.geometry, batch)?;
        Ok((dk, db, dx, dy_rows))
    }
}

fn rows_to_nchw(rows: &Tensor, batch: usize, channels: usize, plane: usize) -> Tensor {
    let mut out = vec![0.0; batch * channels * plane];
    let src = rows.data();
    for n in 0..batch {
        for p in 0..plane {
            let r = (n * plane + p) * channels;
            for c in 0..channels {
                out[(n * channels + c) * plane + p] = src[r + c];
            }
        }
    }
    Tensor::new(vec![batch * channels * plane], out).expect("sized")
}

fn nchw_to_rows(x: &Tensor, batch: usize, channels: usize, plane: usize) -> Tensor {
    let mut out = vec![0.0; batch * channels * plane];
    let src = x.data();
    for n in 0..batch {
        for c in 0..channels {
            for p in 0..plane {
                out[(n * plane + p) * channels + c] = src[(n * channels + c) * plane + p];
            }
        }
    }
    Tensor::new(vec![batch * plane, channels], out).expect("sized")
}

/// Multi-head self-attention with a fused QKV projection and an output
/// projection, both bias-free. Weights are stored `[out, in]`, so the fused
/// projection is `[3d, d]` with rows `[0,d)`, `[d,2d)`, `[2d,3d)` producing
/// Q, K and V respectively.
#[derive(Debug, Clone)]
pub struct Attention {
    pub w_qkv: Tensor,
    pub w_out: Tensor,
    pub heads: usize,
}

/// Per-example intermediates of an attention forward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    /// `[N, d]` each
    pub x: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// one `[N, N]` row-stochastic matrix per head
    pub t: Vec<Tensor>,
    /// concatenated head outputs `[N, d]`
    pub h: Tensor,
}

/// Per-example gradients of an attention layer.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub d_qkv: Tensor,
    pub d_out: Tensor,
    pub dx: Tensor,
    /// `[N, 3d]` gradient w.r.t. the fused projection output
    pub dz: Tensor,
    /// `[N, d]` gradient w.r.t. the concatenated head outputs
    pub delta_h: Tensor,
    /// per head, the gradient w.r.t. the raw scores `Q_h K_hᵀ`
    pub delta_r: Vec<Tensor>,
}

impl Attention {
    pub fn init(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "embedding {d} not divisible by {heads} heads"
            )));
        }
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut draw = |n: usize| (0..n).map(|_| normal.sample(rng)).collect::<Vec<_>>();
        Ok(Attention {
            w_qkv: Tensor::new(vec![3 * d, d], draw(3 * d * d))?,
            w_out: Tensor::new(vec![d, d], draw(d * d))?,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_out.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn forward_one(&self, x: &Tensor) -> Result<(Tensor, AttentionCache)> {
        let d = self.dim();
        let dk = self.head_dim();
        let (n, dx) = x.dims2()?;
        if dx != d {
            return Err(Error::shape("attention", x.shape(), &[n, d]));
        }
        let z = x.matmul_nt(&self.w_qkv)?;
        let q = column_block(&z, 0, d);
        let k = column_block(&z, d, d);
        let v = column_block(&z, 2 * d, d);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut h = Tensor::zeros(&[n, d]);
        let mut ts = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = column_block(&q, head * dk, dk);
            let kh = column_block(&k, head * dk, dk);
            let vh = column_block(&v, head * dk, dk);
            let t = softmax_rows(&qh.matmul_nt(&kh)?.scale(scale))?;
            let hh = t.matmul(&vh)?;
            write_column_block(&mut h, &hh, head * dk);
            ts.push(t);
        }
        let y = h.matmul_nt(&self.w_out)?;
        Ok((
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                t: ts,
                h,
            },
        ))
    }

    pub fn backward_one(&self, cache: &AttentionCache, dy: &Tensor) -> Result<AttentionGrads> {
        let d = self.dim();
        let dk = self.head_dim();
        let n = cache.x.rows();
        let scale = 1.0 / (dk as f64).sqrt();
        let d_out = dy.matmul_tn(&cache.h)?;
        let delta_h = dy.matmul(&self.w_out)?;
        let mut dz = Tensor::zeros(&[n, 3 * d]);
        let mut delta_r = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let t = &cache.t[head];
            let qh = column_block(&cache.q, head * dk, dk);
            let kh = column_block(&cache.k, head * dk, dk);
            let vh = column_block(&cache.v, head * dk, dk);
            let dhh = column_block(&delta_h, head * dk, dk);
            let dt = dhh.matmul_nt(&vh)?;
            let dvh = t.matmul_tn(&dhh)?;
            let ds = softmax_backward(t, &dt)?.scale(scale);
            let dqh = ds.matmul(&kh)?;
            let dkh = ds.matmul_tn(&qh)?;
            write_column_block(&mut dz, &dqh, head * dk);
            write_column_block(&mut dz, &dkh, d + head * dk);
            write_column_block(&mut dz, &dvh, 2 * d + head * dk);
            delta_r.push(ds);
        }
        let d_qkv = dz.matmul_tn(&cache.x)?;
        let dx = dz.matmul(&self.w_qkv)?;
        Ok(AttentionGrads {
            d_qkv,
            d_out,
            dx,
            dz,
            delta_h,
            delta_r,
        })
    }
}

/// `T ⊙ (ΔT − rowsum(ΔT ⊙ T))`, the softmax backward without its Jacobian.
fn softmax_backward(t: &Tensor, dt: &Tensor) -> Result<Tensor> {
    let prod = t.mul(dt)?;
    let mut out = Tensor::zeros(t.shape());
    for i in 0..t.rows() {
        let s: f64 = prod.row(i).iter().sum();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = t.at(i, j) * (dt.at(i, j) - s);
        }
    }
    Ok(out)
}

pub(crate) fn column_block(m: &Tensor, start: usize, width: usize) -> Tensor {
    let r = m.rows();
    let mut out = Vec::with_capacity(r * width);
    for i in 0..r {
        out.extend_from_slice(&m.row(i)[start..start + width]);
    }
    Tensor::new(vec![r, width], out).expect("sized")
}

pub(crate) fn write_column_block(dst: &mut Tensor, src: &Tensor, start: usize) {
    let w = src.cols();
    for i in 0..src.rows() {
        dst.row_mut(i)[start..start + w].copy_from_slice(src.row(i));
    }
}

/// `∂L/∂W_q = Xᵀ Δ_R K` for one head, with `Δ_R` the gradient w.r.t. the
/// raw scores `Q Kᵀ` (the `1/√d_k` scaling already folded in).
pub fn attention_grad_wq(x: &Tensor, delta_r: &Tensor, k: &Tensor) -> Result<Tensor> {
    check_attn_shapes(x, delta_r, k)?;
    x.matmul_tn(&delta_r.matmul(k)?)
}

/// `∂L/∂W_k = Xᵀ Δ_Rᵀ Q`.
pub fn attention_grad_wk(x: &Tensor, delta_r: &Tensor, q: &Tensor) -> Result<Tensor> {
    check_attn_shapes(x, delta_r, q)?;
    x.matmul_tn(&delta_r.matmul_tn(q)?)
}

/// `∂L/∂W_v = Xᵀ Tᵀ Δ_H`.
pub fn attention_grad_wv(x: &Tensor, t: &Tensor, delta_h: &Tensor) -> Result<Tensor> {
    check_attn_shapes(x, t, delta_h)?;
    x.matmul_tn(&t.matmul_tn(delta_h)?)
}

fn check_attn_shapes(x: &Tensor, square: &Tensor, proj: &Tensor) -> Result<()> {
    let (n, _) = x.dims2()?;
    let (a, b) = square.dims2()?;
    let (pn, _) = proj.dims2()?;
    if a != n || b != n || pn != n {
        return Err(Error::shape("attention gradient", square.shape(), &[n, n]));
    }
    Ok(())
}
