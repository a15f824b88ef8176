use super::Tensor;
use crate::error::{Error, Result};

/// Spatial parameters of a 2-D convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> Result<(usize, usize)> {
        let span_h = self.height + 2 * self.padding;
        let span_w = self.width + 2 * self.padding;
        if self.stride == 0 || span_h < self.kernel_h || span_w < self.kernel_w {
            return Err(Error::Contract(format!(
                "convolution produces an empty output for {self:?}"
            )));
        }
        Ok((
            (span_h - self.kernel_h) / self.stride + 1,
            (span_w - self.kernel_w) / self.stride + 1,
        ))
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }
}

/// Unfolds `[B, C, H, W]` into patch rows `[B·OH·OW, C·kh·kw]`.
pub fn im2col(x: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let b = check_input(x, g)?;
    let (oh, ow) = g.out_hw()?;
    let patch = g.patch_len();
    let mut out = vec![0.0; b * oh * ow * patch];
    let xd = x.data();
    let plane = g.height * g.width;
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * patch;
                for c in 0..g.channels {
                    let base = (n * g.channels + c) * plane;
                    for ky in 0..g.kernel_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            out[row + (c * g.kernel_h + ky) * g.kernel_w + kx] =
                                xd[base + iy as usize * g.width + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * oh * ow, patch], out)
}

/// Adjoint of [`im2col`]: scatters patch rows back, summing overlaps.
pub fn col2im(cols: &Tensor, g: &ConvGeometry, batch: usize) -> Result<Tensor> {
    let (oh, ow) = g.out_hw()?;
    let patch = g.patch_len();
    if cols.shape() != [batch * oh * ow, patch] {
        return Err(Error::shape(
            "col2im",
            cols.shape(),
            &[batch * oh * ow, patch],
        ));
    }
    let plane = g.height * g.width;
    let mut out = vec![0.0; batch * g.channels * plane];
    let cd = cols.data();
    for n in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * patch;
                for c in 0..g.channels {
                    let base = (n * g.channels + c) * plane;
                    for ky in 0..g.kernel_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            out[base + iy as usize * g.width + ix as usize] +=
                                cd[row + (c * g.kernel_h + ky) * g.kernel_w + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, g.channels, g.height, g.width], out)
}

fn check_input(x: &Tensor, g: &ConvGeometry) -> Result<usize> {
    match x.shape() {
        [b, c, h, w] if *c == g.channels && *h == g.height && *w == g.width => Ok(*b),
        other => Err(Error::shape(
            "im2col",
            other,
            &[0, g.channels, g.height, g.width],
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geometry(stride: usize, padding: usize) -> ConvGeometry {
        ConvGeometry {
            channels: 2,
            height: 5,
            width: 4,
            kernel_h: 3,
            kernel_w: 2,
            stride,
            padding,
        }
    }

    #[test]
    fn direct_convolution_matches() {
        let g = geometry(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(
            vec![1, 2, 5, 4],
            (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let k: Vec<f64> = (0..g.patch_len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let cols = im2col(&x, &g).unwrap();
        let (oh, ow) = g.out_hw().unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut naive = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..2 {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                naive += x.data()[c * 20 + iy as usize * 4 + ix as usize]
                                    * k[(c * 3 + ky) * 2 + kx];
                            }
                        }
                    }
                }
                assert!((dot(cols.row(oy * ow + ox), &k) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_output_rejected() {
        let g = ConvGeometry {
            kernel_h: 9,
            ..geometry(1, 0)
        };
        assert!(g.out_hw().is_err());
    }

    proptest! {
        #[test]
        fn adjoint_pair(seed in 0u64..2000, stride in 1usize..3, padding in 0usize..2) {
            let g = geometry(stride, padding);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![2, 2, 5, 4], (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let (oh, ow) = g.out_hw().unwrap();
            let rows = 2 * oh * ow;
            let y = Tensor::new(vec![rows, g.patch_len()], (0..rows * g.patch_len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let lhs = dot(im2col(&x, &g).unwrap().data(), y.data());
            let rhs = dot(x.data(), col2im(&y, &g, 2).unwrap().data());
            prop_assert!((lhs - rhs).abs() <= 1e-10);
        }
    }
}
