use rand::Rng;
use super::{Shape, Tensor};
use crate::{exec, Error, Result};

/// 2-D convolution without dilation or groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// `(out_channels, in_channels, kh, kw)`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
    ) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidParams(format!(
                "conv kernel {kernel:?} and stride {stride:?} must be >= 1"
            )));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
            weight: Tensor::zeros(Shape::new(out_channels, in_channels, kernel.0, kernel.1)),
            bias: bias.then(|| Tensor::zeros(Shape::new(1, out_channels, 1, 1))),
        })
    }

    /// He-uniform initialisation for a ReLU follower.
    pub fn init_kaiming<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = self.in_channels() * self.kernel.0 * self.kernel.1;
        let bound = (6.0 / fan_in as f64).sqrt();
        self.weight = Tensor::uniform(self.weight.shape(), -bound, bound, rng);
        if let Some(b) = &mut self.bias {
            *b = Tensor::zeros(b.shape());
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels() {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "c",
                expected: self.in_channels(),
                actual: input.c,
            });
        }
        let oh = out_extent(input.h, self.kernel.0, self.stride.0, self.padding.0, "h")?;
        let ow = out_extent(input.w, self.kernel.1, self.stride.1, self.padding.1, "w")?;
        Ok(Shape::new(input.n, self.out_channels(), oh, ow))
    }
}

pub(crate) fn out_extent(
    size: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dim: &'static str,
) -> Result<usize> {
    if size + 2 * pad < kernel {
        return Err(Error::Shape {
            op: "conv2d",
            dim,
            expected: kernel,
            actual: size + 2 * pad,
        });
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

/// Output columns `ox` whose tap `kx` lands inside `[0, w)`.
#[inline]
pub(crate) fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k {
        ((size - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct Geometry {
    input: Shape,
    output: Shape,
    k: (usize, usize),
    s: (usize, usize),
    p: (usize, usize),
    col_ranges: Vec<(usize, usize)>,
}

impl Geometry {
    fn new(conv: &Conv2d, input: Shape) -> Result<Self> {
        let output = conv.output_shape(input)?;
        let col_ranges = (0..conv.kernel.1)
            .map(|kx| valid_range(output.w, input.w, kx, conv.stride.1, conv.padding.1))
            .collect();
        Ok(Self {
            input,
            output,
            k: conv.kernel,
            s: conv.stride,
            p: conv.padding,
            col_ranges,
        })
    }

    /// Input row for output row `oy` and tap `ky`, if inside the map.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = oy * self.s.0 + ky;
        (y >= self.p.0 && y - self.p.0 < self.input.h).then(|| y - self.p.0)
    }
}

pub fn conv2d(input: &Tensor, conv: &Conv2d) -> Result<Tensor> {
    let g = Geometry::new(conv, input.shape())?;
    let mut out = Tensor::zeros(g.output);
    let out_len = g.output.sample_len();
    let weight = conv.weight.data();
    let bias = conv.bias.as_ref().map(|b| b.data());
    exec::for_each_chunk_mut(out.data_mut(), out_len, |n, out_s| {
        forward_sample(&g, input.sample(n), weight, bias, out_s);
    });
    Ok(out)
}

fn forward_sample(g: &Geometry, x: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (ic_n, ih, iw) = (g.input.c, g.input.h, g.input.w);
    let (oh, ow) = (g.output.h, g.output.w);
    let (kh, kw) = g.k;
    let sw = g.s.1;
    for (oc, out_plane) in out.chunks_mut(oh * ow).enumerate() {
        let b = bias.map_or(0.0, |b| b[oc]);
        out_plane.iter_mut().for_each(|v| *v = b);
        for ic in 0..ic_n {
            let in_plane = &x[ic * ih * iw..(ic + 1) * ih * iw];
            let wbase = (oc * ic_n + ic) * kh * kw;
            for ky in 0..kh {
                for oy in 0..oh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let in_row = &in_plane[iy * iw..(iy + 1) * iw];
                    let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                    for kx in 0..kw {
                        let wv = weight[wbase + ky * kw + kx];
                        let (lo, hi) = g.col_ranges[kx];
                        for ox in lo..hi {
                            out_row[ox] += wv * in_row[ox * sw + kx - g.p.1];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(input: &Tensor, conv: &Conv2d, grad_out: &Tensor) -> Result<ConvGrads> {
    let g = Geometry::new(conv, input.shape())?;
    if grad_out.shape() != g.output {
        return Err(Error::InvalidShape {
            op: "conv2d_backward",
            reason: format!("gradient {} vs output {}", grad_out.shape(), g.output),
        });
    }
    let weight = conv.weight.data();
    let wlen = weight.len();
    let per_sample = exec::map_indexed(g.input.n, |n| {
        backward_sample(&g, input.sample(n), weight, grad_out.sample(n))
    });

    let mut gin = Vec::with_capacity(g.input.numel());
    let mut gw = vec![0.0; wlen];
    for (gi, gws) in per_sample {
        gin.extend_from_slice(&gi);
        gw.iter_mut().zip(&gws).for_each(|(a, b)| *a += b);
    }
    let bias = conv.bias.as_ref().map(|b| {
        let mut gb = Tensor::zeros(b.shape());
        let plane = g.output.plane();
        for n in 0..g.output.n {
            for (oc, chunk) in grad_out.sample(n).chunks(plane).enumerate() {
                gb.data_mut()[oc] += chunk.iter().sum::<f64>();
            }
        }
        gb
    });
    Ok(ConvGrads {
        input: Tensor::from_vec(g.input, gin)?,
        weight: Tensor::from_vec(conv.weight.shape(), gw)?,
        bias,
    })
}

fn backward_sample(g: &Geometry, x: &[f64], weight: &[f64], gout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ic_n, ih, iw) = (g.input.c, g.input.h, g.input.w);
    let (oh, ow) = (g.output.h, g.output.w);
    let (kh, kw) = g.k;
    let sw = g.s.1;
    let mut gin = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    for (oc, gout_plane) in gout.chunks(oh * ow).enumerate() {
        for ic in 0..ic_n {
            let in_off = ic * ih * iw;
            let wbase = (oc * ic_n + ic) * kh * kw;
            for ky in 0..kh {
                for oy in 0..oh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let row_off = in_off + iy * iw;
                    let gout_row = &gout_plane[oy * ow..(oy + 1) * ow];
                    for kx in 0..kw {
                        let widx = wbase + ky * kw + kx;
                        let wv = weight[widx];
                        let (lo, hi) = g.col_ranges[kx];
                        let mut acc = 0.0;
                        for ox in lo..hi {
                            let ix = row_off + ox * sw + kx - g.p.1;
                            gin[ix] += wv * gout_row[ox];
                            acc += gout_row[ox] * x[ix];
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gin, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops straight from the definition.
    fn naive(input: &Tensor, conv: &Conv2d) -> Tensor {
        let s = input.shape();
        let os = conv.output_shape(s).unwrap();
        let (kh, kw) = conv.kernel;
        let mut out = Tensor::zeros(os);
        for n in 0..os.n {
            for oc in 0..os.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.data()[oc]);
                        for ic in 0..s.c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * conv.stride.0 + ky) as isize - conv.padding.0 as isize;
                                    let ix = (ox * conv.stride.1 + kx) as isize - conv.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                        continue;
                                    }
                                    acc += conv.weight.at(oc, ic, ky, kx) * input.at(n, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                        let i = out.index(n, oc, oy, ox);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_window_sums() {
        let mut conv = Conv2d::new(1, 1, (3, 3), (1, 1), (0, 0), false).unwrap();
        conv.weight = Tensor::full(conv.weight.shape(), 1.0);
        let out = conv2d(&Tensor::full(Shape::new(1, 1, 3, 3), 1.0), &conv).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(Shape::new(2, 1, 4, 5), -1.0, 1.0, &mut rng);
        let mut conv = Conv2d::new(1, 1, (1, 1), (1, 1), (0, 0), false).unwrap();
        conv.weight = Tensor::full(conv.weight.shape(), 1.0);
        assert_eq!(conv2d(&x, &conv).unwrap(), x);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (stride, pad) in [((1, 1), (0, 0)), ((1, 1), (1, 1)), ((2, 2), (1, 1)), ((2, 1), (2, 0))] {
            let x = Tensor::uniform(Shape::new(1, 2, 8, 8), -1.0, 1.0, &mut rng);
            let mut conv = Conv2d::new(2, 4, (3, 3), stride, pad, true).unwrap();
            conv.weight = Tensor::uniform(conv.weight.shape(), -1.0, 1.0, &mut rng);
            conv.bias = Some(Tensor::uniform(Shape::new(1, 4, 1, 1), -1.0, 1.0, &mut rng));
            let fast = conv2d(&x, &conv).unwrap();
            let slow = naive(&x, &conv);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn output_extent_formula() {
        let conv = Conv2d::new(3, 8, (7, 7), (2, 2), (3, 3), false).unwrap();
        let s = conv.output_shape(Shape::new(1, 3, 384, 128)).unwrap();
        assert_eq!((s.h, s.w), (192, 64));
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let conv = Conv2d::new(3, 8, (3, 3), (1, 1), (1, 1), false).unwrap();
        let err = conv2d(&Tensor::zeros(Shape::new(1, 2, 5, 5)), &conv).unwrap_err();
        assert!(matches!(err, Error::Shape { dim: "c", .. }), "{err}");
    }

    #[test]
    fn kernel_larger_than_padded_input() {
        let conv = Conv2d::new(1, 1, (5, 5), (1, 1), (0, 0), false).unwrap();
        assert!(conv2d(&Tensor::zeros(Shape::new(1, 1, 3, 8)), &conv).is_err());
    }

    #[test]
    fn zero_stride_rejected() {
        assert!(Conv2d::new(1, 1, (3, 3), (0, 1), (0, 0), false).is_err());
    }
}
