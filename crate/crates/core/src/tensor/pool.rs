use super::conv::out_extent;
use super::{Shape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Zero padding counts toward the window area.
    Avg,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pool2d {
    pub kind: PoolKind,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Pool2d {
    pub fn new(kind: PoolKind, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidParams(format!(
                "pool kernel {kernel:?} and stride {stride:?} must be >= 1"
            )));
        }
        if padding.0 >= kernel.0 || padding.1 >= kernel.1 {
            return Err(Error::InvalidParams(format!(
                "pool padding {padding:?} must be smaller than kernel {kernel:?}"
            )));
        }
        Ok(Self {
            kind,
            kernel,
            stride,
            padding,
        })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let oh = out_extent(input.h, self.kernel.0, self.stride.0, self.padding.0, "h")?;
        let ow = out_extent(input.w, self.kernel.1, self.stride.1, self.padding.1, "w")?;
        Ok(Shape::new(input.n, input.c, oh, ow))
    }

    fn window(&self, oy: usize, ox: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let y0 = oy * self.stride.0;
        let x0 = ox * self.stride.1;
        let (ph, pw) = self.padding;
        (0..self.kernel.0).flat_map(move |ky| {
            (0..self.kernel.1).filter_map(move |kx| {
                let (y, x) = (y0 + ky, x0 + kx);
                (y >= ph && x >= pw && y - ph < h && x - pw < w).then(|| (y - ph, x - pw))
            })
        })
    }
}

/// Forward pooling. For max pooling the second value holds, per output
/// element, the flat input index that won (first in row-major window order).
pub fn pool2d(input: &Tensor, pool: &Pool2d) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    let os = pool.output_shape(s)?;
    let mut out = Tensor::zeros(os);
    let mut argmax = Vec::new();
    if pool.kind == PoolKind::Max {
        argmax.reserve(os.numel());
    }
    let area = (pool.kernel.0 * pool.kernel.1) as f64;
    let x = input.data();
    let mut o = 0;
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                match pool.kind {
                    PoolKind::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = base;
                        for (y, xx) in pool.window(oy, ox, s.h, s.w) {
                            let i = base + y * s.w + xx;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                        out.data_mut()[o] = best;
                        argmax.push(best_i);
                    }
                    PoolKind::Avg => {
                        let sum: f64 = pool
                            .window(oy, ox, s.h, s.w)
                            .map(|(y, xx)| x[base + y * s.w + xx])
                            .sum();
                        out.data_mut()[o] = sum / area;
                    }
                }
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn pool2d_backward(input_shape: Shape, pool: &Pool2d, argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let os = pool.output_shape(input_shape)?;
    if grad_out.shape() != os {
        return Err(Error::InvalidShape {
            op: "pool2d_backward",
            reason: format!("gradient {} vs output {os}", grad_out.shape()),
        });
    }
    let mut gin = Tensor::zeros(input_shape);
    let g = grad_out.data();
    match pool.kind {
        PoolKind::Max => {
            for (o, &i) in argmax.iter().enumerate() {
                gin.data_mut()[i] += g[o];
            }
        }
        PoolKind::Avg => {
            let area = (pool.kernel.0 * pool.kernel.1) as f64;
            let s = input_shape;
            let mut o = 0;
            for plane in 0..s.n * s.c {
                let base = plane * s.plane();
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        for (y, x) in pool.window(oy, ox, s.h, s.w) {
                            gin.data_mut()[base + y * s.w + x] += g[o] / area;
                        }
                        o += 1;
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// Spatial maximum per channel; returns the winning flat index per output.
pub fn global_max_pool(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::InvalidShape {
            op: "global_max_pool",
            reason: format!("empty spatial extent {}x{}", s.h, s.w),
        });
    }
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * s.c);
    let mut argmax = Vec::with_capacity(s.n * s.c);
    for (p, chunk) in input.data().chunks(plane).enumerate() {
        let (mut bi, mut bv) = (0, chunk[0]);
        for (i, &v) in chunk.iter().enumerate().skip(1) {
            if v > bv {
                bv = v;
                bi = i;
            }
        }
        out.push(bv);
        argmax.push(p * plane + bi);
    }
    Ok((Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out)?, argmax))
}

pub fn global_max_pool_backward(input_shape: Shape, argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.len() || argmax.len() != input_shape.n * input_shape.c {
        return Err(Error::InvalidShape {
            op: "global_max_pool_backward",
            reason: format!("gradient {} vs input {input_shape}", grad_out.shape()),
        });
    }
    let mut gin = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gin.data_mut()[i] += g;
    }
    Ok(gin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gmp_small_cases() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_max_pool(&x).unwrap().0.data(), &[4.0]);
        let c = Tensor::full(Shape::new(1, 1, 3, 3), -2.5);
        let (out, idx) = global_max_pool(&c).unwrap();
        assert_eq!(out.data(), &[-2.5]);
        assert_eq!(idx, vec![0], "ties go to the first element");
    }

    #[test]
    fn gmp_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(Shape::new(2, 8, 6, 4), -1.0, 1.0, &mut rng);
        let (out, _) = global_max_pool(&x).unwrap();
        for n in 0..2 {
            for c in 0..8 {
                let mut m = f64::NEG_INFINITY;
                for h in 0..6 {
                    for w in 0..4 {
                        m = m.max(x.at(n, c, h, w));
                    }
                }
                assert_eq!(out.at(n, c, 0, 0), m);
            }
        }
    }

    #[test]
    fn gmp_rejects_empty() {
        assert!(global_max_pool(&Tensor::zeros(Shape::new(1, 1, 0, 3))).is_err());
    }

    #[test]
    fn maxpool_tie_gradient_to_first() {
        let pool = Pool2d::new(PoolKind::Max, (2, 2), (2, 2), (0, 0)).unwrap();
        let x = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        let (y, arg) = pool2d(&x, &pool).unwrap();
        assert_eq!(y.data(), &[1.0]);
        let g = pool2d_backward(x.shape(), &pool, &arg, &Tensor::full(y.shape(), 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avgpool_counts_padding() {
        let pool = Pool2d::new(PoolKind::Avg, (3, 3), (1, 1), (1, 1)).unwrap();
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 9.0);
        let (y, _) = pool2d(&x, &pool).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
    }
}
