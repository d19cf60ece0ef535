//! Dense NCHW tensors and the kernels built on them.

mod conv;
mod gradcheck;
mod layer;
mod linear;
mod norm;
mod pool;

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use conv::{conv2d, conv2d_backward, Conv2d, ConvGrads};
pub use gradcheck::{grad_check, grad_check_with, kernel_suite, ParamProbe, SuiteEntry, Differentiable, GradCheckOptions, GradCheckReport, LossHead, OpGraph};
pub use layer::{Layer, LayerCache, LayerKind, Mode, Sequential, SequentialCache};
pub use linear::{linear, linear_backward, Linear};
pub use norm::{batchnorm, batchnorm_backward, BatchNorm, BnCache, BN_EPSILON, BN_MOMENTUM};
pub use pool::{
    global_max_pool, global_max_pool_backward, pool2d, pool2d_backward, Pool2d, PoolKind,
};

/// Batch, channel, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one sample.
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major rank-4 tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape {
                op: "from_vec",
                dim: "numel",
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Values drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| rng.random_range(lo..hi))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.shape.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Copies sample `i` into a batch-of-one tensor.
    pub fn sample_tensor(&self, i: usize) -> Tensor {
        Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.sample(i).to_vec(),
        }
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        ensure_same(self.shape, other.shape, "add_assign")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Reorders samples so that output sample `i` is input sample `perm[i]`.
    pub fn permute_batch(&self, perm: &[usize]) -> Result<Tensor> {
        if perm.len() != self.shape.n {
            return Err(Error::Shape {
                op: "permute_batch",
                dim: "n",
                expected: self.shape.n,
                actual: perm.len(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.sample(p));
        }
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    /// Rows `[start, end)` of every channel of every sample.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape;
        if start >= end || end > s.h {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                reason: format!("row range [{start}, {end}) over height {}", s.h),
            });
        }
        let out_shape = Shape { h: end - start, ..s };
        let mut data = Vec::with_capacity(out_shape.numel());
        for plane in self.data.chunks(s.plane()) {
            data.extend_from_slice(&plane[start * s.w..end * s.w]);
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Stacks tensors along the height axis (inverse of repeated `slice_rows`).
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            op: "concat_rows",
            reason: "no parts".into(),
        })?;
        let s0 = first.shape;
        for p in parts {
            for (dim, e, a) in [("n", s0.n, p.shape.n), ("c", s0.c, p.shape.c), ("w", s0.w, p.shape.w)] {
                if e != a {
                    return Err(Error::Shape {
                        op: "concat_rows",
                        dim,
                        expected: e,
                        actual: a,
                    });
                }
            }
        }
        let h: usize = parts.iter().map(|p| p.shape.h).sum();
        let shape = Shape { h, ..s0 };
        let mut data = Vec::with_capacity(shape.numel());
        for plane in 0..s0.n * s0.c {
            for p in parts {
                let len = p.shape.plane();
                data.extend_from_slice(&p.data[plane * len..(plane + 1) * len]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Writes the little-endian blob: four `u64` dims then `f64` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for d in self.shape.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Tensor> {
        let mut dims = [0usize; 4];
        let mut word = [0u8; 8];
        for d in &mut dims {
            r.read_exact(&mut word)
                .map_err(|e| Error::Format(format!("tensor header: {e}")))?;
            *d = usize::try_from(u64::from_le_bytes(word))
                .map_err(|_| Error::Format("tensor dimension overflows usize".into()))?;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor shape {shape} overflows")))?;
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Format(format!("tensor body ({shape}): {e}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Tensor { shape, data })
    }
}

fn ensure_same(a: Shape, b: Shape, op: &'static str) -> Result<()> {
    for (dim, e, x) in [("n", a.n, b.n), ("c", a.c, b.c), ("h", a.h, b.h), ("w", a.w, b.w)] {
        if e != x {
            return Err(Error::Shape {
                op,
                dim,
                expected: e,
                actual: x,
            });
        }
    }
    Ok(())
}

/// Concatenates tensors along the batch axis, preserving part order.
pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape {
        op: "concat_batch",
        reason: "no parts".into(),
    })?;
    let s0 = first.shape;
    for p in &parts[1..] {
        for (dim, e, a) in [("c", s0.c, p.shape.c), ("h", s0.h, p.shape.h), ("w", s0.w, p.shape.w)] {
            if e != a {
                return Err(Error::Shape {
                    op: "concat_batch",
                    dim,
                    expected: e,
                    actual: a,
                });
            }
        }
    }
    let n = parts.iter().map(|p| p.shape.n).sum();
    let mut data = Vec::with_capacity(n * s0.sample_len());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        shape: Shape { n, ..s0 },
        data,
    })
}

/// Splits the batch axis into `shards` equal contiguous pieces.
pub fn split_batch(input: &Tensor, shards: usize) -> Result<Vec<Tensor>> {
    let s = input.shape;
    if shards == 0 || !s.n.is_multiple_of(shards) {
        return Err(Error::InvalidShape {
            op: "split_batch",
            reason: format!("batch {} not divisible into {shards} shards", s.n),
        });
    }
    let shape = Shape { n: s.n / shards, ..s };
    Ok(input
        .data
        .chunks(shape.numel().max(1))
        .take(shards)
        .map(|c| Tensor {
            shape,
            data: c.to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn concat_orders_parts() {
        let a = Tensor::full(Shape::new(1, 2, 3, 3), 1.0);
        let b = Tensor::full(Shape::new(1, 2, 3, 3), 2.0);
        let c = concat_batch(&[a.clone(), b]).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 2, 3, 3));
        assert_eq!(c.sample(0), a.data());
        assert!(c.sample(1).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn single_part_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(Shape::new(3, 2, 2, 2), -1.0, 1.0, &mut rng);
        assert_eq!(concat_batch(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(split_batch(&a, 1).unwrap(), vec![a]);
    }

    #[test]
    fn concat_rejects_mismatch() {
        let a = Tensor::zeros(Shape::new(1, 2, 3, 3));
        let b = Tensor::zeros(Shape::new(1, 2, 4, 3));
        let err = concat_batch(&[a, b]).unwrap_err();
        assert!(err.to_string().contains('h'), "{err}");
    }

    #[test]
    fn split_rejects_indivisible() {
        let a = Tensor::zeros(Shape::new(3, 1, 1, 1));
        assert!(split_batch(&a, 2).is_err());
        assert!(split_batch(&a, 0).is_err());
    }

    #[test]
    fn split_shards_are_equal() {
        let a = Tensor::zeros(Shape::new(6, 2, 1, 1));
        let parts = split_batch(&a, 3).unwrap();
        assert!(parts.iter().all(|p| p.shape() == Shape::new(2, 2, 1, 1)));
    }

    #[test]
    fn rows_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::uniform(Shape::new(2, 3, 6, 4), -1.0, 1.0, &mut rng);
        let parts: Vec<_> = [(0, 1), (1, 4), (4, 6)]
            .iter()
            .map(|&(s, e)| a.slice_rows(s, e).unwrap())
            .collect();
        assert_eq!(Tensor::concat_rows(&parts).unwrap(), a);
    }

    #[test]
    fn blob_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(Shape::new(2, 3, 4, 5), -1e3, 1e3, &mut rng);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 32 + a.len() * 8);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 3);
        assert_eq!(Tensor::read_from(buf.as_slice()).unwrap(), a);
        assert!(Tensor::read_from(&buf[..40]).is_err());
    }

    proptest! {
        #[test]
        fn split_inverts_concat(n in 1usize..4, shards in 1usize..5, c in 1usize..3, h in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parts: Vec<Tensor> = (0..shards)
                .map(|_| Tensor::uniform(Shape::new(n, c, h, 2), -1.0, 1.0, &mut rng))
                .collect();
            let joined = concat_batch(&parts).unwrap();
            prop_assert_eq!(split_batch(&joined, shards).unwrap(), parts);
        }
    }
}
