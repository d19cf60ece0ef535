use rand::Rng;

use super::{Shape, Tensor};
use crate::{Error, Result};

/// Fully connected map over the flattened sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(out_features, in_features, 1, 1)`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(Shape::new(out_features, in_features, 1, 1)),
            bias: bias.then(|| Tensor::zeros(Shape::new(1, out_features, 1, 1))),
        }
    }

    pub fn init_kaiming<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let bound = (6.0 / self.in_features() as f64).sqrt();
        self.weight = Tensor::uniform(self.weight.shape(), -bound, bound, rng);
    }

    /// Small symmetric init, used for classifier layers.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        self.weight = Tensor::uniform(self.weight.shape(), -scale, scale, rng);
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().n
    }

    fn check(&self, input: Shape) -> Result<()> {
        if input.sample_len() != self.in_features() {
            return Err(Error::Shape {
                op: "linear",
                dim: "features",
                expected: self.in_features(),
                actual: input.sample_len(),
            });
        }
        Ok(())
    }
}

pub fn linear(input: &Tensor, layer: &Linear) -> Result<Tensor> {
    let s = input.shape();
    layer.check(s)?;
    let (fi, fo) = (layer.in_features(), layer.out_features());
    let w = layer.weight.data();
    let mut out = Vec::with_capacity(s.n * fo);
    for n in 0..s.n {
        let x = input.sample(n);
        for o in 0..fo {
            let row = &w[o * fi..(o + 1) * fi];
            let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            out.push(dot + layer.bias.as_ref().map_or(0.0, |b| b.data()[o]));
        }
    }
    Tensor::from_vec(Shape::new(s.n, fo, 1, 1), out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward(input: &Tensor, layer: &Linear, grad_out: &Tensor) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let s = input.shape();
    layer.check(s)?;
    let (fi, fo) = (layer.in_features(), layer.out_features());
    if grad_out.shape() != Shape::new(s.n, fo, 1, 1) {
        return Err(Error::InvalidShape {
            op: "linear_backward",
            reason: format!("gradient {} for {} outputs", grad_out.shape(), fo),
        });
    }
    let w = layer.weight.data();
    let mut gin = Tensor::zeros(s);
    let mut gw = Tensor::zeros(layer.weight.shape());
    let mut gb = layer.bias.as_ref().map(|b| Tensor::zeros(b.shape()));
    for n in 0..s.n {
        let x = input.sample(n);
        let g = grad_out.sample(n);
        let gi = &mut gin.data_mut()[n * fi..(n + 1) * fi];
        for o in 0..fo {
            let go = g[o];
            let row = &w[o * fi..(o + 1) * fi];
            gi.iter_mut().zip(row).for_each(|(a, b)| *a += go * b);
            gw.data_mut()[o * fi..(o + 1) * fi]
                .iter_mut()
                .zip(x)
                .for_each(|(a, b)| *a += go * b);
            if let Some(gb) = &mut gb {
                gb.data_mut()[o] += go;
            }
        }
    }
    Ok((gin, gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn computes_affine_map() {
        let mut l = Linear::new(2, 1, true);
        l.weight = Tensor::from_vec(l.weight.shape(), vec![2.0, -1.0]).unwrap();
        l.bias = Some(Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.5]).unwrap());
        let x = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![1.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(linear(&x, &l).unwrap().data(), &[1.5, 4.5]);
    }

    #[test]
    fn feature_mismatch() {
        let l = Linear::new(3, 1, false);
        assert!(linear(&Tensor::zeros(Shape::new(1, 2, 1, 1)), &l).is_err());
    }
}
