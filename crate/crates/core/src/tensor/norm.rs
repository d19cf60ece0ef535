use super::{Shape, Tensor};
use crate::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation over the `(n, h, w)` axes.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        Self {
            gamma: Tensor::full(s, 1.0),
            beta: Tensor::zeros(s),
            running_mean: Tensor::zeros(s),
            running_var: Tensor::full(s, 1.0),
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for t in [&self.beta, &self.running_mean, &self.running_var] {
            if t.len() != c {
                return Err(Error::InvalidParams(format!(
                    "batchnorm statistics length {} != {c} channels",
                    t.len()
                )));
            }
        }
        if let Some((ch, v)) = self
            .running_var
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v + self.eps > 0.0))
        {
            return Err(Error::InvalidParams(format!(
                "batchnorm channel {ch}: running variance {v} plus epsilon {} is not positive",
                self.eps
            )));
        }
        Ok(())
    }

    /// Folds batch statistics from a train-mode forward into the running ones.
    pub fn update_running(&mut self, cache: &BnCache) {
        let Some(stats) = &cache.batch else { return };
        let m = self.momentum;
        let count = stats.count as f64;
        let rm = self.running_mean.data_mut();
        for (r, &b) in rm.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        let rv = self.running_var.data_mut();
        for (r, &b) in rv.iter_mut().zip(&stats.var) {
            let unbiased = if stats.count > 1 { b * count / (count - 1.0) } else { b };
            *r = (1.0 - m) * *r + m * unbiased;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    /// Present for train-mode forwards.
    pub batch: Option<BatchStats>,
}

fn channel_iter(shape: Shape, c: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let plane = shape.plane();
    (0..shape.n).map(move |n| {
        let start = (n * shape.c + c) * plane;
        start..start + plane
    })
}

pub fn batchnorm(input: &Tensor, bn: &BatchNorm, train: bool) -> Result<(Tensor, BnCache)> {
    let s = input.shape();
    if s.c != bn.channels() {
        return Err(Error::Shape {
            op: "batchnorm",
            dim: "c",
            expected: bn.channels(),
            actual: s.c,
        });
    }
    bn.validate()?;
    let x = input.data();
    let count = s.n * s.plane();
    let (means, vars, batch) = if train {
        if count == 0 {
            return Err(Error::InvalidShape {
                op: "batchnorm",
                reason: "train mode needs at least one element per channel".into(),
            });
        }
        let mut means = Vec::with_capacity(s.c);
        let mut vars = Vec::with_capacity(s.c);
        for c in 0..s.c {
            let sum: f64 = channel_iter(s, c).map(|r| x[r].iter().sum::<f64>()).sum();
            let mean = sum / count as f64;
            let sq: f64 = channel_iter(s, c)
                .map(|r| x[r].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum();
            means.push(mean);
            vars.push(sq / count as f64);
        }
        let stats = BatchStats {
            mean: means.clone(),
            var: vars.clone(),
            count,
        };
        (means, vars, Some(stats))
    } else {
        (
            bn.running_mean.data().to_vec(),
            bn.running_var.data().to_vec(),
            None,
        )
    };
    let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for c in 0..s.c {
        let (g, b) = (bn.gamma.data()[c], bn.beta.data()[c]);
        for r in channel_iter(s, c) {
            for i in r {
                let xh = (x[i] - means[c]) * inv_std[c];
                x_hat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((out, BnCache { x_hat, inv_std, batch }))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(
    bn: &BatchNorm,
    cache: &BnCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = grad_out.shape();
    if s != cache.x_hat.shape() {
        return Err(Error::InvalidShape {
            op: "batchnorm_backward",
            reason: format!("gradient {} vs cached {}", s, cache.x_hat.shape()),
        });
    }
    let dy = grad_out.data();
    let xh = cache.x_hat.data();
    let mut gin = Tensor::zeros(s);
    let mut ggamma = Tensor::zeros(bn.gamma.shape());
    let mut gbeta = Tensor::zeros(bn.beta.shape());
    let count = (s.n * s.plane()) as f64;
    for c in 0..s.c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for r in channel_iter(s, c) {
            for i in r {
                sum_dy += dy[i];
                sum_dy_xh += dy[i] * xh[i];
            }
        }
        ggamma.data_mut()[c] = sum_dy_xh;
        gbeta.data_mut()[c] = sum_dy;
        let k = bn.gamma.data()[c] * cache.inv_std[c];
        let train = cache.batch.is_some();
        for r in channel_iter(s, c) {
            for i in r {
                gin.data_mut()[i] = if train {
                    k * (dy[i] - sum_dy / count - xh[i] * sum_dy_xh / count)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    Ok((gin, ggamma, gbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_identity_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(Shape::new(2, 3, 2, 2), -2.0, 2.0, &mut rng);
        let (y, _) = batchnorm(&x, &BatchNorm::new(3), false).unwrap();
        let k = 1.0 / (1.0 + BN_EPSILON).sqrt();
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| (a - b * k).abs() < 1e-15));
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn eval_affine() {
        let mut bn = BatchNorm::new(1);
        bn.gamma = Tensor::full(bn.gamma.shape(), 2.0);
        bn.beta = Tensor::full(bn.beta.shape(), 3.0);
        let (y, _) = batchnorm(&Tensor::full(Shape::new(1, 1, 2, 2), 1.0), &bn, false).unwrap();
        assert!(y.data().iter().all(|v| (v - 5.0).abs() < 1e-4));
    }

    #[test]
    fn train_normalises_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(Shape::new(4, 3, 5, 5), -3.0, 7.0, &mut rng);
        let (y, _) = batchnorm(&x, &BatchNorm::new(3), true).unwrap();
        let s = y.shape();
        for c in 0..3 {
            let vals: Vec<f64> = (0..s.n)
                .flat_map(|n| (0..25).map(move |i| (n, i)))
                .map(|(n, i)| y.at(n, c, i / 5, i % 5))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            // Epsilon shrinks the variance by var / (var + eps).
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn rejects_non_positive_variance() {
        let mut bn = BatchNorm::new(2);
        bn.eps = 0.0;
        bn.running_var = Tensor::from_vec(bn.running_var.shape(), vec![1.0, 0.0]).unwrap();
        let err = batchnorm(&Tensor::zeros(Shape::new(1, 2, 1, 1)), &bn, false).unwrap_err();
        assert!(matches!(err, Error::InvalidParams(_)));
        bn.eps = BN_EPSILON;
        bn.running_var = Tensor::from_vec(bn.running_var.shape(), vec![1.0, -1.0]).unwrap();
        assert!(batchnorm(&Tensor::zeros(Shape::new(1, 2, 1, 1)), &bn, false).is_err());
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut bn = BatchNorm::new(1);
        let x = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![1.0, 3.0]).unwrap();
        let (_, cache) = batchnorm(&x, &bn, true).unwrap();
        bn.update_running(&cache);
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance is 2
        assert!((bn.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }
}
