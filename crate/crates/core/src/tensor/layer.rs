use super::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, global_max_pool,
    global_max_pool_backward, linear, linear_backward, pool2d, pool2d_backward, BatchNorm, BnCache, Conv2d, Linear, Pool2d, PoolKind, Shape, Tensor,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batchnorm.
    Train,
    /// Running statistics; every layer is a per-sample map.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Relu,
    MaxPool,
    AvgPool,
    Linear,
    GlobalMaxPool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    Pool(Pool2d),
    Linear(Linear),
    GlobalMaxPool,
}

#[derive(Clone, Debug)]
pub enum LayerCache {
    Input(Tensor),
    Bn(BnCache),
    Pool { input_shape: Shape, argmax: Vec<usize> },
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu => LayerKind::Relu,
            Layer::Pool(p) if p.kind == PoolKind::Max => LayerKind::MaxPool,
            Layer::Pool(_) => LayerKind::AvgPool,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::GlobalMaxPool => LayerKind::GlobalMaxPool,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
        Ok(match self {
            Layer::Conv(c) => (conv2d(x, c)?, LayerCache::Input(x.clone())),
            Layer::BatchNorm(bn) => {
                let (y, cache) = batchnorm(x, bn, mode == Mode::Train)?;
                (y, LayerCache::Bn(cache))
            }
            Layer::Relu => (x.map(|v| v.max(0.0)), LayerCache::Input(x.clone())),
            Layer::Pool(p) => {
                let (y, argmax) = pool2d(x, p)?;
                (
                    y,
                    LayerCache::Pool {
                        input_shape: x.shape(),
                        argmax,
                    },
                )
            }
            Layer::Linear(l) => (linear(x, l)?, LayerCache::Input(x.clone())),
            Layer::GlobalMaxPool => {
                let (y, argmax) = global_max_pool(x)?;
                (
                    y,
                    LayerCache::Pool {
                        input_shape: x.shape(),
                        argmax,
                    },
                )
            }
        })
    }

    /// Forward without keeping a cache.
    pub fn apply(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => conv2d(x, c),
            Layer::Relu => Ok(x.map(|v| v.max(0.0))),
            Layer::Linear(l) => linear(x, l),
            Layer::Pool(p) => Ok(pool2d(x, p)?.0),
            Layer::BatchNorm(bn) => Ok(batchnorm(x, bn, mode == Mode::Train)?.0),
            Layer::GlobalMaxPool => Ok(global_max_pool(x)?.0),
        }
    }

    /// Returns the input gradient and parameter gradients in [`Layer::params`] order.
    pub fn backward(&self, cache: &LayerCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Input(x)) => {
                let g = conv2d_backward(x, c, grad_out)?;
                let mut params = vec![g.weight];
                params.extend(g.bias);
                Ok((g.input, params))
            }
            (Layer::BatchNorm(bn), LayerCache::Bn(cache)) => {
                let (gi, gg, gb) = batchnorm_backward(bn, cache, grad_out)?;
                Ok((gi, vec![gg, gb]))
            }
            (Layer::Relu, LayerCache::Input(x)) => {
                if x.shape() != grad_out.shape() {
                    return Err(Error::InvalidShape {
                        op: "relu_backward",
                        reason: format!("gradient {} vs input {}", grad_out.shape(), x.shape()),
                    });
                }
                let data = x
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                Ok((Tensor::from_vec(x.shape(), data)?, Vec::new()))
            }
            (Layer::Pool(p), LayerCache::Pool { input_shape, argmax }) => {
                Ok((pool2d_backward(*input_shape, p, argmax, grad_out)?, Vec::new()))
            }
            (Layer::GlobalMaxPool, LayerCache::Pool { input_shape, argmax }) => {
                Ok((global_max_pool_backward(*input_shape, argmax, grad_out)?, Vec::new()))
            }
            (Layer::Linear(l), LayerCache::Input(x)) => {
                let (gi, gw, gb) = linear_backward(x, l, grad_out)?;
                let mut params = vec![gw];
                params.extend(gb);
                Ok((gi, params))
            }
            _ => Err(Error::InvalidParams(format!(
                "cache does not belong to a {:?} layer",
                self.kind()
            ))),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Linear(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::Relu | Layer::Pool(_) | Layer::GlobalMaxPool => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Linear(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::Relu | Layer::Pool(_) | Layer::GlobalMaxPool => Vec::new(),
        }
    }

    /// Non-trainable state (batchnorm running statistics).
    pub fn buffers(&self) -> Vec<&Tensor> {
        match self {
            Layer::BatchNorm(bn) => vec![&bn.running_mean, &bn.running_var],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::BatchNorm(bn) => vec![&mut bn.running_mean, &mut bn.running_var],
            _ => Vec::new(),
        }
    }

    pub fn update_running(&mut self, cache: &LayerCache) {
        if let (Layer::BatchNorm(bn), LayerCache::Bn(c)) = (self, cache) {
            bn.update_running(c);
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(c) => c.output_shape(input),
            Layer::Pool(p) => p.output_shape(input),
            Layer::Linear(l) => Ok(Shape::new(input.n, l.out_features(), 1, 1)),
            Layer::GlobalMaxPool => Ok(Shape::new(input.n, input.c, 1, 1)),
            Layer::BatchNorm(_) | Layer::Relu => Ok(input),
        }
    }
}

/// A linear chain of layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

#[derive(Clone, Debug, Default)]
pub struct SequentialCache(pub Vec<LayerCache>);

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, SequentialCache)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward(&cur, mode)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, SequentialCache(caches)))
    }

    pub fn apply(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.apply(&cur, mode)?;
        }
        Ok(cur)
    }

    /// Parameter gradients are returned flattened in [`Sequential::params`] order.
    pub fn backward(&self, cache: &SequentialCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut grad = grad_out.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, c) in self.layers.iter().zip(&cache.0).rev() {
            let (gi, gp) = layer.backward(c, &grad)?;
            per_layer.push(gp);
            grad = gi;
        }
        per_layer.reverse();
        Ok((grad, per_layer.into_iter().flatten().collect()))
    }

    pub fn update_running(&mut self, cache: &SequentialCache) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.0) {
            layer.update_running(c);
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn buffers(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::buffers).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::buffers_mut).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.layers.iter().try_fold(input, |s, l| l.output_shape(s))
    }
}
