//! Finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Layer, Mode, Sequential, Tensor};
use crate::model::loss::{batch_hard_triplet_loss, cross_entropy_loss, Reduction};
use crate::{Error, Result};

/// A scalar function of one tensor with an analytic gradient.
pub trait Differentiable {
    fn evaluate(&self, x: &Tensor) -> Result<(f64, Tensor)>;

    fn value(&self, x: &Tensor) -> Result<f64> {
        Ok(self.evaluate(x)?.0)
    }
}

impl<F> Differentiable for F
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    fn evaluate(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        self(x)
    }
}

/// Scalar reduction applied to the output of an [`OpGraph`].
#[derive(Clone, Debug)]
pub enum LossHead {
    /// `sum(weights * y)`; weights must match the output shape.
    Weighted(Tensor),
    CrossEntropy { labels: Vec<usize> },
    Triplet { labels: Vec<usize>, margin: f64 },
}

/// Layer chain followed by a scalar loss.
#[derive(Clone, Debug)]
pub struct OpGraph {
    pub net: Sequential,
    pub mode: Mode,
    pub head: LossHead,
}

impl OpGraph {
    pub fn new(layers: Vec<Layer>, mode: Mode, head: LossHead) -> Self {
        Self {
            net: Sequential::new(layers),
            mode,
            head,
        }
    }

    fn head_loss(&self, y: &Tensor) -> Result<(f64, Tensor)> {
        match &self.head {
            LossHead::Weighted(w) => {
                if w.shape() != y.shape() {
                    return Err(Error::InvalidShape {
                        op: "grad_check",
                        reason: format!("loss weights {} vs output {}", w.shape(), y.shape()),
                    });
                }
                let v = w.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                Ok((v, w.clone()))
            }
            LossHead::CrossEntropy { labels } => {
                let l = cross_entropy_loss(y, labels, Reduction::Sum)?;
                Ok((l.value, l.grad))
            }
            LossHead::Triplet { labels, margin } => {
                let l = batch_hard_triplet_loss(y, labels, *margin, Reduction::Sum)?;
                Ok((l.value, l.grad))
            }
        }
    }

    /// Value and gradient with respect to every parameter tensor.
    pub fn evaluate_params(&self, x: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let (y, cache) = self.net.forward(x, self.mode)?;
        let (v, g) = self.head_loss(&y)?;
        let (_, gp) = self.net.backward(&cache, &g)?;
        Ok((v, gp))
    }

    /// View of this graph as a function of parameter tensor `index` (in
    /// [`Sequential::params`] order), at fixed input.
    pub fn param_probe<'a>(&'a self, input: &'a Tensor, index: usize) -> ParamProbe<'a> {
        ParamProbe {
            graph: self,
            input,
            index,
        }
    }

    pub fn param(&self, index: usize) -> Option<&Tensor> {
        self.net.params().get(index).copied()
    }
}

impl Differentiable for OpGraph {
    fn evaluate(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let (y, cache) = self.net.forward(x, self.mode)?;
        let (v, g) = self.head_loss(&y)?;
        let (gi, _) = self.net.backward(&cache, &g)?;
        Ok((v, gi))
    }
}

pub struct ParamProbe<'a> {
    graph: &'a OpGraph,
    input: &'a Tensor,
    index: usize,
}

impl Differentiable for ParamProbe<'_> {
    fn evaluate(&self, p: &Tensor) -> Result<(f64, Tensor)> {
        let mut g = self.graph.clone();
        let mut params = g.net.params_mut();
        let slot = params.get_mut(self.index).ok_or_else(|| {
            Error::InvalidParams(format!("graph has no parameter tensor {}", self.index))
        })?;
        if slot.shape() != p.shape() {
            return Err(Error::InvalidShape {
                op: "param_probe",
                reason: format!("parameter {} vs probe {}", slot.shape(), p.shape()),
            });
        }
        **slot = p.clone();
        let (v, mut grads) = g.evaluate_params(self.input)?;
        Ok((v, grads.swap_remove(self.index)))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Check a random subset of coordinates instead of all of them.
    pub max_probes: Option<usize>,
    pub seed: u64,
    /// Relative disagreement between one-sided differences that marks a kink.
    pub kink_tolerance: f64,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_probes: None,
            seed: 0,
            kink_tolerance: 1e-2,
            abs_floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinates compared.
    pub probes: usize,
    /// Coordinates skipped because the function is not differentiable there.
    pub flagged: Vec<usize>,
    pub passed: bool,
}

/// Checks with default options at the given tolerance.
pub fn grad_check<D: Differentiable + ?Sized>(f: &D, input: &Tensor, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(
        f,
        input,
        &GradCheckOptions {
            tolerance,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<D: Differentiable + ?Sized>(
    f: &D,
    input: &Tensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !input.is_finite() {
        return Err(Error::NonFinite("grad_check input".into()));
    }
    let (f0, analytic) = f.evaluate(input)?;
    if analytic.shape() != input.shape() {
        return Err(Error::InvalidShape {
            op: "grad_check",
            reason: format!("gradient {} vs input {}", analytic.shape(), input.shape()),
        });
    }
    let mut order: Vec<usize> = (0..input.len()).collect();
    let target = match opts.max_probes {
        Some(m) => {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
            m.min(order.len())
        }
        None => order.len(),
    };

    let h = opts.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        probes: 0,
        flagged: Vec::new(),
        passed: true,
    };
    let mut x = input.clone();
    // Flagged coordinates do not count toward `target`, so a subset check
    // moves on to the next coordinate in the shuffled order.
    for &i in &order {
        if report.probes >= target {
            break;
        }
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let fp = f.value(&x)?;
        x.data_mut()[i] = orig - h;
        let fm = f.value(&x)?;
        x.data_mut()[i] = orig;

        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        if (fwd - bwd).abs() > opts.kink_tolerance * 1f64.max(fwd.abs()).max(bwd.abs()) {
            report.flagged.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(opts.abs_floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.probes += 1;
    }
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}

/// Result of one check in [`kernel_suite`].
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub op: &'static str,
    /// `"input"` or the parameter index.
    pub wrt: String,
    pub report: GradCheckReport,
}

fn check_graph(op: &'static str, g: &OpGraph, x: &Tensor, opts: &GradCheckOptions, out: &mut Vec<SuiteEntry>) -> Result<()> {
    out.push(SuiteEntry {
        op,
        wrt: "input".into(),
        report: grad_check_with(g, x, opts)?,
    });
    for i in 0..g.net.params().len() {
        let p = g.param(i).expect("index in range").clone();
        out.push(SuiteEntry {
            op,
            wrt: format!("param{i}"),
            report: grad_check_with(&g.param_probe(x, i), &p, opts)?,
        });
    }
    Ok(())
}

/// Finite-difference checks of every differentiable kernel and both losses
/// on small random instances.
pub fn kernel_suite(seed: u64, tolerance: f64) -> Result<Vec<SuiteEntry>> {
    use super::{BatchNorm, Conv2d, Linear, Pool2d, PoolKind, Shape};
    use crate::partition::{pool_stripes, StripeBoundaries, StripePool};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        tolerance,
        ..GradCheckOptions::default()
    };
    let mut out = Vec::new();
    let weighted = |shape: Shape, rng: &mut ChaCha8Rng| LossHead::Weighted(Tensor::uniform(shape, -1.0, 1.0, rng));

    let x = Tensor::uniform(Shape::new(2, 2, 6, 5), -1.0, 1.0, &mut rng);
    let mut conv = Conv2d::new(2, 3, (3, 3), (2, 1), (1, 1), true)?;
    conv.init_kaiming(&mut rng);
    if let Some(b) = &mut conv.bias {
        *b = Tensor::uniform(b.shape(), -0.5, 0.5, &mut rng);
    }
    let shape = conv.output_shape(x.shape())?;
    let g = OpGraph::new(vec![Layer::Conv(conv)], Mode::Eval, weighted(shape, &mut rng));
    check_graph("conv2d", &g, &x, &opts, &mut out)?;

    for (op, mode) in [("batchnorm_train", Mode::Train), ("batchnorm_eval", Mode::Eval)] {
        let mut bn = BatchNorm::new(2);
        bn.gamma = Tensor::uniform(bn.gamma.shape(), 0.5, 1.5, &mut rng);
        bn.beta = Tensor::uniform(bn.beta.shape(), -0.5, 0.5, &mut rng);
        bn.running_mean = Tensor::uniform(bn.running_mean.shape(), -0.3, 0.3, &mut rng);
        bn.running_var = Tensor::uniform(bn.running_var.shape(), 0.5, 1.5, &mut rng);
        let g = OpGraph::new(vec![Layer::BatchNorm(bn)], mode, weighted(x.shape(), &mut rng));
        check_graph(op, &g, &x, &opts, &mut out)?;
    }

    let g = OpGraph::new(vec![Layer::Relu], Mode::Eval, weighted(x.shape(), &mut rng));
    check_graph("relu", &g, &x, &opts, &mut out)?;

    for (op, kind) in [("max_pool", PoolKind::Max), ("avg_pool", PoolKind::Avg)] {
        let pool = Pool2d::new(kind, (3, 3), (2, 2), (1, 1))?;
        let shape = pool.output_shape(x.shape())?;
        let g = OpGraph::new(vec![Layer::Pool(pool)], Mode::Eval, weighted(shape, &mut rng));
        check_graph(op, &g, &x, &opts, &mut out)?;
    }

    let g = OpGraph::new(
        vec![Layer::GlobalMaxPool],
        Mode::Eval,
        weighted(Shape::new(2, 2, 1, 1), &mut rng),
    );
    check_graph("global_max_pool", &g, &x, &opts, &mut out)?;

    let v = Tensor::uniform(Shape::new(6, 5, 1, 1), -1.0, 1.0, &mut rng);
    let mut lin = Linear::new(5, 4, true);
    lin.init_kaiming(&mut rng);
    lin.bias = Some(Tensor::uniform(Shape::new(1, 4, 1, 1), -0.5, 0.5, &mut rng));
    let g = OpGraph::new(
        vec![Layer::Linear(lin.clone())],
        Mode::Eval,
        weighted(Shape::new(6, 4, 1, 1), &mut rng),
    );
    check_graph("linear", &g, &v, &opts, &mut out)?;

    let g = OpGraph::new(
        vec![Layer::Linear(lin.clone())],
        Mode::Eval,
        LossHead::CrossEntropy {
            labels: vec![0, 3, 1, 2, 3, 0],
        },
    );
    check_graph("cross_entropy", &g, &v, &opts, &mut out)?;

    let g = OpGraph::new(
        vec![Layer::Linear(lin)],
        Mode::Eval,
        LossHead::Triplet {
            labels: vec![0, 0, 1, 1, 2, 2],
            margin: 0.6,
        },
    );
    check_graph("batch_hard_triplet", &g, &v, &opts, &mut out)?;

    for (op, kind) in [("stripe_max_pool", StripePool::Max), ("stripe_avg_pool", StripePool::Avg)] {
        let bounds = [StripeBoundaries::new(vec![0, 2, 3, 6], 6)?];
        let w: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(Shape::new(2, 2, 1, 1), -1.0, 1.0, &mut rng))
            .collect();
        let f = |t: &Tensor| -> Result<(f64, Tensor)> {
            let pooled = pool_stripes(t, &bounds, kind)?;
            let v = pooled
                .stripes
                .iter()
                .zip(&w)
                .map(|(p, w)| p.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            Ok((v, pooled.backward(&w)?))
        };
        out.push(SuiteEntry {
            op,
            wrt: "input".into(),
            report: grad_check_with(&f, &x, &opts)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Linear, Shape};
    use rand::SeedableRng;

    #[test]
    fn linear_layer_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = Linear::new(6, 4, true);
        l.init_kaiming(&mut rng);
        let w = Tensor::uniform(Shape::new(3, 4, 1, 1), -1.0, 1.0, &mut rng);
        let g = OpGraph::new(vec![Layer::Linear(l)], Mode::Eval, LossHead::Weighted(w));
        let x = Tensor::uniform(Shape::new(3, 6, 1, 1), -1.0, 1.0, &mut rng);
        let r = grad_check(&g, &x, 1e-8).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.probes, 18);
        let r = grad_check(&g.param_probe(&x, 0), g.param(0).unwrap(), 1e-8).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn relu_at_zero_is_flagged() {
        let g = OpGraph::new(
            vec![Layer::Relu],
            Mode::Eval,
            LossHead::Weighted(Tensor::full(Shape::new(1, 1, 1, 1), 1.0)),
        );
        let r = grad_check(&g, &Tensor::zeros(Shape::new(1, 1, 1, 1)), 1e-4).unwrap();
        assert_eq!(r.flagged, vec![0]);
        assert_eq!(r.probes, 0);
    }

    #[test]
    fn subset_resamples_past_kinks() {
        let g = OpGraph::new(
            vec![Layer::Relu],
            Mode::Eval,
            LossHead::Weighted(Tensor::full(Shape::new(1, 1, 1, 4), 1.0)),
        );
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.0, 0.5, 0.0, -0.5]).unwrap();
        let opts = GradCheckOptions {
            max_probes: Some(2),
            ..Default::default()
        };
        let r = grad_check_with(&g, &x, &opts).unwrap();
        assert_eq!(r.probes, 2);
        assert_eq!(r.flagged.len(), 2);
        assert!(r.passed);
    }

    #[test]
    fn wrong_gradient_fails() {
        let f = |x: &Tensor| -> Result<(f64, Tensor)> {
            let v = x.data().iter().map(|a| a * a).sum();
            Ok((v, x.map(|a| 3.0 * a)))
        };
        let x = Tensor::full(Shape::new(1, 1, 1, 3), 0.7);
        assert!(!grad_check(&f, &x, 1e-4).unwrap().passed);
    }

    #[test]
    fn kernel_suite_passes() {
        let entries = kernel_suite(11, 1e-4).unwrap();
        assert!(entries.len() > 20);
        for e in &entries {
            assert!(e.report.passed && e.report.probes > 0, "{} {}: {:?}", e.op, e.wrt, e.report);
        }
    }
}
