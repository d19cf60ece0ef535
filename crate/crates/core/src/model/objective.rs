use serde::Serialize;

use super::config::RmglConfig;
use super::loss::{compensated_sum, cross_entropy_loss, triplet_loss};
use super::network::{BundleGrad, FeatureBundle};
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

/// Loss value with its named terms (already weighted).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<(String, f64)>,
}

impl LossBreakdown {
    /// Sum of the terms whose name starts with `prefix`.
    pub fn sum_prefix(&self, prefix: &str) -> f64 {
        compensated_sum(self.terms.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| *v))
    }
}

/// One classification term per head plus one triplet term per branch on
/// the concatenation of that branch's vectors.
pub fn total_loss(bundle: &FeatureBundle, labels: &[usize], config: &RmglConfig) -> Result<(LossBreakdown, BundleGrad)> {
    if labels.len() != bundle.batch {
        return Err(Error::Shape {
            op: "total_loss",
            dim: "n",
            expected: bundle.batch,
            actual: labels.len(),
        });
    }
    let mut terms = Vec::new();
    let mut score_grads = Vec::with_capacity(bundle.head_count());
    let mut feature_grads: Vec<Tensor> = bundle.features.iter().map(|f| Tensor::zeros(f.shape())).collect();
    for (b, heads) in (0..bundle.branches()).map(|b| (b, bundle.branch_heads(b))) {
        for &h in &heads {
            let mut ce = cross_entropy_loss(&bundle.scores[h], labels, config.reduction)?;
            ce.grad.scale(config.cls_weight);
            terms.push((format!("cls/{}", bundle.keys[h]), config.cls_weight * ce.value));
            score_grads.push((h, ce.grad));
        }
        let tri = triplet_loss(&bundle.branch_concat(b), labels, config.margin, config.reduction)?;
        terms.push((format!("tri/b{b}"), config.triplet_weight * tri.value));
        let width = heads.len() * bundle.dim;
        for n in 0..bundle.batch {
            let row = &tri.grad.data()[n * width..(n + 1) * width];
            for (slot, &h) in heads.iter().enumerate() {
                let dst = &mut feature_grads[h].data_mut()[n * bundle.dim..(n + 1) * bundle.dim];
                for (d, s) in dst.iter_mut().zip(&row[slot * bundle.dim..(slot + 1) * bundle.dim]) {
                    *d = config.triplet_weight * s;
                }
            }
        }
    }
    score_grads.sort_by_key(|(h, _)| *h);
    let total = compensated_sum(terms.iter().map(|(_, v)| *v));
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("total loss {total}")));
    }
    Ok((
        LossBreakdown { total, terms },
        BundleGrad {
            features: feature_grads,
            scores: score_grads.into_iter().map(|(_, g)| g).collect(),
        },
    ))
}

/// Zero gradients shaped like `bundle`.
pub fn zero_grad(bundle: &FeatureBundle) -> BundleGrad {
    let z = |t: &Tensor| Tensor::zeros(Shape::new(t.shape().n, t.shape().c, 1, 1));
    BundleGrad {
        features: bundle.features.iter().map(z).collect(),
        scores: bundle.scores.iter().map(z).collect(),
    }
}
