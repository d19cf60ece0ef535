//! Softmax cross-entropy and batch-hard triplet losses with analytic gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over the batch.
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n.max(1) as f64,
        }
    }
}

/// Loss value with its gradient with respect to the loss input.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `-sum_i log softmax(s_i)[y_i]`. Scores are read per sample, one per class.
pub fn cross_entropy_loss(scores: &Tensor, labels: &[usize], reduction: Reduction) -> Result<LossValue> {
    let s = scores.shape();
    if labels.len() != s.n {
        return Err(Error::Shape {
            op: "cross_entropy_loss",
            dim: "n",
            expected: s.n,
            actual: labels.len(),
        });
    }
    let classes = s.sample_len();
    let k = reduction.factor(s.n);
    let mut grad = Tensor::zeros(s);
    let mut terms = Vec::with_capacity(s.n);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Label { label: y, classes });
        }
        let row = scores.sample(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        terms.push(lse - row[y]);
        let g = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *gj = k * (p - if j == y { 1.0 } else { 0.0 });
        }
    }
    Ok(LossValue {
        value: k * compensated_sum(terms),
        grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Margin {
    /// `[margin + d_pos - d_neg]_+`
    Hard(f64),
    /// `ln(1 + exp(d_pos - d_neg))`
    Soft,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss with a hinge margin.
pub fn batch_hard_triplet_loss(
    features: &Tensor,
    labels: &[usize],
    margin: f64,
    reduction: Reduction,
) -> Result<LossValue> {
    triplet_loss(features, labels, Margin::Hard(margin), reduction)
}

/// Batch-hard triplet loss. For every anchor the farthest same-identity
/// sample and the nearest other-identity sample are mined (first index on
/// ties); the distance gradient at zero distance is taken as zero.
pub fn triplet_loss(features: &Tensor, labels: &[usize], margin: Margin, reduction: Reduction) -> Result<LossValue> {
    let s = features.shape();
    let n = s.n;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "triplet_loss",
            dim: "n",
            expected: n,
            actual: labels.len(),
        });
    }
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if let Some((id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Batch(format!(
            "identity {id} has fewer than 2 samples, no positive pair"
        )));
    }
    if counts.len() < 2 {
        return Err(Error::Batch("triplet loss needs at least two identities".into()));
    }

    let d = s.sample_len();
    let dist: Vec<f64> = (0..n * n)
        .map(|ij| distance(features.sample(ij / n), features.sample(ij % n)))
        .collect();
    let k = reduction.factor(n);
    let mut grad = Tensor::zeros(s);
    let mut terms = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos = None::<(usize, f64)>;
        let mut neg = None::<(usize, f64)>;
        for j in 0..n {
            let dj = dist[a * n + j];
            if labels[j] == labels[a] {
                if j != a && pos.is_none_or(|(_, best)| dj > best) {
                    pos = Some((j, dj));
                }
            } else if neg.is_none_or(|(_, best)| dj < best) {
                neg = Some((j, dj));
            }
        }
        let ((p, dp), (q, dn)) = (pos.expect("positive exists"), neg.expect("negative exists"));
        let (term, slope) = match margin {
            Margin::Hard(m) => {
                let h = m + dp - dn;
                if h > 0.0 {
                    (h, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Margin::Soft => {
                let z = dp - dn;
                // ln(1 + e^z) computed stably
                let v = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                (v, 1.0 / (1.0 + (-z).exp()))
            }
        };
        terms.push(term);
        if slope == 0.0 {
            continue;
        }
        let fa = features.sample(a).to_vec();
        let fp = features.sample(p).to_vec();
        let fq = features.sample(q).to_vec();
        let g = grad.data_mut();
        if dp > 0.0 {
            for t in 0..d {
                let u = k * slope * (fa[t] - fp[t]) / dp;
                g[a * d + t] += u;
                g[p * d + t] -= u;
            }
        }
        if dn > 0.0 {
            for t in 0..d {
                let u = k * slope * (fa[t] - fq[t]) / dn;
                g[a * d + t] -= u;
                g[q * d + t] += u;
            }
        }
    }
    Ok(LossValue {
        value: k * compensated_sum(terms),
        grad,
    })
}
