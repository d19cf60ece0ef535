//! Reference implementations used as oracles. They share no code with the
//! library beyond plain tensor construction.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rmgl_core::receptive::{ArchKind, ArchLayer, Extent2};
use rmgl_core::tensor::{Conv2d, Layer, Mode, Pool2d, PoolKind, Sequential, Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    rmgl_core::rng::stream(seed, 99)
}

/// Random conv/pool chain with independent kernel, stride and padding per axis.
pub fn random_layers(rng: &mut ChaCha8Rng, max_layers: usize) -> Vec<ArchLayer> {
    let depth = rng.random_range(1..=max_layers);
    (0..depth)
        .map(|i| {
            let kind = match rng.random_range(0..10) {
                0..=5 => ArchKind::Conv,
                6..=7 => ArchKind::MaxPool,
                _ => ArchKind::AvgPool,
            };
            let kernel = Extent2::new(rng.random_range(1..=5), rng.random_range(1..=5));
            let stride = Extent2::new(rng.random_range(1..=3), rng.random_range(1..=3));
            let padding = Extent2::new(rng.random_range(0..kernel.h), rng.random_range(0..kernel.w));
            ArchLayer {
                name: format!("l{i}"),
                kind,
                kernel,
                stride,
                padding,
            }
        })
        .collect()
}

/// An input size large enough that some final neuron sees no padding.
pub fn roomy_input(layers: &[ArchLayer]) -> Extent2 {
    let axis = |f: &dyn Fn(&ArchLayer) -> (usize, usize, usize)| {
        let (mut total, mut prod) = (1, 1);
        for l in layers {
            let (k, s, p) = f(l);
            total += (k + p) * prod;
            prod *= s;
        }
        2 * (total + prod) + 1
    };
    Extent2::new(
        axis(&|l| (l.kernel.h, l.stride.h, l.padding.h)),
        axis(&|l| (l.kernel.w, l.stride.w, l.padding.w)),
    )
}

/// Single-channel network with all-ones kernels. Max pools become average
/// pools, so every input pixel inside a neuron's cone contributes a strictly
/// positive amount and pixels outside contribute nothing. Only the height
/// axis of each layer is kept (width becomes 1x1, stride 1, no padding).
fn impulse_network_rows(layers: &[ArchLayer]) -> Sequential {
    let layers = layers
        .iter()
        .map(|l| {
            let k = (l.kernel.h, 1);
            let s = (l.stride.h, 1);
            let p = (l.padding.h, 0);
            match l.kind {
                ArchKind::Conv => {
                    let mut c = Conv2d::new(1, 1, k, s, p, false).unwrap();
                    c.weight = Tensor::full(c.weight.shape(), 1.0);
                    Layer::Conv(c)
                }
                _ => Layer::Pool(Pool2d::new(PoolKind::Avg, k, s, p).unwrap()),
            }
        })
        .collect();
    Sequential::new(layers)
}

/// Largest span of any final neuron's sensitivity cone along the height
/// axis, measured by forwarding one impulse per input row.
fn impulse_span_rows(layers: &[ArchLayer], height: usize) -> usize {
    let net = impulse_network_rows(layers);
    let oh = net.output_shape(Shape::new(1, 1, height, 1)).unwrap().h;
    let mut x = Tensor::zeros(Shape::new(height, 1, height, 1));
    for r in 0..height {
        x.data_mut()[r * height + r] = 1.0;
    }
    let y = net.apply(&x, Mode::Eval).unwrap();
    (0..oh)
        .filter_map(|o| {
            let hit: Vec<usize> = (0..height).filter(|&r| y.data()[r * oh + o] > 0.0).collect();
            Some(hit.last()? - hit.first()? + 1)
        })
        .max()
        .unwrap_or(0)
}

/// Receptive field of the final map by impulse response, per axis.
pub fn impulse_receptive_field(layers: &[ArchLayer], input: Extent2) -> Extent2 {
    let transposed: Vec<ArchLayer> = layers
        .iter()
        .map(|l| ArchLayer {
            name: l.name.clone(),
            kind: l.kind,
            kernel: Extent2::new(l.kernel.w, l.kernel.h),
            stride: Extent2::new(l.stride.w, l.stride.h),
            padding: Extent2::new(l.padding.w, l.padding.h),
        })
        .collect();
    Extent2::new(
        impulse_span_rows(layers, input.h),
        impulse_span_rows(&transposed, input.w),
    )
}

/// `sum_i (logsumexp(s_i) - s_i[y_i])` computed in the plainest way.
pub fn cross_entropy_reference(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y]
        })
        .sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss by scanning every (anchor, positive, negative)
/// triple: for each anchor, the triple with the largest hinge argument is
/// the hardest-positive / hardest-negative pair.
pub fn triplet_reference(features: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let n = features.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                worst = worst.max(margin + dist(&features[a], &features[p]) - dist(&features[a], &features[q]));
            }
        }
        total += worst.max(0.0);
    }
    total
}

/// Count of per-channel spatial maxima in each row (first occurrence in
/// row-major order on ties).
pub fn row_max_counts(fmap: &Tensor) -> Vec<usize> {
    let s = fmap.shape();
    let mut counts = vec![0; s.h];
    for c in 0..s.c {
        let mut best = (0, f64::NEG_INFINITY);
        for y in 0..s.h {
            for x in 0..s.w {
                let v = fmap.at(0, c, y, x);
                if v > best.1 {
                    best = (y, v);
                }
            }
        }
        counts[best.0] += 1;
    }
    counts
}

/// Per-stripe sums of `counts` for cuts `[0, .., H]`.
pub fn stripe_counts(counts: &[usize], cuts: &[usize]) -> Vec<usize> {
    cuts.windows(2).map(|w| counts[w[0]..w[1]].iter().sum()).collect()
}

fn spread(v: &[usize]) -> usize {
    v.iter().max().unwrap() - v.iter().min().unwrap()
}

/// Smallest achievable max-minus-min stripe count over every placement of
/// `stripes - 1` cuts with non-empty stripes.
pub fn optimal_spread(counts: &[usize], stripes: usize) -> usize {
    fn rec(counts: &[usize], cuts: &mut Vec<usize>, left: usize, best: &mut usize) {
        let h = counts.len();
        let last = *cuts.last().unwrap();
        if left == 0 {
            cuts.push(h);
            *best = (*best).min(spread(&stripe_counts(counts, cuts)));
            cuts.pop();
            return;
        }
        for c in last + 1..=h - left {
            cuts.push(c);
            rec(counts, cuts, left - 1, best);
            cuts.pop();
        }
    }
    let mut best = usize::MAX;
    rec(counts, &mut vec![0], stripes - 1, &mut best);
    best
}

pub fn spread_of(counts: &[usize], cuts: &[usize]) -> usize {
    spread(&stripe_counts(counts, cuts))
}

/// Brute-force retrieval metrics for one query from raw distances: the rank
/// of a gallery item is the number of items ordered before it by
/// `(distance, index)`.
pub struct BruteQuery {
    pub first_match: Option<usize>,
    pub ap: Option<f64>,
}

pub fn brute_query(dists: &[f64], positive: &[bool], keep: &[bool]) -> BruteQuery {
    let n = dists.len();
    let mut rank_of = vec![usize::MAX; n];
    for i in 0..n {
        if !keep[i] {
            continue;
        }
        rank_of[i] = (0..n)
            .filter(|&j| keep[j] && (dists[j] < dists[i] || (dists[j] == dists[i] && j < i)))
            .count();
    }
    let mut pos_ranks: Vec<usize> = (0..n).filter(|&i| keep[i] && positive[i]).map(|i| rank_of[i]).collect();
    pos_ranks.sort_unstable();
    if pos_ranks.is_empty() {
        return BruteQuery {
            first_match: None,
            ap: None,
        };
    }
    let mut ap = 0.0;
    for &r in &pos_ranks {
        let hits_up_to = pos_ranks.iter().filter(|&&q| q <= r).count();
        ap += hits_up_to as f64 / (r + 1) as f64;
    }
    BruteQuery {
        first_match: pos_ranks.iter().copied().min(),
        ap: Some(ap / pos_ranks.len() as f64),
    }
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    dist(a, b)
}
