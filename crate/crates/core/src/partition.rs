//! Receptive partition, uniform stripes and activation-balanced pooling.

use serde::{Deserialize, Serialize};

use crate::tensor::{concat_batch, split_batch, Shape, Tensor};
use crate::{Error, Result};

fn check_divisible(height: usize, stripes: usize) -> Result<()> {
    if stripes == 0 || !height.is_multiple_of(stripes) {
        let divisor = (1..=height.max(1))
            .filter(|d| height.is_multiple_of(*d))
            .min_by_key(|&d| (d.abs_diff(stripes), d))
            .unwrap_or(1);
        return Err(Error::Partition {
            height,
            stripes,
            hint: format!("; nearest valid stripe count is {divisor}"),
        });
    }
    Ok(())
}

/// `n_s` equal-height horizontal slices, top to bottom.
pub fn uniform_stripes(fmap: &Tensor, stripes: usize) -> Result<Vec<Tensor>> {
    let h = fmap.shape().h;
    check_divisible(h, stripes)?;
    let sh = h / stripes;
    (0..stripes).map(|k| fmap.slice_rows(k * sh, (k + 1) * sh)).collect()
}

/// Cuts the map into `n_s` stripes and stacks them on the batch axis.
///
/// The result is stripe-major: batch entry `k * n + i` holds stripe `k` of
/// sample `i`, so [`split_batch`] with `n_s` shards returns one shard per
/// stripe.
pub fn receptive_partition(fmap: &Tensor, stripes: usize) -> Result<Tensor> {
    concat_batch(&uniform_stripes(fmap, stripes)?)
}

/// Inverse of [`receptive_partition`]: reassembles stripes along the height.
pub fn merge_partition(parts: &Tensor, stripes: usize) -> Result<Tensor> {
    Tensor::concat_rows(&split_batch(parts, stripes)?)
}

/// Row cut positions `[h_0 = 0, ..., h_{n_s} = H]`, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripeBoundaries {
    cuts: Vec<usize>,
}

impl StripeBoundaries {
    pub fn new(cuts: Vec<usize>, height: usize) -> Result<Self> {
        let ok = cuts.len() >= 2
            && cuts[0] == 0
            && *cuts.last().expect("len >= 2") == height
            && cuts.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidParams(format!(
                "stripe cuts {cuts:?} must rise strictly from 0 to {height}"
            )));
        }
        Ok(Self { cuts })
    }

    pub fn uniform(height: usize, stripes: usize) -> Result<Self> {
        check_divisible(height, stripes)?;
        Self::new((0..=stripes).map(|k| k * height / stripes).collect(), height)
    }

    pub fn cuts(&self) -> &[usize] {
        &self.cuts
    }

    pub fn stripes(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn height(&self) -> usize {
        *self.cuts.last().expect("validated")
    }

    pub fn stripe(&self, k: usize) -> std::ops::Range<usize> {
        self.cuts[k]..self.cuts[k + 1]
    }

    /// Text rendering: one line per map row with the stripe it belongs to.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for k in 0..self.stripes() {
            for row in self.stripe(k) {
                let marker = if row == self.cuts[k] { "+--" } else { "|  " };
                s.push_str(&format!("{marker} row {row:>3}  stripe {k}\n"));
            }
        }
        s.push_str(&format!("+-- row {:>3}  (end)\n", self.height()));
        s
    }
}

/// Cumulative count, per row, of channels whose spatial maximum sits at or
/// above that row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxActivationHistogram {
    /// `cumulative[h - 1]` is the count over rows `0..h`.
    cumulative: Vec<usize>,
}

impl MaxActivationHistogram {
    pub fn from_row_counts(counts: &[usize]) -> Self {
        let cumulative = counts
            .iter()
            .scan(0, |acc, &c| {
                *acc += c;
                Some(*acc)
            })
            .collect();
        Self { cumulative }
    }

    pub fn height(&self) -> usize {
        self.cumulative.len()
    }

    pub fn total(&self) -> usize {
        self.cumulative.last().copied().unwrap_or(0)
    }

    /// Count over rows `0..h`; `at(0) == 0`.
    pub fn at(&self, h: usize) -> usize {
        if h == 0 {
            0
        } else {
            self.cumulative[h - 1]
        }
    }

    pub fn cumulative(&self) -> &[usize] {
        &self.cumulative
    }

    pub fn row_counts(&self) -> Vec<usize> {
        (0..self.height()).map(|h| self.at(h + 1) - self.at(h)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,cumulative_count\n");
        for (h, c) in self.cumulative.iter().enumerate() {
            s.push_str(&format!("{},{c}\n", h + 1));
        }
        s
    }
}

/// Row of each channel's spatial maximum (first in row-major order on ties),
/// accumulated down the height.
pub fn max_activation_histogram(fmap: &Tensor) -> Result<MaxActivationHistogram> {
    let s = fmap.shape();
    if s.n != 1 {
        return Err(Error::InvalidShape {
            op: "max_activation_histogram",
            reason: format!("expected a single-sample map, got batch {}", s.n),
        });
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::InvalidShape {
            op: "max_activation_histogram",
            reason: "empty spatial extent".into(),
        });
    }
    let mut counts = vec![0usize; s.h];
    for plane in fmap.data().chunks(s.plane()) {
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        counts[best / s.w] += 1;
    }
    Ok(MaxActivationHistogram::from_row_counts(&counts))
}

/// Smallest `h` in `1..=H` with `n_s * H(h) >= k * total`.
fn threshold_cut(hist: &MaxActivationHistogram, stripes: usize, k: usize) -> usize {
    let target = k * hist.total();
    (1..=hist.height())
        .find(|&h| stripes * hist.at(h) >= target)
        .unwrap_or(hist.height())
}

/// Activation-balanced cuts.
///
/// Chooses the placement whose per-stripe max-activation counts have the
/// smallest spread (largest minus smallest), every stripe at least one row
/// high. Among equally balanced placements it keeps the one closest (squared
/// row distance) to the cumulative-fraction cuts, where cut `k` is the first
/// row at which the histogram reaches `k / n_s` of the total.
pub fn abp_boundaries(hist: &MaxActivationHistogram, stripes: usize) -> Result<StripeBoundaries> {
    let height = hist.height();
    if stripes == 0 || stripes > height {
        return Err(Error::Partition {
            height,
            stripes,
            hint: format!("; at most {height} stripes fit"),
        });
    }
    if stripes == 1 {
        return StripeBoundaries::new(vec![0, height], height);
    }
    let seg = |a: usize, b: usize| hist.at(b) - hist.at(a);
    let max_floor = hist.total() / stripes;

    // Smallest achievable spread.
    let mut best_spread = usize::MAX;
    for floor in 0..=max_floor {
        if let Some(top) = min_max_with_floor(height, stripes, floor, &seg) {
            best_spread = best_spread.min(top - floor);
        }
    }

    let targets: Vec<usize> = (1..stripes).map(|k| threshold_cut(hist, stripes, k)).collect();
    let mut best: Option<(usize, Vec<usize>)> = None;
    for floor in 0..=max_floor {
        let ceil = floor + best_spread;
        if let Some((cost, cuts)) = closest_cuts(height, stripes, floor, ceil, &seg, &targets) {
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, cuts));
            }
        }
    }
    let (_, cuts) = best.expect("the optimal spread is attainable");
    StripeBoundaries::new(cuts, height)
}

/// Minimum over placements with every stripe count `>= floor` of the largest
/// stripe count.
fn min_max_with_floor(height: usize, stripes: usize, floor: usize, seg: &impl Fn(usize, usize) -> usize) -> Option<usize> {
    // best[h]: smallest max count for the stripes so far ending at row h
    let mut best = vec![None::<usize>; height + 1];
    best[0] = Some(0);
    for _ in 0..stripes {
        let mut next = vec![None::<usize>; height + 1];
        for end in 1..=height {
            for start in 0..end {
                let (Some(prev), s) = (best[start], seg(start, end)) else { continue };
                if s < floor {
                    continue;
                }
                let v = prev.max(s);
                if next[end].is_none_or(|cur| v < cur) {
                    next[end] = Some(v);
                }
            }
        }
        best = next;
    }
    best[height]
}

/// Placement with every stripe count in `[floor, ceil]` minimising the
/// squared distance of the inner cuts to `targets`.
fn closest_cuts(
    height: usize,
    stripes: usize,
    floor: usize,
    ceil: usize,
    seg: &impl Fn(usize, usize) -> usize,
    targets: &[usize],
) -> Option<(usize, Vec<usize>)> {
    let mut cost = vec![None::<usize>; height + 1];
    cost[0] = Some(0);
    let mut back = vec![vec![0usize; height + 1]; stripes];
    for k in 0..stripes {
        let mut next = vec![None::<usize>; height + 1];
        for end in 1..=height {
            if k + 1 == stripes && end != height {
                continue;
            }
            let dev = if k + 1 < stripes {
                let d = end.abs_diff(targets[k]);
                d * d
            } else {
                0
            };
            for start in 0..end {
                let Some(prev) = cost[start] else { continue };
                let s = seg(start, end);
                if s < floor || s > ceil {
                    continue;
                }
                let v = prev + dev;
                if next[end].is_none_or(|cur| v < cur) {
                    next[end] = Some(v);
                    back[k][end] = start;
                }
            }
        }
        cost = next;
    }
    let total = cost[height]?;
    let mut cuts = vec![height];
    let mut end = height;
    for k in (0..stripes).rev() {
        end = back[k][end];
        cuts.push(end);
    }
    cuts.reverse();
    Some((total, cuts))
}

/// Per-stripe channel means over rows `[h_k, h_{k+1})` and all columns.
pub fn stripe_average_pool(fmap: &Tensor, bounds: &StripeBoundaries) -> Result<Vec<Vec<f64>>> {
    let s = fmap.shape();
    if s.n != 1 {
        return Err(Error::InvalidShape {
            op: "stripe_average_pool",
            reason: format!("expected a single-sample map, got batch {}", s.n),
        });
    }
    if bounds.height() != s.h {
        return Err(Error::Shape {
            op: "stripe_average_pool",
            dim: "h",
            expected: bounds.height(),
            actual: s.h,
        });
    }
    let pooled = pool_stripes(fmap, std::slice::from_ref(bounds), StripePool::Avg)?;
    Ok(pooled.stripes.iter().map(|t| t.data().to_vec()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StripePool {
    Max,
    Avg,
}

/// Output of [`pool_stripes`]: one `(n, C, 1, 1)` tensor per stripe.
#[derive(Clone, Debug)]
pub struct PooledStripes {
    pub stripes: Vec<Tensor>,
    input_shape: Shape,
    kind: StripePool,
    bounds: Vec<StripeBoundaries>,
    /// Max pooling: winning flat input index per stripe and `(sample, channel)`.
    argmax: Vec<Vec<usize>>,
}

/// Pools every stripe of every sample. `bounds` holds one entry per sample,
/// or a single entry shared by the whole batch.
pub fn pool_stripes(fmap: &Tensor, bounds: &[StripeBoundaries], kind: StripePool) -> Result<PooledStripes> {
    let s = fmap.shape();
    if bounds.len() != s.n && bounds.len() != 1 {
        return Err(Error::Shape {
            op: "pool_stripes",
            dim: "n",
            expected: s.n,
            actual: bounds.len(),
        });
    }
    let stripes = bounds[0].stripes();
    for b in bounds {
        if b.height() != s.h || b.stripes() != stripes {
            return Err(Error::InvalidShape {
                op: "pool_stripes",
                reason: format!("cuts {:?} do not fit height {} with {stripes} stripes", b.cuts(), s.h),
            });
        }
    }
    let bounds: Vec<StripeBoundaries> = if bounds.len() == s.n {
        bounds.to_vec()
    } else {
        vec![bounds[0].clone(); s.n]
    };
    let mut out = vec![Vec::with_capacity(s.n * s.c); stripes];
    let mut argmax = vec![Vec::new(); stripes];
    for (n, b) in bounds.iter().enumerate() {
        for c in 0..s.c {
            let base = fmap.index(n, c, 0, 0);
            for k in 0..stripes {
                let rows = b.stripe(k);
                let region = &fmap.data()[base + rows.start * s.w..base + rows.end * s.w];
                match kind {
                    StripePool::Avg => {
                        out[k].push(region.iter().sum::<f64>() / region.len() as f64);
                    }
                    StripePool::Max => {
                        let mut bi = 0;
                        for (i, &v) in region.iter().enumerate() {
                            if v > region[bi] {
                                bi = i;
                            }
                        }
                        out[k].push(region[bi]);
                        argmax[k].push(base + rows.start * s.w + bi);
                    }
                }
            }
        }
    }
    let stripes = out
        .into_iter()
        .map(|v| Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), v))
        .collect::<Result<_>>()?;
    Ok(PooledStripes {
        stripes,
        input_shape: s,
        kind,
        bounds,
        argmax,
    })
}

impl PooledStripes {
    /// Gradient with respect to the pooled map given one gradient per stripe.
    pub fn backward(&self, grads: &[Tensor]) -> Result<Tensor> {
        let s = self.input_shape;
        if grads.len() != self.stripes.len() {
            return Err(Error::Shape {
                op: "pool_stripes_backward",
                dim: "stripes",
                expected: self.stripes.len(),
                actual: grads.len(),
            });
        }
        let mut gin = Tensor::zeros(s);
        for (k, g) in grads.iter().enumerate() {
            if g.len() != s.n * s.c {
                return Err(Error::InvalidShape {
                    op: "pool_stripes_backward",
                    reason: format!("stripe {k} gradient {}", g.shape()),
                });
            }
            match self.kind {
                StripePool::Max => {
                    for (&i, &gv) in self.argmax[k].iter().zip(g.data()) {
                        gin.data_mut()[i] += gv;
                    }
                }
                StripePool::Avg => {
                    for n in 0..s.n {
                        let rows = self.bounds[n].stripe(k);
                        let area = (rows.len() * s.w) as f64;
                        for c in 0..s.c {
                            let gv = g.data()[n * s.c + c] / area;
                            let base = gin.index(n, c, rows.start, 0);
                            gin.data_mut()[base..base + rows.len() * s.w]
                                .iter_mut()
                                .for_each(|v| *v += gv);
                        }
                    }
                }
            }
        }
        Ok(gin)
    }
}
