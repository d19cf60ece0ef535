mod common;

use proptest::prelude::*;
use rmgl_core::partition::{
    abp_boundaries, max_activation_histogram, merge_partition, pool_stripes, receptive_partition, uniform_stripes,
    StripeBoundaries, StripePool,
};
use rmgl_core::tensor::{Shape, Tensor};

fn map(seed: u64, shape: Shape) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut common::rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn merge_inverts_partition(seed in any::<u64>(), n in 1usize..4, c in 1usize..4, k in 1usize..5, sh in 1usize..4, w in 1usize..4) {
        let x = map(seed, Shape::new(n, c, k * sh, w));
        let parts = receptive_partition(&x, k).unwrap();
        prop_assert_eq!(parts.shape(), Shape::new(k * n, c, sh, w));
        prop_assert_eq!(merge_partition(&parts, k).unwrap(), x);
    }

    #[test]
    fn abp_cuts_reach_the_optimal_spread(seed in any::<u64>(), c in 4usize..40, h in 3usize..16, stripes in 2usize..4) {
        let x = map(seed, Shape::new(1, c, h, 3));
        let counts = common::row_max_counts(&x);
        let hist = max_activation_histogram(&x).unwrap();
        prop_assert_eq!(hist.row_counts(), counts.clone());
        let cuts = abp_boundaries(&hist, stripes).unwrap();
        prop_assert_eq!(cuts.stripes(), stripes);
        prop_assert_eq!(common::spread_of(&counts, cuts.cuts()), common::optimal_spread(&counts, stripes));
    }
}

#[test]
fn partition_stacks_stripes_stripe_major() {
    let x = map(1, Shape::new(2, 1, 4, 1));
    let parts = receptive_partition(&x, 2).unwrap();
    // Entry k * n + i is stripe k of sample i.
    assert_eq!(parts.sample(1), &x.sample(1)[..2]);
    assert_eq!(parts.sample(2), &x.sample(0)[2..]);
}

#[test]
fn uniform_stripes_need_divisible_height() {
    assert!(uniform_stripes(&map(0, Shape::new(1, 1, 7, 2)), 2).is_err());
    assert_eq!(uniform_stripes(&map(0, Shape::new(1, 1, 6, 2)), 3).unwrap().len(), 3);
}

#[test]
fn stripe_pools_match_direct_reductions() {
    let x = map(2, Shape::new(2, 3, 6, 4));
    let bounds = [
        StripeBoundaries::new(vec![0, 1, 6], 6).unwrap(),
        StripeBoundaries::new(vec![0, 4, 6], 6).unwrap(),
    ];
    for kind in [StripePool::Max, StripePool::Avg] {
        let pooled = pool_stripes(&x, &bounds, kind).unwrap();
        for (n, b) in bounds.iter().enumerate() {
            for k in 0..2 {
                for c in 0..3 {
                    let vals: Vec<f64> = b.stripe(k).flat_map(|y| (0..4).map(move |w| (y, w))).map(|(y, w)| x.at(n, c, y, w)).collect();
                    let want = match kind {
                        StripePool::Max => vals.iter().cloned().fold(f64::MIN, f64::max),
                        StripePool::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                    };
                    let got = pooled.stripes[k].at(n, c, 0, 0);
                    assert!((got - want).abs() < 1e-12, "{kind:?} n{n} k{k} c{c}");
                }
            }
        }
    }
}

#[test]
fn balanced_cuts_follow_activations() {
    // Every channel peaks in the top two rows: both cuts sit high.
    let mut x = Tensor::zeros(Shape::new(1, 12, 12, 2));
    for c in 0..12 {
        let i = x.index(0, c, c % 2, 0);
        x.data_mut()[i] = 1.0;
    }
    let hist = max_activation_histogram(&x).unwrap();
    let cuts = abp_boundaries(&hist, 2).unwrap();
    assert_eq!(common::stripe_counts(&hist.row_counts(), cuts.cuts()), vec![6, 6]);
    assert_eq!(cuts.cuts(), &[0, 1, 12]);
}

#[test]
fn too_many_stripes_rejected() {
    let hist = max_activation_histogram(&map(3, Shape::new(1, 4, 3, 2))).unwrap();
    assert!(abp_boundaries(&hist, 4).is_err());
}

/// Two 3x3 stride-1 layers, a two-stripe partition, two more 3x3 layers, on
/// a 12x12 input: input rows that move any output of stripe `k` lie exactly
/// in the planned restricted region.
#[test]
fn restricted_region_matches_measured_cone() {
    use rmgl_core::receptive::{ArchKind, ArchLayer, ArchSpec, Extent2};
    use rmgl_core::tensor::{Conv2d, Layer, Mode, Sequential};

    let arch = ArchSpec::new(
        Extent2::square(12),
        (0..4).map(|i| ArchLayer::new(format!("c{i}"), ArchKind::Conv, 3, 1, 1)).collect(),
    )
    .unwrap();
    let ones = |n: usize| {
        Sequential::new(
            (0..n)
                .map(|_| {
                    let mut c = Conv2d::new(1, 1, (3, 3), (1, 1), (1, 1), false).unwrap();
                    c.weight = Tensor::full(c.weight.shape(), 1.0);
                    Layer::Conv(c)
                })
                .collect(),
        )
    };
    let (pre, post) = (ones(2), ones(2));
    let plan = arch.restricted_region(2, 2).unwrap();
    assert_eq!(plan.restricted, 5 + 5);
    // One impulse per input row, all in column 6.
    let mut x = Tensor::zeros(Shape::new(12, 1, 12, 12));
    for r in 0..12 {
        let i = x.index(r, 0, r, 6);
        x.data_mut()[i] = 1.0;
    }
    let parts = receptive_partition(&pre.apply(&x, Mode::Eval).unwrap(), 2).unwrap();
    let y = merge_partition(&post.apply(&parts, Mode::Eval).unwrap(), 2).unwrap();
    for k in 0..2 {
        let hit: Vec<usize> = (0..12)
            .filter(|&r| (k * 6..(k + 1) * 6).any(|oy| (0..12).any(|ox| y.at(r, 0, oy, ox) != 0.0)))
            .collect();
        let (lo, hi) = plan.stripe_region_clipped(k);
        assert_eq!((hit[0], *hit.last().unwrap()), (lo, hi), "stripe {k}");
        assert_eq!(hit.len(), hi - lo + 1);
    }
}
