mod common;

use proptest::prelude::*;
use rand::Rng;
use rmgl_core::model::{batch_hard_triplet_loss, cross_entropy_loss, Reduction};
use rmgl_core::tensor::{grad_check, Shape, Tensor};

fn instance(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = common::rng(seed);
    let (p, k, dim) = (rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(1..=8));
    let feats = (0..p * k).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (feats, (0..p * k).map(|i| i / k).collect())
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_vec(Shape::new(rows.len(), rows[0].len(), 1, 1), rows.concat()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn triplet_matches_exhaustive_scan(seed in any::<u64>(), margin in 0.0f64..2.0) {
        let (feats, labels) = instance(seed);
        let got = batch_hard_triplet_loss(&tensor(&feats), &labels, margin, Reduction::Sum).unwrap();
        prop_assert!((got.value - common::triplet_reference(&feats, &labels, margin)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_reference(seed in any::<u64>()) {
        let (scores, _) = instance(seed);
        let classes = scores[0].len();
        let labels: Vec<usize> = (0..scores.len()).map(|i| i % classes).collect();
        let got = cross_entropy_loss(&tensor(&scores), &labels, Reduction::Sum).unwrap();
        prop_assert!((got.value - common::cross_entropy_reference(&scores, &labels)).abs() < 1e-12);
        let mean = cross_entropy_loss(&tensor(&scores), &labels, Reduction::Mean).unwrap();
        prop_assert!((mean.value * scores.len() as f64 - got.value).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_survives_huge_scores() {
    let scores = vec![vec![1e4, -1e4, 0.0], vec![-1e4, 1e4, 5e3]];
    let got = cross_entropy_loss(&tensor(&scores), &[1, 2], Reduction::Sum).unwrap();
    assert!(got.value.is_finite());
    assert!((got.value - (2e4 + 5e3)).abs() < 1e-9);
}

#[test]
fn triplet_gradient_matches_finite_differences() {
    let (feats, labels) = instance(11);
    let f = |t: &Tensor| -> rmgl_core::Result<(f64, Tensor)> {
        let l = batch_hard_triplet_loss(t, &labels, 0.6, Reduction::Mean)?;
        Ok((l.value, l.grad))
    };
    let r = grad_check(&f, &tensor(&feats), 1e-4).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let (scores, _) = instance(12);
    let labels: Vec<usize> = (0..scores.len()).map(|i| i % scores[0].len()).collect();
    let f = |t: &Tensor| -> rmgl_core::Result<(f64, Tensor)> {
        let l = cross_entropy_loss(t, &labels, Reduction::Sum)?;
        Ok((l.value, l.grad))
    };
    let r = grad_check(&f, &tensor(&scores), 1e-4).unwrap();
    assert!(r.passed, "{r:?}");
}
