use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `p` identities with `k` samples each, grouped by identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletBatch {
    pub p: usize,
    pub k: usize,
    /// Positions into the sampled collection.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
}

/// Draws `p` distinct identities and `k` samples of each. Identities with
/// fewer than `k` samples are drawn with replacement.
pub fn sample_pk_batch<R: Rng + ?Sized>(
    labels: &[usize],
    cameras: &[usize],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    if labels.len() != cameras.len() {
        return Err(Error::Shape {
            op: "sample_pk_batch",
            dim: "n",
            expected: labels.len(),
            actual: cameras.len(),
        });
    }
    if p == 0 || k == 0 {
        return Err(Error::InvalidParams(format!("P = {p} and K = {k} must be >= 1")));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    if by_label.len() < p {
        return Err(Error::Batch(format!(
            "{} identities available, {p} requested",
            by_label.len()
        )));
    }
    let ids: Vec<usize> = by_label.keys().copied().collect();
    let chosen: Vec<usize> = ids.choose_multiple(rng, p).copied().collect();
    let mut indices = Vec::with_capacity(p * k);
    let mut out_labels = Vec::with_capacity(p * k);
    for id in chosen {
        let pool = &by_label[&id];
        if pool.len() >= k {
            let mut pick: Vec<usize> = pool.clone();
            pick.shuffle(rng);
            indices.extend_from_slice(&pick[..k]);
        } else {
            indices.extend((0..k).map(|_| *pool.choose(rng).expect("non-empty group")));
        }
        out_labels.extend(std::iter::repeat_n(id, k));
    }
    let cameras = indices.iter().map(|&i| cameras[i]).collect();
    Ok(TripletBatch {
        p,
        k,
        indices,
        labels: out_labels,
        cameras,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn single_sample() {
        let b = sample_pk_batch(&[4], &[0], 1, 1, &mut stream(0, 0)).unwrap();
        assert_eq!(b.indices, vec![0]);
        assert_eq!(b.labels, vec![4]);
    }

    #[test]
    fn label_multiset_and_replacement() {
        let labels = [0, 0, 0, 0, 1, 1, 2, 2, 2, 3];
        let cams = [0; 10];
        let mut rng = stream(1, 0);
        for _ in 0..50 {
            let b = sample_pk_batch(&labels, &cams, 3, 4, &mut rng).unwrap();
            assert_eq!(b.indices.len(), 12);
            for chunk in b.labels.chunks(4) {
                assert!(chunk.iter().all(|&l| l == chunk[0]));
            }
            let mut ids: Vec<_> = b.labels.chunks(4).map(|c| c[0]).collect();
            ids.dedup();
            assert_eq!(ids.len(), 3);
            for (&i, &l) in b.indices.iter().zip(&b.labels) {
                assert_eq!(labels[i], l);
            }
        }
    }

    #[test]
    fn reproducible_and_errors() {
        let labels: Vec<usize> = (0..40).map(|i| i % 8).collect();
        let cams = vec![0; 40];
        let a = sample_pk_batch(&labels, &cams, 4, 2, &mut stream(3, 0)).unwrap();
        let b = sample_pk_batch(&labels, &cams, 4, 2, &mut stream(3, 0)).unwrap();
        assert_eq!(a, b);
        assert!(sample_pk_batch(&labels, &cams, 9, 2, &mut stream(3, 0)).is_err());
    }
}
