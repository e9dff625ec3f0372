use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    /// 1 when both samples share a class.
    pub target: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSampling {
    /// Allow the same unordered pair to be drawn more than once.
    pub with_replacement: bool,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self { with_replacement: true }
    }
}

/// Balanced similar/dissimilar index pairs into one [`LabeledImageSet`],
/// identified by the set's fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
    pub source: u64,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| usize::from(p.target)).collect()
    }

    /// Fails unless the batch was sampled from `set`.
    pub fn check_source<T: Scalar>(&self, set: &LabeledImageSet<T>) -> Result<()> {
        if self.source != set.fingerprint() {
            return Err(Error::Data("pair batch was sampled from a different image set".into()));
        }
        Ok(())
    }
}

/// Samples `n_pairs` pairs among the samples tagged `split`: half similar,
/// drawn uniformly over ordered same-class pairs `(i, j)` with `i != j`, and
/// half dissimilar, drawn uniformly over ordered cross-class pairs. The batch
/// is shuffled.
pub fn sample_pairs<T: Scalar>(
    set: &LabeledImageSet<T>,
    split: Split,
    n_pairs: usize,
    sampling: PairSampling,
    rng: &mut Rng,
) -> Result<PairBatch> {
    sample_pairs_among(set, &set.indices(split), n_pairs, sampling, rng)
}

/// As [`sample_pairs`], restricted to an explicit list of sample indices.
pub fn sample_pairs_among<T: Scalar>(
    set: &LabeledImageSet<T>,
    indices: &[usize],
    n_pairs: usize,
    sampling: PairSampling,
    rng: &mut Rng,
) -> Result<PairBatch> {
    if n_pairs == 0 || n_pairs % 2 != 0 {
        return Err(Error::Config(format!("pair count {n_pairs} must be even and positive")));
    }
    if indices.len() < 2 {
        return Err(Error::Data(format!("{} samples cannot form pairs", indices.len())));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.num_classes()];
    for &i in indices {
        by_class[set.label(i)].push(i);
    }
    let eligible: Vec<&Vec<usize>> = by_class.iter().filter(|c| c.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::Data("no class has two samples: cannot form similar pairs".into()));
    }
    if by_class.iter().filter(|c| !c.is_empty()).count() < 2 {
        return Err(Error::Data("only one class present: cannot form dissimilar pairs".into()));
    }

    let half = n_pairs / 2;
    if !sampling.with_replacement {
        let similar: usize = by_class.iter().map(|c| c.len() * c.len().saturating_sub(1) / 2).sum();
        let all = indices.len() * (indices.len() - 1) / 2;
        if similar < half || all - similar < half {
            return Err(Error::Config(format!(
                "{half} distinct pairs per kind requested; only {similar} similar and {} dissimilar exist",
                all - similar
            )));
        }
    }

    // cumulative ordered-pair counts per eligible class
    let mut cumulative = Vec::with_capacity(eligible.len());
    let mut total = 0usize;
    for c in &eligible {
        total += c.len() * (c.len() - 1);
        cumulative.push(total);
    }

    let mut seen = HashSet::new();
    let mut fresh = |i: usize, j: usize| sampling.with_replacement || seen.insert((i.min(j), i.max(j)));
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < half {
        let r = rng.below(total);
        let class = eligible[cumulative.partition_point(|&c| c <= r)];
        let a = rng.below(class.len());
        let mut b = rng.below(class.len() - 1);
        if b >= a {
            b += 1;
        }
        let (i, j) = (class[a], class[b]);
        if fresh(i, j) {
            pairs.push(Pair { i, j, target: 1 });
        }
    }
    while pairs.len() < n_pairs {
        let i = indices[rng.below(indices.len())];
        let j = indices[rng.below(indices.len())];
        if set.label(i) != set.label(j) && fresh(i, j) {
            pairs.push(Pair { i, j, target: 0 });
        }
    }
    rng.shuffle(&mut pairs);
    Ok(PairBatch { pairs, source: set.fingerprint() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn set(labels: &[u32]) -> LabeledImageSet<f64> {
        let images = labels.iter().map(|_| Tensor::zeros(&[2, 2, 1])).collect();
        LabeledImageSet::from_original_labels(images, labels, Split::Train, 0).unwrap()
    }

    #[test]
    fn minimal_balanced_batch() {
        let s = set(&[0, 0, 1, 1]);
        let b = sample_pairs(&s, Split::Train, 2, PairSampling::default(), &mut Rng::new(1)).unwrap();
        assert_eq!(b.targets().iter().sum::<usize>(), 1);
        for p in &b.pairs {
            assert_ne!(p.i, p.j);
            assert_eq!(p.target == 1, s.label(p.i) == s.label(p.j));
        }
    }

    #[test]
    fn targets_are_consistent_and_balanced() {
        let labels: Vec<u32> = (0..500).map(|i| (i * 31 % 5) as u32).collect();
        let s = set(&labels);
        let b = sample_pairs(&s, Split::Train, 10_000, PairSampling::default(), &mut Rng::new(2)).unwrap();
        assert_eq!(b.len(), 10_000);
        assert_eq!(b.targets().iter().sum::<usize>(), 5_000);
        assert!(b.pairs.iter().all(|p| p.i != p.j && (p.target == 1) == (s.label(p.i) == s.label(p.j))));
        b.check_source(&s).unwrap();
    }

    #[test]
    fn seeded_and_split_restricted() {
        let mut s = set(&[0, 1, 2, 0, 1, 2, 0, 1, 2, 0]);
        s.set_split(0, Split::Validation);
        let a = sample_pairs(&s, Split::Train, 20, PairSampling::default(), &mut Rng::new(3)).unwrap();
        let b = sample_pairs(&s, Split::Train, 20, PairSampling::default(), &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.pairs.iter().all(|p| p.i != 0 && p.j != 0));
    }

    #[test]
    fn similar_pairs_cover_classes_by_pair_count() {
        // class 0 has 2 samples (2 ordered pairs), class 1 has 4 (12 ordered pairs)
        let s = set(&[0, 0, 1, 1, 1, 1]);
        let b = sample_pairs(&s, Split::Train, 28_000, PairSampling::default(), &mut Rng::new(4)).unwrap();
        let from_zero = b.pairs.iter().filter(|p| p.target == 1 && s.label(p.i) == 0).count();
        let share = from_zero as f64 / 14_000.0;
        assert!((share - 2.0 / 14.0).abs() < 0.01, "{share}");
    }

    #[test]
    fn without_replacement_is_distinct_and_bounded() {
        let s = set(&[0, 0, 0, 1, 1, 1]);
        let sampling = PairSampling { with_replacement: false };
        let b = sample_pairs(&s, Split::Train, 12, sampling, &mut Rng::new(5)).unwrap();
        let distinct: HashSet<_> = b.pairs.iter().map(|p| (p.i.min(p.j), p.i.max(p.j))).collect();
        assert_eq!(distinct.len(), 12);
        assert!(sample_pairs(&s, Split::Train, 14, sampling, &mut Rng::new(5)).is_err());
    }

    #[test]
    fn unformable_pairs_are_errors() {
        let singletons = set(&[0, 1, 2]);
        let err = sample_pairs(&singletons, Split::Train, 2, PairSampling::default(), &mut Rng::new(6)).unwrap_err();
        assert!(err.to_string().contains("similar"), "{err}");
        let s = set(&[0, 0, 1, 1]);
        assert!(sample_pairs(&s, Split::Train, 3, PairSampling::default(), &mut Rng::new(6)).is_err());
        assert!(sample_pairs(&s, Split::Test, 2, PairSampling::default(), &mut Rng::new(6)).is_err());
    }
}
