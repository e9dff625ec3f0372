//! Labeled image sets, class partitioning and pair sampling.

pub mod idx;
mod pairs;

pub use pairs::{sample_pairs, sample_pairs_among, Pair, PairBatch, PairSampling};

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split tag `{other}`"))),
        }
    }
}

/// Images with dense class labels, split tags and stable sample IDs.
///
/// `classes[k]` is the original label of dense class `k`; IDs identify
/// samples across subsets, partitions and gram files.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet<T> {
    images: Vec<Tensor<T>>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    ids: Vec<u64>,
    classes: Vec<u32>,
}

impl<T: Scalar> LabeledImageSet<T> {
    pub fn new(
        images: Vec<Tensor<T>>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        ids: Vec<u64>,
        classes: Vec<u32>,
    ) -> Result<Self> {
        let n = images.len();
        if labels.len() != n || splits.len() != n || ids.len() != n {
            return Err(Error::Data(format!(
                "{} images, {} labels, {} split tags, {} ids",
                n,
                labels.len(),
                splits.len(),
                ids.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().position(|im| im.shape() != first.shape()) {
                return Err(Error::shape("image set", first.shape(), images[bad].shape()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::Data(format!("label {bad} outside class universe of {}", classes.len())));
        }
        if ids.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::Data("sample ids are not unique".into()));
        }
        Ok(Self { images, labels, splits, ids, classes })
    }

    /// Builds a set from original labels; the class universe is the sorted
    /// set of labels present.
    pub fn from_original_labels(images: Vec<Tensor<T>>, original: &[u32], split: Split, first_id: u64) -> Result<Self> {
        let classes: Vec<u32> = original.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let labels = original.iter().map(|l| classes.binary_search(l).expect("present")).collect();
        let n = images.len();
        Self::new(images, labels, vec![split; n], (first_id..first_id + n as u64).collect(), classes)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor<T> {
        &self.images[i]
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn original_label(&self, i: usize) -> u32 {
        self.classes[self.labels[i]]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    /// Samples at `indices` (in that order), keeping the class universe.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            classes: self.classes.clone(),
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.splits.iter_mut().for_each(|s| *s = split);
        self
    }

    pub fn set_split(&mut self, i: usize, split: Split) {
        self.splits[i] = split;
    }

    /// Re-tags a `fraction` of the current training samples as validation,
    /// chosen by a seeded shuffle.
    pub fn assign_validation(&mut self, fraction: f64, rng: &mut Rng) -> Result<()> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let mut train = self.indices(Split::Train);
        rng.shuffle(&mut train);
        let n_val = (fraction * train.len() as f64).round() as usize;
        for &i in &train[..n_val] {
            self.splits[i] = Split::Validation;
        }
        Ok(())
    }

    /// Union of two sets; class universes are merged and labels re-indexed.
    pub fn merge(a: &Self, b: &Self) -> Result<Self> {
        let classes: Vec<u32> = a.classes.iter().chain(&b.classes).copied().collect::<BTreeSet<_>>().into_iter().collect();
        let relabel = |set: &Self| -> Vec<usize> {
            set.labels.iter().map(|&l| classes.binary_search(&set.classes[l]).expect("merged")).collect()
        };
        let mut labels = relabel(a);
        labels.extend(relabel(b));
        Self::new(
            a.images.iter().chain(&b.images).cloned().collect(),
            labels,
            a.splits.iter().chain(&b.splits).copied().collect(),
            a.ids.iter().chain(&b.ids).copied().collect(),
            classes,
        )
    }

    /// Order-independent digest of (id, original label) pairs.
    pub fn fingerprint(&self) -> u64 {
        let mut rows: Vec<(u64, u32)> = (0..self.len()).map(|i| (self.ids[i], self.original_label(i))).collect();
        rows.sort_unstable();
        let text = format!("{rows:?}");
        crate::nn::spec::fnv1a(text.as_bytes())
    }
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]`, every
/// sample is tagged `split`, and IDs are assigned consecutively from
/// `first_id`.
pub fn load_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
    first_id: u64,
) -> Result<LabeledImageSet<T>> {
    let images = idx::read_images(images_path)?;
    let labels = idx::read_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(Error::CountMismatch { images: images.count, labels: labels.len() });
    }
    let frame = images.rows * images.cols;
    let scale = T::lit(1.0 / 255.0);
    let tensors = images
        .pixels
        .chunks_exact(frame.max(1))
        .take(images.count)
        .map(|px| {
            Tensor::new(vec![images.rows, images.cols, 1], px.iter().map(|&p| T::lit(f64::from(p)) * scale).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let original: Vec<u32> = labels.iter().map(|&l| u32::from(l)).collect();
    LabeledImageSet::from_original_labels(tensors, &original, split, first_id)
}

/// Centers every image in a zero-padded `height x width` frame. A source
/// pixel `(y, x)` lands at `(y + (height - h) / 2, x + (width - w) / 2)`.
pub fn standardize<T: Scalar>(set: &LabeledImageSet<T>, target: (usize, usize)) -> Result<LabeledImageSet<T>> {
    let Some(shape) = set.image_shape() else { return Ok(set.clone()) };
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::Config(format!("cannot pad {h}x{w} images down to {th}x{tw}")));
    }
    let (oy, ox) = ((th - h) / 2, (tw - w) / 2);
    let mut out = set.clone();
    for im in out.images.iter_mut() {
        let mut padded = Tensor::zeros(&[th, tw, c]);
        let src = im.data();
        let dst = padded.data_mut();
        for y in 0..h {
            let from = y * w * c;
            let to = ((y + oy) * tw + ox) * c;
            dst[to..to + w * c].copy_from_slice(&src[from..from + w * c]);
        }
        *im = padded;
    }
    Ok(out)
}

/// Partitions a set by class. `target_classes` are original labels; each side
/// gets a dense re-indexing recorded in its class list.
pub fn split_classes<T: Scalar>(
    set: &LabeledImageSet<T>,
    target_classes: &[u32],
) -> Result<(LabeledImageSet<T>, LabeledImageSet<T>)> {
    let wanted: BTreeSet<u32> = target_classes.iter().copied().collect();
    if let Some(missing) = wanted.iter().find(|c| !set.classes.contains(c)) {
        return Err(Error::Config(format!("target class {missing} not in class universe {:?}", set.classes)));
    }
    if wanted.is_empty() || wanted.len() == set.classes.len() {
        return Err(Error::Config("target classes must be a proper, nonempty subset of the class universe".into()));
    }
    let side = |keep_target: bool| -> Result<LabeledImageSet<T>> {
        let classes: Vec<u32> = set.classes.iter().copied().filter(|c| wanted.contains(c) == keep_target).collect();
        let idx: Vec<usize> = (0..set.len()).filter(|&i| wanted.contains(&set.original_label(i)) == keep_target).collect();
        LabeledImageSet::new(
            idx.iter().map(|&i| set.images[i].clone()).collect(),
            idx.iter().map(|&i| classes.binary_search(&set.original_label(i)).expect("kept")).collect(),
            idx.iter().map(|&i| set.splits[i]).collect(),
            idx.iter().map(|&i| set.ids[i]).collect(),
            classes,
        )
    };
    Ok((side(true)?, side(false)?))
}

/// Plain-text split manifest: one `<sample id> <tag>` line per sample.
pub fn write_split_manifest<T: Scalar>(path: impl AsRef<Path>, set: &LabeledImageSet<T>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for i in 0..set.len() {
        text.push_str(&format!("{} {}\n", set.id(i), set.split(i)));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_split_manifest(path: impl AsRef<Path>) -> Result<Vec<(u64, Split)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut parts = line.split_whitespace();
            let (Some(id), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(path, format!("line {}: expected `<id> <tag>`", n + 1)));
            };
            let id = id.parse().map_err(|_| Error::format(path, format!("line {}: bad id `{id}`", n + 1)))?;
            Ok((id, tag.parse()?))
        })
        .collect()
}

/// Re-tags samples listed in a manifest; unknown IDs are an error.
pub fn apply_split_manifest<T: Scalar>(set: &mut LabeledImageSet<T>, manifest: &[(u64, Split)]) -> Result<()> {
    let position: std::collections::HashMap<u64, usize> = set.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    for &(id, split) in manifest {
        let &i = position.get(&id).ok_or_else(|| Error::Data(format!("manifest id {id} not in set")))?;
        set.splits[i] = split;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_set(labels: &[u32], side: usize) -> LabeledImageSet<f64> {
        let images = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Tensor::filled(&[side, side, 1], f64::from(l) + i as f64 * 1e-3))
            .collect();
        LabeledImageSet::from_original_labels(images, labels, Split::Train, 0).unwrap()
    }

    #[test]
    fn standardize_pads_centered() {
        let set = toy_set(&[3, 4], 28);
        let out = standardize(&set, (32, 32)).unwrap();
        let im = out.image(0);
        assert_eq!(im.shape(), &[32, 32, 1]);
        assert_eq!(im.get(&[2, 2, 0]), set.image(0).get(&[0, 0, 0]));
        assert_eq!(im.get(&[29, 29, 0]), set.image(0).get(&[27, 27, 0]));
        assert_eq!(im.get(&[1, 5, 0]), 0.0);
        assert_eq!(im.get(&[30, 30, 0]), 0.0);
        let nonzero = im.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 28 * 28);
    }

    #[test]
    fn standardize_identity_and_shrink_error() {
        let set = toy_set(&[1], 6);
        assert_eq!(standardize(&set, (6, 6)).unwrap(), set);
        assert!(standardize(&set, (5, 6)).is_err());
    }

    #[test]
    fn split_classes_partitions() {
        let labels: Vec<u32> = (0..30).map(|i| i % 10).collect();
        let set = toy_set(&labels, 2);
        let (target, rest) = split_classes(&set, &[5, 6, 7, 8, 9]).unwrap();
        assert_eq!(target.classes(), &[5, 6, 7, 8, 9]);
        assert_eq!(rest.classes(), &[0, 1, 2, 3, 4]);
        assert!((0..rest.len()).all(|i| rest.original_label(i) < 5));
        assert_eq!(target.len() + rest.len(), 30);
        assert_eq!(target.label(0), 0);
        assert_eq!(target.original_label(0), 5);

        let (single, others) = split_classes(&set, &[3]).unwrap();
        assert_eq!(single.num_classes(), 1);
        assert_eq!(others.num_classes(), 9);
    }

    #[test]
    fn split_classes_rejects_empty_and_full() {
        let set = toy_set(&[0, 1, 2], 2);
        assert!(split_classes(&set, &[]).is_err());
        assert!(split_classes(&set, &[0, 1, 2]).is_err());
        assert!(split_classes(&set, &[7]).is_err());
    }

    #[test]
    fn merge_restores_partition() {
        let labels: Vec<u32> = (0..20).map(|i| (i * 7) % 10).collect();
        let set = toy_set(&labels, 2);
        let (a, b) = split_classes(&set, &[1, 4, 9]).unwrap();
        let merged = LabeledImageSet::merge(&a, &b).unwrap();
        assert_eq!(merged.len(), set.len());
        assert_eq!(merged.fingerprint(), set.fingerprint());
        let mut left: Vec<(u64, u32)> = (0..set.len()).map(|i| (set.id(i), set.original_label(i))).collect();
        let mut right: Vec<(u64, u32)> = (0..merged.len()).map(|i| (merged.id(i), merged.original_label(i))).collect();
        left.sort();
        right.sort();
        assert_eq!(left, right);
    }

    #[test]
    fn validation_carve_is_seeded() {
        let set = toy_set(&(0..50).map(|i| i % 5).collect::<Vec<_>>(), 2);
        let mut a = set.clone();
        let mut b = set.clone();
        a.assign_validation(0.2, &mut Rng::new(3)).unwrap();
        b.assign_validation(0.2, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.indices(Split::Validation).len(), 10);
        assert_eq!(a.indices(Split::Train).len(), 40);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = toy_set(&[0, 1, 0, 1], 2);
        set.set_split(1, Split::Validation);
        set.set_split(3, Split::Test);
        let path = dir.path().join("split.txt");
        write_split_manifest(&path, &set).unwrap();
        let manifest = read_split_manifest(&path).unwrap();
        let mut fresh = toy_set(&[0, 1, 0, 1], 2);
        apply_split_manifest(&mut fresh, &manifest).unwrap();
        assert_eq!(fresh, set);
    }

    #[test]
    fn load_idx_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let images = idx::IdxImages { count: 2, rows: 2, cols: 2, pixels: vec![0, 255, 51, 102, 1, 2, 3, 4] };
        idx::write_file(dir.path().join("img"), &idx::encode_images(&images)).unwrap();
        idx::write_file(dir.path().join("lab"), &idx::encode_labels(&[9, 2])).unwrap();
        let set: LabeledImageSet<f64> = load_idx(dir.path().join("img"), dir.path().join("lab"), Split::Train, 0).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.image(0).data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(set.image(1).data()[3], 4.0 / 255.0);
        assert_eq!(set.original_label(0), 9);
        assert_eq!(set.original_label(1), 2);
        assert_eq!(set.classes(), &[2, 9]);

        idx::write_file(dir.path().join("lab3"), &idx::encode_labels(&[1, 2, 3])).unwrap();
        let err = load_idx::<f64>(dir.path().join("img"), dir.path().join("lab3"), Split::Train, 0).unwrap_err();
        assert!(matches!(err, Error::CountMismatch { images: 2, labels: 3 }));
    }
}
