//! Gram matrices from a Siamese network and their post-processing into
//! Mercer kernels.

mod auc;
mod eigen;
mod io;

pub use auc::auc_roc;
pub use eigen::{eigh, psd_project, spectrum_report, EigenDecomposition, SpectrumReport};
pub use io::{read_gram, write_gram, MAGIC};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};
use crate::siamese::SiameseNet;
use crate::tensor::Tensor;

/// Post-processing lineage of a gram matrix. The `Cross*` states are
/// rectangular test-versus-train blocks processed to match a square training
/// kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramState {
    Raw,
    Symmetrized,
    Psd,
    Coincidence,
    CrossSymmetrized,
    CrossCoincidence,
}

impl GramState {
    pub fn tag(self) -> u8 {
        match self {
            GramState::Raw => 0,
            GramState::Symmetrized => 1,
            GramState::Psd => 2,
            GramState::Coincidence => 3,
            GramState::CrossSymmetrized => 4,
            GramState::CrossCoincidence => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => GramState::Raw,
            1 => GramState::Symmetrized,
            2 => GramState::Psd,
            3 => GramState::Coincidence,
            4 => GramState::CrossSymmetrized,
            5 => GramState::CrossCoincidence,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            GramState::Raw => "raw",
            GramState::Symmetrized => "symmetrized",
            GramState::Psd => "psd",
            GramState::Coincidence => "coincidence",
            GramState::CrossSymmetrized => "cross_symmetrized",
            GramState::CrossCoincidence => "cross_coincidence",
        }
    }

    /// Whether an SVM dual over this (square) state is guaranteed convex.
    pub fn is_mercer(self) -> bool {
        matches!(self, GramState::Psd | GramState::Coincidence)
    }
}

impl fmt::Display for GramState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Post-processing chain selectable for the training kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostProcess {
    /// Symmetrize, then clip negative eigenvalues.
    #[default]
    Psd,
    /// Symmetrize, then `G^T G`.
    Coincidence,
    None,
}

impl FromStr for PostProcess {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psd" => Ok(PostProcess::Psd),
            "coincidence" => Ok(PostProcess::Coincidence),
            "none" => Ok(PostProcess::None),
            other => Err(Error::Config(format!("unknown post-processing `{other}` (psd, coincidence, none)"))),
        }
    }
}

impl fmt::Display for PostProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PostProcess::Psd => "psd",
            PostProcess::Coincidence => "coincidence",
            PostProcess::None => "none",
        })
    }
}

/// Dense row-major similarity matrix with sample-ID provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
    row_ids: Vec<u64>,
    col_ids: Vec<u64>,
    state: GramState,
}

impl<T: Scalar> GramMatrix<T> {
    pub fn new(values: Vec<T>, row_ids: Vec<u64>, col_ids: Vec<u64>, state: GramState) -> Result<Self> {
        let (rows, cols) = (row_ids.len(), col_ids.len());
        if values.len() != rows * cols {
            return Err(Error::shape("gram values", &[values.len()], &[rows, cols]));
        }
        let g = Self { rows, cols, values, row_ids, col_ids, state };
        g.check_state()?;
        Ok(g)
    }

    fn check_state(&self) -> Result<()> {
        let square = self.is_square_on_ids();
        match self.state {
            GramState::Symmetrized | GramState::Psd | GramState::Coincidence if !square => Err(Error::Data(format!(
                "{} gram must be square over identical row/column ids",
                self.state
            ))),
            GramState::Symmetrized => {
                let asym = self.max_asymmetry();
                if asym != 0.0 {
                    return Err(Error::Asymmetric { max_asymmetry: asym });
                }
                Ok(())
            }
            GramState::Psd => {
                let asym = self.max_asymmetry();
                if asym > 1e-9 {
                    return Err(Error::Asymmetric { max_asymmetry: asym });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols + c]
    }

    pub fn row_ids(&self) -> &[u64] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[u64] {
        &self.col_ids
    }

    pub fn state(&self) -> GramState {
        self.state
    }

    pub fn is_square_on_ids(&self) -> bool {
        self.rows == self.cols && self.row_ids == self.col_ids
    }

    pub fn max_asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs().as_f64());
            }
        }
        worst
    }

    /// Sub-block at the given row and column positions.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            let row = self.row(r);
            values.extend(cols.iter().map(|&c| row[c]));
        }
        let row_ids: Vec<u64> = rows.iter().map(|&r| self.row_ids[r]).collect();
        let col_ids: Vec<u64> = cols.iter().map(|&c| self.col_ids[c]).collect();
        let state = if row_ids == col_ids {
            self.state
        } else {
            match self.state {
                GramState::Raw => GramState::Raw,
                GramState::Symmetrized | GramState::CrossSymmetrized => GramState::CrossSymmetrized,
                GramState::Coincidence | GramState::CrossCoincidence => GramState::CrossCoincidence,
                GramState::Psd => {
                    return Err(Error::Data("an off-diagonal block of a projected kernel has no gram state".into()))
                }
            }
        };
        let g = Self { rows: rows.len(), cols: cols.len(), values, row_ids, col_ids, state };
        g.check_state()?;
        Ok(g)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.rows, self.cols], self.values.clone()).expect("consistent")
    }

    /// Position of every column id.
    pub fn col_index(&self) -> std::collections::HashMap<u64, usize> {
        self.col_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    /// Order-sensitive digest of ids, state and values.
    pub fn provenance_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(16 + 8 * (self.values.len() + self.rows + self.cols));
        bytes.push(self.state.tag());
        for id in self.row_ids.iter().chain(&self.col_ids) {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        for v in &self.values {
            bytes.extend_from_slice(&v.as_f64().to_bits().to_le_bytes());
        }
        crate::nn::spec::fnv1a(&bytes)
    }
}

/// Raw gram `values[r][c] = g(row_r, col_c)` from cached conv features.
pub fn compute_gram<T: Scalar>(
    net: &SiameseNet<T>,
    row_images: &[&Tensor<T>],
    row_ids: &[u64],
    col_images: &[&Tensor<T>],
    col_ids: &[u64],
) -> Result<GramMatrix<T>> {
    Ok(compute_gram_pair(net, row_images, row_ids, col_images, col_ids, false)?.0)
}

/// The raw gram and, when requested, the reverse-order gram
/// `reverse[r][c] = g(col_c, row_r)` needed to symmetrize a rectangular block.
pub fn compute_gram_pair<T: Scalar>(
    net: &SiameseNet<T>,
    row_images: &[&Tensor<T>],
    row_ids: &[u64],
    col_images: &[&Tensor<T>],
    col_ids: &[u64],
    with_reverse: bool,
) -> Result<(GramMatrix<T>, Option<GramMatrix<T>>)> {
    if row_images.is_empty() || col_images.is_empty() {
        return Err(Error::Data("gram over an empty image list".into()));
    }
    if row_images.len() != row_ids.len() || col_images.len() != col_ids.len() {
        return Err(Error::Data("gram image and id lists differ in length".into()));
    }
    let rows = net.conv_features(row_images)?;
    let same = row_ids == col_ids;
    let cols = if same { rows.clone() } else { net.conv_features(col_images)? };
    let (forward, reverse) = net.score_grids(&rows, &cols, with_reverse && !same)?;
    let g = GramMatrix::new(forward, row_ids.to_vec(), col_ids.to_vec(), GramState::Raw)?;
    let rev = match reverse {
        Some(values) => Some(GramMatrix::new(values, row_ids.to_vec(), col_ids.to_vec(), GramState::Raw)?),
        None if with_reverse => Some(transpose_raw(&g)),
        None => None,
    };
    Ok((g, rev))
}

fn transpose_raw<T: Scalar>(g: &GramMatrix<T>) -> GramMatrix<T> {
    let mut values = Vec::with_capacity(g.values.len());
    for c in 0..g.cols {
        values.extend((0..g.rows).map(|r| g.get(r, c)));
    }
    GramMatrix { rows: g.cols, cols: g.rows, values, row_ids: g.col_ids.clone(), col_ids: g.row_ids.clone(), state: GramState::Raw }
}

/// Splits a square raw gram into the raw block over `fit` and the rows of
/// `held` against `fit` in both input orders, laid out like the test blocks
/// of [`compute_gram_pair`], so held-out samples can be post-processed as
/// unseen test samples.
pub fn holdout_blocks<T: Scalar>(
    raw: &GramMatrix<T>,
    fit: &[usize],
    held: &[usize],
) -> Result<(GramMatrix<T>, GramMatrix<T>, GramMatrix<T>)> {
    if raw.state != GramState::Raw || !raw.is_square_on_ids() {
        return Err(Error::State { expected: "square raw gram", found: raw.state.name() });
    }
    let fit_block = raw.select(fit, fit)?;
    let forward = raw.select(held, fit)?;
    let reverse = transpose_raw(&raw.select(fit, held)?);
    Ok((fit_block, forward, reverse))
}

/// `h[i][j] = (g[i][j] + g[j][i]) / 2` on a square raw gram. Exactly symmetric;
/// the diagonal is unchanged.
pub fn symmetrize<T: Scalar>(g: &GramMatrix<T>) -> Result<GramMatrix<T>> {
    if g.state != GramState::Raw {
        return Err(Error::State { expected: "raw", found: g.state.name() });
    }
    if !g.is_square_on_ids() {
        return Err(Error::Data(format!(
            "symmetrize needs a square gram over identical ids, got {}x{}",
            g.rows, g.cols
        )));
    }
    let n = g.rows;
    let half = T::lit(0.5);
    let mut values = g.values.clone();
    for i in 0..n {
        for j in i + 1..n {
            let h = (g.get(i, j) + g.get(j, i)) * half;
            values[i * n + j] = h;
            values[j * n + i] = h;
        }
    }
    GramMatrix::new(values, g.row_ids.clone(), g.col_ids.clone(), GramState::Symmetrized)
}

/// Symmetrizes a rectangular block from its two input orders:
/// `h[r][c] = (forward[r][c] + reverse[r][c]) / 2` with
/// `reverse[r][c] = g(col_c, row_r)`.
pub fn symmetrize_cross<T: Scalar>(forward: &GramMatrix<T>, reverse: &GramMatrix<T>) -> Result<GramMatrix<T>> {
    for g in [forward, reverse] {
        if g.state != GramState::Raw {
            return Err(Error::State { expected: "raw", found: g.state.name() });
        }
    }
    if forward.row_ids != reverse.row_ids || forward.col_ids != reverse.col_ids {
        return Err(Error::Data("forward and reverse grams cover different samples".into()));
    }
    let half = T::lit(0.5);
    let values = forward.values.iter().zip(&reverse.values).map(|(&a, &b)| (a + b) * half).collect();
    GramMatrix::new(values, forward.row_ids.clone(), forward.col_ids.clone(), GramState::CrossSymmetrized)
}

/// `G^T G`, positive semi-definite by construction.
pub fn coincidence<T: Scalar>(g: &GramMatrix<T>) -> Result<GramMatrix<T>> {
    if !matches!(g.state, GramState::Raw | GramState::Symmetrized) {
        return Err(Error::State { expected: "raw or symmetrized", found: g.state.name() });
    }
    if !g.is_square_on_ids() {
        return Err(Error::Data(format!("coincidence needs a square gram, got {}x{}", g.rows, g.cols)));
    }
    let n = g.rows;
    let mut out = vec![T::zero(); n * n];
    T::gemm(T::one(), MatRef::transposed(&g.values, n, n), MatRef::row_major(&g.values, n, n), T::zero(), &mut out);
    for i in 0..n {
        for j in i + 1..n {
            let v = (out[i * n + j] + out[j * n + i]) * T::lit(0.5);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    GramMatrix::new(out, g.row_ids.clone(), g.col_ids.clone(), GramState::Coincidence)
}

/// Test rows of the co-incidence kernel: `test . train`, where each sample's
/// profile is its column of similarities to the training samples.
pub fn coincidence_cross<T: Scalar>(train: &GramMatrix<T>, test: &GramMatrix<T>) -> Result<GramMatrix<T>> {
    if !matches!(train.state, GramState::Raw | GramState::Symmetrized) || !train.is_square_on_ids() {
        return Err(Error::State { expected: "square raw or symmetrized training gram", found: train.state.name() });
    }
    if !matches!(test.state, GramState::Raw | GramState::CrossSymmetrized) {
        return Err(Error::State { expected: "raw or cross_symmetrized test rows", found: test.state.name() });
    }
    if test.col_ids != train.row_ids {
        return Err(Error::Data("test columns must be the training samples in training order".into()));
    }
    let (m, n) = (test.rows, train.rows);
    let mut out = vec![T::zero(); m * n];
    T::gemm(T::one(), MatRef::row_major(&test.values, m, n), MatRef::row_major(&train.values, n, n), T::zero(), &mut out);
    GramMatrix::new(out, test.row_ids.clone(), train.col_ids.clone(), GramState::CrossCoincidence)
}

/// Applies a post-processing chain to a square raw training gram and the
/// matching test rows (`forward`/`reverse` input orders).
pub fn postprocess<T: Scalar>(
    method: PostProcess,
    train: &GramMatrix<T>,
    test: Option<(&GramMatrix<T>, &GramMatrix<T>)>,
) -> Result<(GramMatrix<T>, Option<GramMatrix<T>>)> {
    match method {
        PostProcess::None => Ok((train.clone(), test.map(|(f, _)| f.clone()))),
        PostProcess::Psd => {
            let k = psd_project(&symmetrize(train)?)?;
            let t = test.map(|(f, r)| symmetrize_cross(f, r)).transpose()?;
            Ok((k, t))
        }
        PostProcess::Coincidence => {
            let h = symmetrize(train)?;
            let t = test.map(|(f, r)| symmetrize_cross(f, r).and_then(|s| coincidence_cross(&h, &s))).transpose()?;
            Ok((coincidence(&h)?, t))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn gram(rows: &[&[f64]], state: GramState) -> GramMatrix<f64> {
        let n = rows.len();
        let m = rows[0].len();
        GramMatrix::new(rows.concat(), (0..n as u64).collect(), (0..m as u64).collect(), state).unwrap()
    }

    #[test]
    fn holdout_blocks_layout() {
        let g = gram(&[&[0.0, 0.1, 0.2], &[1.0, 1.1, 1.2], &[2.0, 2.1, 2.2]], GramState::Raw);
        let (fit, fwd, rev) = holdout_blocks(&g, &[0, 2], &[1]).unwrap();
        assert_eq!(fit.values(), &[0.0, 0.2, 2.0, 2.2]);
        assert_eq!(fit.row_ids(), &[0, 2]);
        assert_eq!(fwd.values(), &[1.0, 1.2]);
        assert_eq!(rev.values(), &[0.1, 2.1]);
        assert_eq!((fwd.row_ids(), fwd.col_ids()), (rev.row_ids(), rev.col_ids()));
        let h = symmetrize_cross(&fwd, &rev).unwrap();
        assert!((h.get(0, 0) - 0.55).abs() < 1e-15 && (h.get(0, 1) - 1.65).abs() < 1e-15);
        let p = psd_project(&symmetrize(&g).unwrap()).unwrap();
        assert!(holdout_blocks(&p, &[0], &[1]).is_err());
    }

    #[test]
    fn symmetrize_examples() {
        let g = gram(&[&[0.9, 0.8], &[0.6, 0.3]], GramState::Raw);
        let h = symmetrize(&g).unwrap();
        assert_eq!(h.values(), &[0.9, 0.7, 0.7, 0.3]);
        assert_eq!(h.state(), GramState::Symmetrized);

        let sym = gram(&[&[1.0, 0.25], &[0.25, 2.0]], GramState::Raw);
        assert_eq!(symmetrize(&sym).unwrap().values(), sym.values());

        let rect = GramMatrix::new(vec![0.0; 6], vec![0, 1], vec![0, 1, 2], GramState::Raw).unwrap();
        assert!(symmetrize(&rect).is_err());
        assert!(matches!(symmetrize(&h), Err(Error::State { .. })));
    }

    #[test]
    fn symmetrize_is_exact_on_random() {
        let mut rng = crate::Rng::new(3);
        let n = 30;
        let values: Vec<f64> = (0..n * n).map(|_| rng.uniform()).collect();
        let g = GramMatrix::new(values, (0..n as u64).collect(), (0..n as u64).collect(), GramState::Raw).unwrap();
        let h = symmetrize(&g).unwrap();
        assert_eq!(h.max_asymmetry(), 0.0);
        for i in 0..n {
            assert_eq!(h.get(i, i), g.get(i, i));
        }
        let again = GramMatrix::new(h.values().to_vec(), h.row_ids().to_vec(), h.col_ids().to_vec(), GramState::Raw).unwrap();
        assert_eq!(symmetrize(&again).unwrap().values(), h.values());
    }

    #[test]
    fn coincidence_examples() {
        let id = gram(&[&[1.0, 0.0], &[0.0, 1.0]], GramState::Raw);
        assert_eq!(coincidence(&id).unwrap().values(), id.values());
        let g = gram(&[&[0.0, 1.0], &[0.0, 0.0]], GramState::Raw);
        assert_eq!(coincidence(&g).unwrap().values(), &[0.0, 0.0, 0.0, 1.0]);
        let rect = GramMatrix::new(vec![0.0; 2], vec![0], vec![0, 1], GramState::Raw).unwrap();
        assert!(coincidence(&rect).is_err());
    }

    #[test]
    fn coincidence_cross_matches_square_block() {
        let mut rng = crate::Rng::new(4);
        let n = 6;
        let values: Vec<f64> = (0..n * n).map(|_| rng.uniform()).collect();
        let all = GramMatrix::new(values, (0..n as u64).collect(), (0..n as u64).collect(), GramState::Raw).unwrap();
        let h = symmetrize(&all).unwrap();
        let full = coincidence(&h).unwrap();
        // treat samples 4 and 5 as "test": their coincidence rows over 0..4 use only training profiles
        let train_idx: Vec<usize> = (0..4).collect();
        let train = symmetrize(&all.select(&train_idx, &train_idx).unwrap()).unwrap();
        let test = h.select(&[4, 5], &train_idx).unwrap();
        let cross = coincidence_cross(&train, &test).unwrap();
        for (t, row) in [4usize, 5].iter().enumerate() {
            for c in 0..4 {
                let want: f64 = (0..4).map(|k| h.get(*row, k) * h.get(k, c)).sum();
                assert!((cross.get(t, c) - want).abs() < 1e-12);
            }
        }
        assert_eq!(cross.state(), GramState::CrossCoincidence);
        assert!(full.get(0, 1) > 0.0);
    }

    #[test]
    fn symmetrized_state_is_enforced() {
        let err = GramMatrix::new(vec![1.0, 0.5, 0.4, 1.0], vec![0, 1], vec![0, 1], GramState::Symmetrized).unwrap_err();
        assert!(matches!(err, Error::Asymmetric { .. }));
        assert!(GramMatrix::new(vec![1.0, 0.5], vec![0], vec![0, 1], GramState::Psd).is_err());
    }
}
