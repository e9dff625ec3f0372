use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{accuracy, positions};
use crate::error::{Error, Result};
use crate::kernel::GramMatrix;
use crate::scalar::Scalar;

pub const DEFAULT_K_GRID: [usize; 4] = [1, 3, 5, 7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub train_ids: Vec<u64>,
    pub train_labels: Vec<u32>,
}

impl KnnModel {
    pub fn new(k: usize, train_ids: Vec<u64>, train_labels: Vec<u32>) -> Result<Self> {
        if train_ids.len() != train_labels.len() {
            return Err(Error::Data(format!("{} ids for {} labels", train_ids.len(), train_labels.len())));
        }
        if k == 0 || k > train_ids.len() {
            return Err(Error::Config(format!("k must be in 1..={}, got {k}", train_ids.len())));
        }
        Ok(Self { k, train_ids, train_labels })
    }
}

/// Label of one similarity row over candidates `(similarity, id, label)`:
/// majority among the `k` most similar (similarity ties to the smaller id);
/// tied classes resolved by whose most similar member has the smaller id.
fn vote(mut candidates: Vec<(f64, u64, u32)>, k: usize) -> u32 {
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut tally: BTreeMap<u32, (usize, u64)> = BTreeMap::new();
    for &(_, id, label) in &candidates[..k] {
        let e = tally.entry(label).or_insert((0, id));
        e.0 += 1;
    }
    let top = tally.values().map(|v| v.0).max().expect("k >= 1");
    tally
        .into_iter()
        .filter(|(_, (votes, _))| *votes == top)
        .min_by_key(|(_, (_, nearest))| *nearest)
        .map(|(label, _)| label)
        .expect("nonempty")
}

/// Labels each test row by its `k` most similar training columns.
pub fn knn_predict<T: Scalar>(model: &KnnModel, k_test: &GramMatrix<T>) -> Result<Vec<u32>> {
    let index = k_test.col_index();
    let cols: Vec<usize> = model
        .train_ids
        .iter()
        .map(|id| index.get(id).copied().ok_or_else(|| Error::Data(format!("test gram has no column for training sample {id}"))))
        .collect::<Result<_>>()?;
    Ok((0..k_test.rows())
        .map(|r| {
            let row = k_test.row(r);
            let candidates = cols
                .iter()
                .zip(&model.train_ids)
                .zip(&model.train_labels)
                .map(|((&c, &id), &l)| (row[c].as_f64(), id, l))
                .collect();
            vote(candidates, model.k)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KSelection {
    pub k: usize,
    /// `(k, validation accuracy)` for each usable grid value, ascending.
    pub scores: Vec<(usize, f64)>,
}

/// Chooses `k` on the rows flagged in `validation`, with the remaining rows
/// as neighbours. Ties go to the smallest `k`; values above the neighbour
/// count are skipped.
pub fn select_k<T: Scalar>(k_train: &GramMatrix<T>, labels: &[u32], validation: &[bool], grid: &[usize]) -> Result<KSelection> {
    if !k_train.is_square_on_ids() || labels.len() != k_train.rows() || validation.len() != k_train.rows() {
        return Err(Error::Data("k selection needs a square gram with matching labels and validation mask".into()));
    }
    let fit = positions(validation, false);
    let val = positions(validation, true);
    if fit.is_empty() || val.is_empty() {
        return Err(Error::Data("k selection needs both neighbour and validation rows".into()));
    }
    let grid = usable_k(grid, fit.len())?;
    let ids = k_train.row_ids();
    let truth: Vec<u32> = val.iter().map(|&t| labels[t]).collect();
    let mut scores = Vec::new();
    for &k in &grid {
        let pred: Vec<u32> = val
            .iter()
            .map(|&r| vote(fit.iter().map(|&c| (k_train.get(r, c).as_f64(), ids[c], labels[c])).collect(), k))
            .collect();
        scores.push((k, accuracy(&pred, &truth)));
    }
    Ok(best_k(scores))
}

fn usable_k(grid: &[usize], neighbours: usize) -> Result<Vec<usize>> {
    let mut grid: Vec<usize> = grid.iter().copied().filter(|&k| k >= 1 && k <= neighbours).collect();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() {
        return Err(Error::Config("no usable k in grid".into()));
    }
    Ok(grid)
}

fn best_k(scores: Vec<(usize, f64)>) -> KSelection {
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    log::info!("k-NN validation picked k={} ({:.4})", best.0, best.1);
    KSelection { k: best.0, scores }
}

/// Chooses `k` from a separate validation block (validation x neighbour
/// samples) processed like test rows.
pub fn select_k_holdout<T: Scalar>(
    fit_ids: &[u64],
    fit_labels: &[u32],
    k_val: &GramMatrix<T>,
    val_labels: &[u32],
    grid: &[usize],
) -> Result<KSelection> {
    if val_labels.len() != k_val.rows() || val_labels.is_empty() {
        return Err(Error::Data("validation labels must match the validation rows".into()));
    }
    let grid = usable_k(grid, fit_ids.len())?;
    let mut scores = Vec::new();
    for k in grid {
        let model = KnnModel::new(k, fit_ids.to_vec(), fit_labels.to_vec())?;
        scores.push((k, accuracy(&knn_predict(&model, k_val)?, val_labels)));
    }
    Ok(best_k(scores))
}
