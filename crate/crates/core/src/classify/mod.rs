//! SVM (SMO, one-vs-one) and k-NN classification over precomputed kernels.

mod knn;
mod smo;

pub use knn::{knn_predict, select_k, select_k_holdout, KSelection, KnnModel, DEFAULT_K_GRID};

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{GramMatrix, GramState};
use crate::scalar::Scalar;
use smo::Dense;

pub const DEFAULT_C_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoConfig {
    pub tolerance: f64,
    /// Defaults to `max(100_000, 100 * n)`.
    pub max_iterations: Option<usize>,
    /// Admit raw or cross-processed square grams that are not Mercer kernels.
    pub allow_non_mercer: bool,
}

impl Default for SmoConfig {
    fn default() -> Self {
        Self { tolerance: 1e-3, max_iterations: None, allow_non_mercer: false }
    }
}

impl SmoConfig {
    fn max_iter(&self, n: usize) -> usize {
        self.max_iterations.unwrap_or_else(|| (100 * n).max(100_000))
    }
}

/// Binary machine: `f(x) = sum_i coef_i K(x, sv_i) + bias`, predicting the
/// positive class when `f >= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub support_ids: Vec<u64>,
    /// `alpha_i * y_i` for each support vector.
    pub dual_coef: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub positive_class: u32,
    pub negative_class: u32,
    pub gram_state: GramState,
    pub gram_provenance: u64,
    pub iterations: usize,
}

fn dense_of<T: Scalar>(g: &GramMatrix<T>) -> Dense {
    Dense { n: g.rows(), data: g.values().iter().map(|v| v.as_f64()).collect() }
}

fn check_training_gram<T: Scalar>(k: &GramMatrix<T>, cfg: &SmoConfig) -> Result<()> {
    if !k.is_square_on_ids() {
        return Err(Error::Data("SVM training needs a square gram with identical row and column ids".into()));
    }
    if !k.state().is_mercer() && !cfg.allow_non_mercer {
        return Err(Error::State { expected: "psd or coincidence (or allow_non_mercer)", found: k.state().name() });
    }
    Ok(())
}

fn check_binary(labels: &[i8]) -> Result<()> {
    if labels.iter().any(|&l| l != 1 && l != -1) {
        return Err(Error::Data("binary labels must be +1 or -1".into()));
    }
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(Error::Data("SVM training needs both +1 and -1 labels".into()));
    }
    Ok(())
}

fn fit_dense(k: &Dense, ids: &[u64], labels: &[i8], c: f64, cfg: &SmoConfig, classes: (u32, u32)) -> Result<SvmModel> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("slack penalty C must be positive, got {c}")));
    }
    check_binary(labels)?;
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let sol = smo::solve(k, &y, c, cfg.tolerance, cfg.max_iter(k.n))?;
    let mut support_ids = Vec::new();
    let mut dual_coef = Vec::new();
    for (t, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support_ids.push(ids[t]);
            dual_coef.push(a * y[t]);
        }
    }
    Ok(SvmModel {
        support_ids,
        dual_coef,
        bias: -sol.rho,
        c,
        positive_class: classes.0,
        negative_class: classes.1,
        gram_state: GramState::Raw,
        gram_provenance: 0,
        iterations: sol.iterations,
    })
}

/// Trains a binary C-SVC on a square training gram. Labels are `+1`/`-1`.
pub fn smo_fit<T: Scalar>(k: &GramMatrix<T>, labels: &[i8], c: f64, cfg: &SmoConfig) -> Result<SvmModel> {
    check_training_gram(k, cfg)?;
    if labels.len() != k.rows() {
        return Err(Error::Data(format!("{} labels for a {}-row gram", labels.len(), k.rows())));
    }
    let mut model = fit_dense(&dense_of(k), k.row_ids(), labels, c, cfg, (1, 0))?;
    model.gram_state = k.state();
    model.gram_provenance = k.provenance_hash();
    Ok(model)
}

/// The gram state a test-versus-train block must carry for a model trained
/// on a kernel in `train` state.
pub fn expected_test_state(train: GramState) -> GramState {
    match train {
        GramState::Psd | GramState::Symmetrized | GramState::CrossSymmetrized => GramState::CrossSymmetrized,
        GramState::Coincidence | GramState::CrossCoincidence => GramState::CrossCoincidence,
        GramState::Raw => GramState::Raw,
    }
}

fn check_test_gram<T: Scalar>(train: GramState, k_test: &GramMatrix<T>) -> Result<()> {
    let want = expected_test_state(train);
    // a square gram on the training ids is its own test block
    if k_test.state() == want || k_test.state() == train {
        Ok(())
    } else {
        Err(Error::State { expected: want.name(), found: k_test.state().name() })
    }
}

fn support_columns(ids: &[u64], index: &HashMap<u64, usize>) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| index.get(id).copied().ok_or_else(|| Error::Data(format!("test gram has no column for support sample {id}"))))
        .collect()
}

impl SvmModel {
    fn decision_rows(&self, rows: usize, row: impl Fn(usize, usize) -> f64, cols: &[usize]) -> Vec<f64> {
        (0..rows)
            .map(|r| self.dual_coef.iter().zip(cols).map(|(a, &c)| a * row(r, c)).sum::<f64>() + self.bias)
            .collect()
    }

    /// Decision values for each test row; reads only the support columns.
    pub fn decision_values<T: Scalar>(&self, k_test: &GramMatrix<T>) -> Result<Vec<f64>> {
        check_test_gram(self.gram_state, k_test)?;
        let cols = support_columns(&self.support_ids, &k_test.col_index())?;
        Ok(self.decision_rows(k_test.rows(), |r, c| k_test.get(r, c).as_f64(), &cols))
    }

    pub fn predict<T: Scalar>(&self, k_test: &GramMatrix<T>) -> Result<Vec<i8>> {
        Ok(self.decision_values(k_test)?.into_iter().map(|f| if f >= 0.0 { 1 } else { -1 }).collect())
    }

    /// Largest violation of the soft-margin optimality conditions on the
    /// training gram: `y f >= 1` at zero, `y f == 1` when free, `y f <= 1` at `C`.
    pub fn kkt_violation<T: Scalar>(&self, k: &GramMatrix<T>, labels: &[i8]) -> Result<f64> {
        let index = k.col_index();
        let cols = support_columns(&self.support_ids, &index)?;
        let f = self.decision_rows(k.rows(), |r, c| k.get(r, c).as_f64(), &cols);
        let alpha: HashMap<u64, f64> = self.support_ids.iter().zip(&self.dual_coef).map(|(&id, &a)| (id, a.abs())).collect();
        let bound = self.c * (1.0 - 1e-12);
        let mut worst = 0.0f64;
        for (r, &id) in k.row_ids().iter().enumerate() {
            let margin = f64::from(labels[r]) * f[r];
            let a = alpha.get(&id).copied().unwrap_or(0.0);
            let v = if a <= 0.0 {
                1.0 - margin
            } else if a >= bound {
                margin - 1.0
            } else {
                (margin - 1.0).abs()
            };
            worst = worst.max(v);
        }
        Ok(worst)
    }

    /// `sum_i alpha_i y_i`, zero at any feasible point.
    pub fn coefficient_sum(&self) -> f64 {
        self.dual_coef.iter().sum()
    }
}

pub fn svm_predict<T: Scalar>(model: &SvmModel, k_test: &GramMatrix<T>) -> Result<Vec<i8>> {
    model.predict(k_test)
}

/// One binary machine per unordered class pair, combined by majority vote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneVsOne {
    pub classes: Vec<u32>,
    pub c: f64,
    pub machines: Vec<SvmModel>,
    pub gram_state: GramState,
    pub gram_provenance: u64,
}

fn ovo_fit_dense(k: &Dense, ids: &[u64], labels: &[u32], c: f64, cfg: &SmoConfig) -> Result<(Vec<u32>, Vec<SvmModel>)> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (t, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(t);
    }
    let classes: Vec<u32> = by_class.keys().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Data(format!("one-vs-one needs at least two classes, found {}", classes.len())));
    }
    let mut pairs = Vec::new();
    for (a, &ca) in classes.iter().enumerate() {
        for &cb in &classes[a + 1..] {
            pairs.push((ca, cb));
        }
    }
    let machines = pairs
        .par_iter()
        .map(|&(ca, cb)| {
            let idx: Vec<usize> = by_class[&ca].iter().chain(&by_class[&cb]).copied().collect();
            let sub = k.principal(&idx);
            let sub_ids: Vec<u64> = idx.iter().map(|&t| ids[t]).collect();
            let y: Vec<i8> = idx.iter().map(|&t| if labels[t] == ca { 1 } else { -1 }).collect();
            fit_dense(&sub, &sub_ids, &y, c, cfg, (ca, cb))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((classes, machines))
}

pub fn ovo_fit<T: Scalar>(k: &GramMatrix<T>, labels: &[u32], c: f64, cfg: &SmoConfig) -> Result<OneVsOne> {
    check_training_gram(k, cfg)?;
    if labels.len() != k.rows() {
        return Err(Error::Data(format!("{} labels for a {}-row gram", labels.len(), k.rows())));
    }
    let (classes, mut machines) = ovo_fit_dense(&dense_of(k), k.row_ids(), labels, c, cfg)?;
    let provenance = k.provenance_hash();
    for m in &mut machines {
        m.gram_state = k.state();
        m.gram_provenance = provenance;
    }
    Ok(OneVsOne { classes, c, machines, gram_state: k.state(), gram_provenance: provenance })
}

/// Majority vote; ties go to the larger summed margin, then the smaller label.
fn vote(classes: &[u32], machines: &[SvmModel], decisions: &[Vec<f64>], row: usize) -> u32 {
    let mut tally: BTreeMap<u32, (usize, f64)> = classes.iter().map(|&c| (c, (0, 0.0))).collect();
    for (m, d) in machines.iter().zip(decisions) {
        let f = d[row];
        let winner = if f >= 0.0 { m.positive_class } else { m.negative_class };
        tally.get_mut(&winner).expect("known class").0 += 1;
        tally.get_mut(&m.positive_class).expect("known class").1 += f;
        tally.get_mut(&m.negative_class).expect("known class").1 -= f;
    }
    let mut best = (classes[0], tally[&classes[0]]);
    for (&c, &(votes, margin)) in tally.iter().skip(1) {
        let (bv, bm) = best.1;
        if votes > bv || (votes == bv && margin > bm) {
            best = (c, (votes, margin));
        }
    }
    best.0
}

impl OneVsOne {
    fn predict_rows(&self, rows: usize, row: impl Fn(usize, usize) -> f64 + Sync, index: &HashMap<u64, usize>) -> Result<Vec<u32>> {
        let decisions = self
            .machines
            .iter()
            .map(|m| Ok(m.decision_rows(rows, &row, &support_columns(&m.support_ids, index)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..rows).map(|r| vote(&self.classes, &self.machines, &decisions, r)).collect())
    }

    pub fn predict<T: Scalar>(&self, k_test: &GramMatrix<T>) -> Result<Vec<u32>> {
        check_test_gram(self.gram_state, k_test)?;
        self.predict_rows(k_test.rows(), |r, c| k_test.get(r, c).as_f64(), &k_test.col_index())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CSelection {
    pub c: f64,
    /// `(C, validation accuracy)` for each distinct grid value, ascending.
    pub scores: Vec<(f64, f64)>,
}

/// Indices where `mask` equals `want`.
pub fn positions(mask: &[bool], want: bool) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m == want).map(|(i, _)| i).collect()
}

/// Picks the slack penalty with the best one-vs-one accuracy on the rows
/// flagged in `validation`, training on the rest. Ties go to the smallest C.
pub fn select_c<T: Scalar>(
    k: &GramMatrix<T>,
    labels: &[u32],
    validation: &[bool],
    grid: &[f64],
    cfg: &SmoConfig,
) -> Result<CSelection> {
    check_training_gram(k, cfg)?;
    if labels.len() != k.rows() || validation.len() != k.rows() {
        return Err(Error::Data("labels and validation mask must match the gram rows".into()));
    }
    let grid = distinct_grid(grid)?;
    let fit = positions(validation, false);
    let val = positions(validation, true);
    if val.is_empty() || fit.is_empty() {
        return Err(Error::Data("C selection needs both fitting and validation rows".into()));
    }
    let dense = dense_of(k);
    let sub = dense.principal(&fit);
    let fit_ids: Vec<u64> = fit.iter().map(|&t| k.row_ids()[t]).collect();
    let fit_labels: Vec<u32> = fit.iter().map(|&t| labels[t]).collect();
    let index: HashMap<u64, usize> = fit.iter().map(|&t| (k.row_ids()[t], t)).collect();
    let mut scores = Vec::with_capacity(grid.len());
    for &c in &grid {
        let (classes, machines) = ovo_fit_dense(&sub, &fit_ids, &fit_labels, c, cfg)?;
        let model = OneVsOne { classes, c, machines, gram_state: k.state(), gram_provenance: 0 };
        let pred = model.predict_rows(val.len(), |r, col| dense.at(val[r], col), &index)?;
        let truth: Vec<u32> = val.iter().map(|&t| labels[t]).collect();
        let acc = accuracy(&pred, &truth);
        log::info!("C={c}: validation accuracy {acc:.4}");
        scores.push((c, acc));
    }
    Ok(best_of(scores))
}

fn distinct_grid(grid: &[f64]) -> Result<Vec<f64>> {
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.is_empty() {
        return Err(Error::Config("empty C grid".into()));
    }
    Ok(grid)
}

fn best_of(scores: Vec<(f64, f64)>) -> CSelection {
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    CSelection { c: best.0, scores }
}

/// Like [`select_c`], but the validation rows come as a separate test-style
/// block `k_val` (validation x fitting samples) processed the way test rows
/// are, instead of being sliced out of one processed gram.
pub fn select_c_holdout<T: Scalar>(
    k_fit: &GramMatrix<T>,
    fit_labels: &[u32],
    k_val: &GramMatrix<T>,
    val_labels: &[u32],
    grid: &[f64],
    cfg: &SmoConfig,
) -> Result<CSelection> {
    if val_labels.len() != k_val.rows() || val_labels.is_empty() {
        return Err(Error::Data("validation labels must match the validation rows".into()));
    }
    let grid = distinct_grid(grid)?;
    let mut scores = Vec::with_capacity(grid.len());
    for c in grid {
        let model = ovo_fit(k_fit, fit_labels, c, cfg)?;
        let acc = accuracy(&model.predict(k_val)?, val_labels);
        log::info!("C={c}: held-out validation accuracy {acc:.4}");
        scores.push((c, acc));
    }
    Ok(best_of(scores))
}

pub fn accuracy<L: PartialEq>(predicted: &[L], truth: &[L]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// `sample_id,predicted,true` rows.
pub fn predictions_csv(ids: &[u64], predicted: &[u32], truth: &[u32]) -> String {
    let mut out = String::from("sample_id,predicted,true\n");
    for ((id, p), t) in ids.iter().zip(predicted).zip(truth) {
        let _ = writeln!(out, "{id},{p},{t}");
    }
    out
}
