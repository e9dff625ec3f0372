use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Area under the ROC curve: the probability that a random positive outscores
/// a random negative, ties counting one half. Computed from average ranks.
pub fn auc_roc<T: Scalar>(scores: &[T], targets: &[u8]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::Data(format!("{} scores for {} targets", scores.len(), targets.len())));
    }
    if let Some(bad) = targets.iter().find(|&&t| t > 1) {
        return Err(Error::Data(format!("target {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let positives = targets.iter().filter(|&&t| t == 1).count();
    let negatives = targets.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Data("AUC needs both positive and negative targets".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    let mut positive_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share their mean
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        let tied_positives = order[start..end].iter().filter(|&&k| targets[k] == 1).count();
        positive_rank_sum += mean_rank * tied_positives as f64;
        start = end;
    }
    let p = positives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}
