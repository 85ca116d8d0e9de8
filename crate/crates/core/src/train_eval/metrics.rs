use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoraError, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
///
/// Sorts once and credits each tied group with its average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoraError::dim(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(CoraError::Validation(format!("score {s} cannot be ranked")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.iter().filter(|&&y| y == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(CoraError::Validation("labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(CoraError::UndefinedMetric(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based, tie-averaged) ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-user AUC averaged over users having both classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UaucResult {
    pub value: f64,
    pub users: usize,
    pub skipped: usize,
}

pub fn uauc(scores: &[f64], labels: &[u8], users: &[usize]) -> Result<UaucResult> {
    if scores.len() != labels.len() || scores.len() != users.len() {
        return Err(CoraError::dim("scores, labels and users differ in length"));
    }
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&s, &y), &u) in scores.iter().zip(labels).zip(users) {
        let e = groups.entry(u).or_default();
        e.0.push(s);
        e.1.push(y);
    }
    let mut total = 0.0;
    let mut eligible = 0;
    let mut skipped = 0;
    for (s, y) in groups.values() {
        match auc(s, y) {
            Ok(a) => {
                total += a;
                eligible += 1;
            }
            Err(CoraError::UndefinedMetric(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if eligible == 0 {
        return Err(CoraError::UndefinedMetric(format!(
            "no user has both classes ({skipped} single-class users)"
        )));
    }
    Ok(UaucResult {
        value: total / eligible as f64,
        users: eligible,
        skipped,
    })
}
