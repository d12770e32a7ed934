//! Quality scores used to check layouts, classifiers and searches.

use std::collections::HashSet;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::types::squared_l2;

/// Fraction of `exact` that also appears in `approx`.
pub fn recall<T: Eq + Hash>(approx: &[T], exact: &[T]) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let found: HashSet<&T> = approx.iter().collect();
    exact.iter().filter(|e| found.contains(e)).count() as f64 / exact.len() as f64
}

/// Area under the ROC curve via the rank-sum statistic; tied scores share
/// their average rank.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidParam("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidParam("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if positive[o] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean silhouette coefficient of 2-D points under the given labels.
/// Points that are alone in their class score 0.
pub fn silhouette<L: Eq + Hash + Clone>(coords: &[[f32; 2]], labels: &[L]) -> Result<f64> {
    if coords.len() != labels.len() {
        return Err(Error::InvalidParam("coords and labels differ in length".into()));
    }
    let classes: Vec<L> = {
        let mut seen = Vec::new();
        for l in labels {
            if !seen.contains(l) {
                seen.push(l.clone());
            }
        }
        seen
    };
    if classes.len() < 2 {
        return Err(Error::InvalidParam("silhouette needs at least two classes".into()));
    }
    let class_of: Vec<usize> = labels.iter().map(|l| classes.iter().position(|c| c == l).unwrap()).collect();
    let sizes: Vec<usize> = (0..classes.len()).map(|c| class_of.iter().filter(|&&x| x == c).count()).collect();
    let mut total = 0.0;
    for i in 0..coords.len() {
        let mut sums = vec![0.0f64; classes.len()];
        for j in 0..coords.len() {
            if i != j {
                sums[class_of[j]] += squared_l2(&coords[i], &coords[j]).sqrt() as f64;
            }
        }
        let own = class_of[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..classes.len())
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / coords.len() as f64)
}
