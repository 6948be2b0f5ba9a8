//! Ranking and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};

/// Average precision of one class. `None` when the class has no positives.
///
/// Items are ranked by descending score with ties broken by index. AP is the
/// mean, over positives, of the precision at each positive's rank.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Result<Option<f64>> {
    if scores.len() != targets.len() {
        return Err(EatError::Invalid(format!(
            "{} scores vs {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EatError::Invalid("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// Per-class AP; `None` for classes without positives.
    pub ap: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Unweighted mean of per-class AP over classes that have a positive.
/// `scores` and `targets` are `N x C`, row per item.
pub fn map_multilabel(scores: &[Vec<f64>], targets: &[Vec<bool>]) -> Result<MapReport> {
    if scores.len() != targets.len() || scores.is_empty() {
        return Err(EatError::Invalid(format!(
            "mAP needs matching non-empty inputs, got {} and {}",
            scores.len(),
            targets.len()
        )));
    }
    let c = scores[0].len();
    if scores.iter().any(|r| r.len() != c) || targets.iter().any(|r| r.len() != c) {
        return Err(EatError::Invalid("ragged score or target rows".into()));
    }
    let mut ap = Vec::with_capacity(c);
    let mut skipped = Vec::new();
    for k in 0..c {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let t: Vec<bool> = targets.iter().map(|r| r[k]).collect();
        let a = average_precision(&s, &t)?;
        if a.is_none() {
            skipped.push(k);
        }
        ap.push(a);
    }
    let present: Vec<f64> = ap.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(EatError::Data("no class has a positive example".into()));
    }
    Ok(MapReport {
        map: present.iter().sum::<f64>() / present.len() as f64,
        ap,
        skipped,
    })
}

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(EatError::Invalid(format!("{} predictions vs {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(EatError::Invalid("accuracy of an empty set".into()));
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// Index of the largest entry, first on ties.
pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
