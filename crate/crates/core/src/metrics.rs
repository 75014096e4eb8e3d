//! Classification and extraction-quality metrics.
//!
//! Functions returning `Option` use `None` as the flag for an undefined value
//! (single-class AUC, zero-variance correlation).

use crate::error::{Error, Result};

fn check_pair<A, B>(name: &'static str, a: &[A], b: &[B]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::UndefinedMetric(format!("{name} of an empty set")));
    }
    if a.len() != b.len() {
        return Err(Error::shape(name, &[a.len()], &[b.len()]));
    }
    Ok(())
}

pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    check_pair("accuracy", preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// F1 of the positive class (label 1); `0/0` counts as 0.
pub fn f1(preds: &[u8], labels: &[u8]) -> Result<f64> {
    check_pair("f1", preds, labels)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_pair("auc", scores, labels)?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFiniteInput { row: i, col: 0 });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tied groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = 0.5 * (i + j) as f64 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Ok(None);
    }
    Ok(Some((rank_sum_pos - pos * (pos + 1.0) / 2.0) / (pos * neg)))
}

/// Fraction of rows where student and teacher hard labels coincide.
pub fn agreement(student: &[u8], teacher: &[u8]) -> Result<f64> {
    check_pair("agreement", student, teacher)?;
    let same = student.iter().zip(teacher).filter(|(a, b)| a == b).count();
    Ok(same as f64 / student.len() as f64)
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    check_pair("pearson", a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

pub const MIN_CHECKPOINTS: usize = 5;

/// Pearson correlation between checkpoint coverage and agreement.
pub fn coverage_agreement_correlation(coverage: &[f64], agreement: &[f64]) -> Result<Option<f64>> {
    if coverage.len() < MIN_CHECKPOINTS {
        return Err(Error::UndefinedMetric(format!(
            "correlation needs at least {MIN_CHECKPOINTS} checkpoints, got {}",
            coverage.len()
        )));
    }
    pearson(coverage, agreement)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}
