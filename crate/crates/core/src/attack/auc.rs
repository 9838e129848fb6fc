//! Area under the ROC curve for scores where larger means "positive".

use crate::error::{Error, Result};

fn sides(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC needs at least one positive and one negative"));
    }
    Ok((pos, neg))
}

fn sorted_order(scores: &[f64]) -> Result<Vec<usize>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("AUC scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    Ok(order)
}

/// Mann–Whitney statistic: `(concordant + ½·ties) / (pos·neg)`.
pub fn auc_mann_whitney(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dimension(labels.len(), scores.len()));
    }
    let (pos, neg) = sides(labels)?;
    let order = sorted_order(scores)?;
    let mut negatives_below = 0.0;
    let mut concordant = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0.0, 0.0);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] { p += 1.0 } else { n += 1.0 }
            j += 1;
        }
        concordant += p * negatives_below + 0.5 * p * n;
        negatives_below += n;
        i = j;
    }
    Ok(concordant / (pos as f64 * neg as f64))
}

/// Trapezoid area under the ROC points traced by sweeping the threshold
/// downward through every distinct score.
pub fn auc_trapezoid(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dimension(labels.len(), scores.len()));
    }
    let (pos, neg) = sides(labels)?;
    let mut order = sorted_order(scores)?;
    order.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] { tp += 1 } else { fp += 1 }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) * 0.5;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}
