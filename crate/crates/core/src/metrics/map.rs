use crate::error::{Error, Result};

/// Average precision of one ranking: samples sorted by descending score
/// (stable, so ties keep sample order), precision averaged over the ranks of
/// the positives. `None` when there is no positive.
pub fn average_precision(scores: &[f64], truths: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truths[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean over tags (with at least one positive) of per-tag average precision.
/// `scores[i][k]` is sample `i`'s score for tag `k`; `truths` is 0/1.
pub fn mean_average_precision(scores: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64> {
    if scores.len() != truths.len() {
        return Err(Error::shape(
            "mean_average_precision",
            format!("{} score rows", scores.len()),
            format!("{} truth rows", truths.len()),
        ));
    }
    let k = scores.first().map_or(0, Vec::len);
    for (i, (s, t)) in scores.iter().zip(truths).enumerate() {
        if s.len() != k || t.len() != k {
            return Err(Error::shape(
                "mean_average_precision",
                format!("row {i}: {} scores", s.len()),
                format!("{} truths (K = {k})", t.len()),
            ));
        }
        if t.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::invalid(format!("row {i}: truths must be 0/1")));
        }
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for tag in 0..k {
        let col: Vec<f64> = scores.iter().map(|s| s[tag]).collect();
        let pos: Vec<bool> = truths.iter().map(|t| t[tag] == 1.0).collect();
        if let Some(ap) = average_precision(&col, &pos) {
            sum += ap;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::invalid("mean_average_precision: no positive labels"));
    }
    Ok(sum / counted as f64)
}
