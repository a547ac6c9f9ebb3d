use crate::error::{Error, Result};

/// Recall weight of the LCS F-measure.
pub const ROUGE_BETA: f64 = 1.2;

pub(crate) fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn lcs_f<T: PartialEq>(cand: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(cand, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / cand.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over videos of the best LCS F-measure against that video's references.
pub fn rouge_l<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("rouge_l: empty candidate set"));
    }
    if candidates.len() != references.len() {
        return Err(Error::shape(
            "rouge_l",
            format!("{} candidates", candidates.len()),
            format!("{} reference sets", references.len()),
        ));
    }
    let mut sum = 0.0;
    for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
        if refs.is_empty() {
            return Err(Error::invalid(format!("rouge_l: candidate {i} has no references")));
        }
        sum += refs.iter().map(|r| lcs_f(cand, r)).fold(0.0, f64::max);
    }
    Ok(sum / candidates.len() as f64)
}
