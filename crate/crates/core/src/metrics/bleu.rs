use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

pub(crate) fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Corpus-level BLEU-4 with uniform weights, clipped counts and the
/// closest-reference-length brevity penalty. No smoothing.
pub fn bleu4<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    corpus_bleu(candidates, references, 4, false)
}

/// Corpus-level BLEU up to `max_n`. With `add_one` every n-gram precision
/// becomes `(matches + 1) / (total + 1)`.
pub fn corpus_bleu<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    max_n: usize,
    add_one: bool,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("bleu: empty candidate set"));
    }
    if candidates.len() != references.len() {
        return Err(Error::shape(
            "bleu",
            format!("{} candidates", candidates.len()),
            format!("{} reference sets", references.len()),
        ));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
        if refs.is_empty() {
            return Err(Error::invalid(format!("bleu: candidate {i} has no references")));
        }
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(cand.len()), r))
            .unwrap_or(0);
        for n in 1..=max_n {
            let cand_counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in cand_counts {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }

    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = if add_one {
            (matched[n] as f64 + 1.0, total[n] as f64 + 1.0)
        } else {
            (matched[n] as f64, total[n] as f64)
        };
        if m == 0.0 || t == 0.0 {
            return Ok(0.0);
        }
        log_sum += (m / t).ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}
