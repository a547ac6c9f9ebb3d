use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use super::bleu::ngram_counts;
use crate::error::{Error, Result};

const MAX_N: usize = 4;

/// TF-IDF weights in order of first occurrence, so that every sum over the
/// vector runs in a fixed order.
type TfIdf<'a, T> = Vec<(&'a [T], f64)>;

fn tfidf<'a, T: Eq + Hash>(
    tokens: &'a [T],
    n: usize,
    doc_freq: &HashMap<&[T], usize>,
    log_n: f64,
) -> TfIdf<'a, T> {
    let counts = ngram_counts(tokens, n);
    let mut seen = HashSet::new();
    tokens
        .windows(n)
        .filter(|g| seen.insert(*g))
        .map(|g| {
            let df = doc_freq.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, counts[g] as f64 * (log_n - df.ln()))
        })
        .collect()
}

fn cosine<T: Eq + Hash>(a: &TfIdf<'_, T>, b: &TfIdf<'_, T>) -> f64 {
    let norm = |v: &TfIdf<'_, T>| v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .filter_map(|(g, x)| b.iter().find(|(h, _)| h == g).map(|(_, y)| x * y))
        .sum();
    dot / (na * nb)
}

/// CIDEr: TF-IDF n-gram cosine similarity (n = 1..4) between each candidate
/// and its references, averaged over references and n, scaled by 10, and
/// averaged over videos. Document frequencies count videos whose reference
/// set contains the n-gram.
pub fn cider<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::shape(
            "cider",
            format!("{} candidates", candidates.len()),
            format!("{} reference sets", references.len()),
        ));
    }
    if candidates.len() < 2 {
        return Err(Error::invalid(
            "cider: need at least two videos for document frequencies",
        ));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("cider: candidate {i} has no references")));
    }
    let log_n = (references.len() as f64).ln();

    let mut per_video = vec![0.0; candidates.len()];
    for n in 1..=MAX_N {
        let mut doc_freq: HashMap<&[T], usize> = HashMap::new();
        for refs in references {
            let grams: HashSet<&[T]> = refs
                .iter()
                .flat_map(|r| ngram_counts(r, n).into_keys())
                .collect();
            for g in grams {
                *doc_freq.entry(g).or_insert(0) += 1;
            }
        }
        for (score, (cand, refs)) in per_video.iter_mut().zip(candidates.iter().zip(references)) {
            let vc = tfidf(cand, n, &doc_freq, log_n);
            let sim: f64 = refs
                .iter()
                .map(|r| cosine(&vc, &tfidf(r, n, &doc_freq, log_n)))
                .sum::<f64>()
                / refs.len() as f64;
            *score += sim;
        }
    }
    let total: f64 = per_video.iter().map(|s| 10.0 * s / MAX_N as f64).sum();
    Ok(total / candidates.len() as f64)
}
