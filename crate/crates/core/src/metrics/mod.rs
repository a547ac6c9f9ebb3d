//! Caption metrics (BLEU-4, ROUGE-L, CIDEr), multi-label mAP, the overall
//! score and caption-length statistics.
//!
//! Caption metrics are generic over the token type so they work on both
//! strings and vocabulary indices. Scores are on a 0..1 scale (CIDEr on
//! 0..10); the overall score is scale-invariant so this does not matter when
//! comparing against published tables in percent.

mod bleu;
mod cider;
mod map;
mod rouge;

use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bleu::{bleu4, corpus_bleu};
pub use cider::cider;
pub use map::{average_precision, mean_average_precision};
pub use rouge::{rouge_l, ROUGE_BETA};

/// Mean of `value / top` over the supplied metric pairs.
pub fn overall_score_partial(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("overall score over no metrics"));
    }
    let mut sum = 0.0;
    for &(value, top) in pairs {
        if !(top > 0.0) {
            return Err(Error::invalid(format!("overall score: top value {top} is not positive")));
        }
        if value < 0.0 {
            return Err(Error::invalid(format!("overall score: metric value {value} < 0")));
        }
        if value > top {
            log::warn!("metric value {value} exceeds top {top}; overall score may exceed 1");
        }
        sum += value / top;
    }
    Ok(sum / pairs.len() as f64)
}

/// Overall score of a model row `(B-4, CIDEr, METEOR, ROUGE-L)` against the
/// per-metric best values `tops` in the same order.
pub fn overall_score(model: [f64; 4], tops: [f64; 4]) -> Result<f64> {
    let pairs: Vec<(f64, f64)> = model.into_iter().zip(tops).collect();
    overall_score_partial(&pairs)
}

/// Column maximum, i.e. `top1` over a set of compared models.
pub fn top1(values: &[f64]) -> Option<f64> {
    values.iter().copied().reduce(f64::max)
}

/// Mean caption length in tokens.
pub fn caption_length_stats<T>(captions: &[Vec<T>]) -> Result<f64> {
    if captions.is_empty() {
        return Err(Error::invalid("caption_length_stats: no captions"));
    }
    let total: usize = captions.iter().map(Vec::len).sum();
    Ok(total as f64 / captions.len() as f64)
}

/// Best known value per metric, used as the denominators of the overall score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tops {
    pub bleu4: f64,
    pub cider: f64,
    #[serde(default)]
    pub meteor: Option<f64>,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor: Option<f64>,
    pub overall: Option<f64>,
}

impl MetricReport {
    /// BLEU-4, ROUGE-L and CIDEr of a candidate set; METEOR and the overall
    /// score are left empty.
    pub fn compute<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<Self> {
        Ok(MetricReport {
            bleu4: bleu4(candidates, references)?,
            rouge_l: rouge_l(candidates, references)?,
            cider: cider(candidates, references)?,
            meteor: None,
            overall: None,
        })
    }

    /// (value, top) pairs for every metric present in both `self` and `tops`.
    pub fn ratio_pairs(&self, tops: &Tops) -> Vec<(f64, f64)> {
        let mut pairs = vec![(self.bleu4, tops.bleu4), (self.cider, tops.cider)];
        if let (Some(m), Some(t)) = (self.meteor, tops.meteor) {
            pairs.push((m, t));
        }
        pairs.push((self.rouge_l, tops.rouge_l));
        pairs
    }

    pub fn with_overall(mut self, tops: &Tops) -> Result<Self> {
        self.overall = Some(overall_score_partial(&self.ratio_pairs(tops))?);
        Ok(self)
    }
}

impl Tops {
    /// Column maxima over a set of reports; METEOR only when every report has it.
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Option<Self> {
        let reports: Vec<&MetricReport> = reports.into_iter().collect();
        let col = |f: fn(&MetricReport) -> f64| top1(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
        let meteor: Option<Vec<f64>> = reports.iter().map(|r| r.meteor).collect();
        Some(Tops {
            bleu4: col(|r| r.bleu4)?,
            cider: col(|r| r.cider)?,
            meteor: meteor.and_then(|m| top1(&m)),
            rouge_l: col(|r| r.rouge_l)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const YT_TOPS: [f64; 4] = [62.4, 109.7, 39.0, 77.0];

    #[test]
    fn overall_table_rows() {
        let mtvc = overall_score([54.5, 92.4, 36.0, 72.8], YT_TOPS).unwrap();
        assert!((mtvc - 0.8961).abs() <= 5e-5);
        let sibnet = overall_score([54.2, 88.2, 34.8, 71.7], YT_TOPS).unwrap();
        assert!((sibnet - 0.8740).abs() <= 5e-5);
        assert_eq!(overall_score(YT_TOPS, YT_TOPS).unwrap(), 1.0);
        let msr = overall_score([40.8, 47.1, 28.8, 60.2], [45.8, 53.4, 29.7, 63.6]).unwrap();
        assert!((msr - 0.9223).abs() <= 5e-5);
    }

    #[test]
    fn overall_rejects_zero_top() {
        assert!(overall_score([1.0; 4], [1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn overall_is_scale_invariant() {
        let a = overall_score([54.5, 92.4, 36.0, 72.8], YT_TOPS).unwrap();
        let b = overall_score([0.545, 92.4, 36.0, 72.8], [0.624, 109.7, 39.0, 77.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mean_lengths() {
        let caps = vec![vec!["a", "b"], vec!["a", "b", "c", "d"]];
        assert_eq!(caption_length_stats(&caps).unwrap(), 3.0);
        assert_eq!(caption_length_stats(&caps[..1]).unwrap(), 2.0);
        assert!(caption_length_stats::<u8>(&[]).is_err());
    }

    #[test]
    fn report_overall_skips_missing_meteor() {
        let r = MetricReport {
            bleu4: 0.5,
            rouge_l: 0.5,
            cider: 1.0,
            meteor: None,
            overall: None,
        };
        let tops = Tops {
            bleu4: 1.0,
            cider: 2.0,
            meteor: Some(0.3),
            rouge_l: 1.0,
        };
        assert_eq!(r.with_overall(&tops).unwrap().overall, Some(0.5));
    }
}
