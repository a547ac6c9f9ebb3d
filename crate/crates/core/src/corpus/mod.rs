//! Captions, vocabularies, tag vocabularies and video feature records.

mod io;
mod synth;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::concat;

pub use io::{
    load_dataset, read_feature_file, read_caption_file, read_token_file, save_dataset,
    write_caption_file, write_feature_file, write_token_file, CaptionLine, FeatureLine,
};
pub(crate) use io::{read_jsonl, write_jsonl};
pub use synth::{generate_synthetic_dataset, SynthSpec, SyntheticCorpus};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const UNK_ID: usize = 0;
pub const EOS_ID: usize = 1;

/// Lowercases, drops punctuation (apostrophes inside a word survive) and
/// splits on whitespace. The literal reserved tokens `<unk>` and `<eos>` pass
/// through untouched.
pub fn tokenize(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in raw.split_whitespace() {
        let lower = piece.to_lowercase();
        if lower == UNK || lower == EOS {
            out.push(lower);
            continue;
        }
        let cleaned: String = lower
            .chars()
            .map(|c| if c.is_alphanumeric() || c == '\'' { c } else { ' ' })
            .collect();
        for word in cleaned.split_whitespace() {
            let word = word.trim_matches('\'');
            if !word.is_empty() {
                out.push(word.to_string());
            }
        }
    }
    out
}

fn count_tokens<'a>(captions: impl IntoIterator<Item = &'a Vec<String>>) -> Vec<(&'a str, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for cap in captions {
        for tok in cap {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut counts: Vec<_> = counts.into_iter().collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    counts
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, most frequent first
    /// (ties lexicographic), optionally truncated to the `max_size` most
    /// frequent. `<unk>` and `<eos>` occupy indices 0 and 1.
    pub fn build(captions: &[Vec<String>], min_count: usize, max_size: Option<usize>) -> Self {
        let min_count = min_count.max(1);
        let mut tokens = vec![UNK.to_string(), EOS.to_string()];
        tokens.extend(
            count_tokens(captions)
                .into_iter()
                .filter(|(t, c)| *c >= min_count && *t != UNK && *t != EOS)
                .take(max_size.unwrap_or(usize::MAX))
                .map(|(t, _)| t.to_string()),
        );
        Vocabulary::from_tokens_unchecked(tokens)
    }

    fn from_tokens_unchecked(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Rebuilds a vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[UNK_ID] != UNK || tokens[EOS_ID] != EOS {
            return Err(Error::Data(format!(
                "vocabulary must start with {UNK} and {EOS}"
            )));
        }
        let vocab = Vocabulary::from_tokens_unchecked(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Data("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, falling back to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to indices and terminates the sequence with exactly one
    /// `<eos>`; any `<eos>` already present is dropped.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids: Vec<usize> = tokens
            .iter()
            .filter(|t| t.as_str() != EOS)
            .map(|t| self.id(t))
            .collect();
        ids.push(EOS_ID);
        ids
    }

    /// Token strings up to (excluding) the first `<eos>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS_ID)
            .map(|&i| self.tokens[i].clone())
            .collect()
    }
}

pub fn build_vocabulary(captions: &[Vec<String>], min_count: usize) -> Vocabulary {
    Vocabulary::build(captions, min_count, None)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVocabulary {
    tags: Vec<String>,
    token_ids: Vec<usize>,
}

impl TagVocabulary {
    pub fn from_tags(tags: Vec<String>, vocab: &Vocabulary) -> Result<Self> {
        if tags.is_empty() {
            return Err(Error::Data("tag vocabulary is empty".into()));
        }
        let mut seen = HashSet::new();
        let mut token_ids = Vec::with_capacity(tags.len());
        for t in &tags {
            if !seen.insert(t.as_str()) {
                return Err(Error::Data(format!("duplicate tag {t:?}")));
            }
            match vocab.get(t) {
                Some(id) if id != UNK_ID && id != EOS_ID => token_ids.push(id),
                _ => return Err(Error::Data(format!("tag {t:?} is not in the vocabulary"))),
            }
        }
        Ok(TagVocabulary { tags, token_ids })
    }

    /// Number of tags, K.
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    /// Caption-vocabulary index of each tag.
    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }
}

/// The `k` most frequent in-vocabulary tokens outside `stoplist`.
pub fn build_tag_vocabulary(
    captions: &[Vec<String>],
    k: usize,
    stoplist: &HashSet<String>,
    vocab: &Vocabulary,
) -> Result<TagVocabulary> {
    let eligible: Vec<String> = count_tokens(captions)
        .into_iter()
        .filter(|(t, _)| !stoplist.contains(*t))
        .filter(|(t, _)| matches!(vocab.get(t), Some(id) if id > EOS_ID))
        .map(|(t, _)| t.to_string())
        .collect();
    if k == 0 || k > eligible.len() {
        return Err(Error::invalid(format!(
            "requested {k} tags but only {} eligible tokens",
            eligible.len()
        )));
    }
    TagVocabulary::from_tags(eligible.into_iter().take(k).collect(), vocab)
}

/// Function words excluded from tag candidates.
pub fn default_stoplist() -> HashSet<String> {
    const WORDS: &[&str] = &[
        "a", "an", "the", "is", "are", "was", "were", "be", "been", "being", "am", "and", "or",
        "but", "of", "in", "on", "at", "to", "for", "with", "by", "from", "into", "onto", "up",
        "down", "out", "over", "under", "about", "as", "it", "its", "it's", "this", "that",
        "these", "those", "there", "here", "he", "she", "they", "them", "his", "her", "their",
        "him", "we", "you", "i", "my", "your", "our", "some", "someone", "something", "while",
        "then", "than", "so", "very", "too", "also", "not", "no", "do", "does", "did", "has",
        "have", "had", "can", "will", "would", "should", "could", "what", "which", "who", "whom",
        "where", "when", "how", "all", "each", "other", "another", "one", "two", "s",
    ];
    WORDS.iter().map(|w| w.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    /// 2D (static appearance) feature.
    pub res2d: Vec<f64>,
    /// 3D (spatio-temporal) feature.
    pub res3d: Vec<f64>,
    /// Token-index captions, each terminated by a single `<eos>`.
    pub captions: Vec<Vec<usize>>,
}

impl VideoRecord {
    pub fn features(&self) -> Vec<f64> {
        concat_features(&self.res2d, &self.res3d)
    }
}

/// `v = (r; e)`.
pub fn concat_features(r: &[f64], e: &[f64]) -> Vec<f64> {
    concat(r, e)
}

/// Binary tag indicator: 1 where the tag occurs in any caption of the record.
pub fn tag_ground_truth(record: &VideoRecord, tags: &TagVocabulary) -> Vec<f64> {
    let present: HashSet<usize> = record.captions.iter().flatten().copied().collect();
    tags.token_ids()
        .iter()
        .map(|id| if present.contains(id) { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub records: Vec<VideoRecord>,
    pub vocab: Arc<Vocabulary>,
    pub tags: Arc<TagVocabulary>,
}

impl Dataset {
    pub fn new(
        split: Split,
        records: Vec<VideoRecord>,
        vocab: Arc<Vocabulary>,
        tags: Arc<TagVocabulary>,
    ) -> Result<Self> {
        let mut ids = HashSet::new();
        let dims = records.first().map(|r| (r.res2d.len(), r.res3d.len()));
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate video id {:?} in {split}", r.id)));
            }
            if Some((r.res2d.len(), r.res3d.len())) != dims {
                let (d2, d3) = dims.unwrap_or_default();
                return Err(Error::Data(format!(
                    "video {:?} has feature dims ({}, {}), expected ({d2}, {d3})",
                    r.id,
                    r.res2d.len(),
                    r.res3d.len()
                )));
            }
            if r.res2d.iter().chain(&r.res3d).any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("video {:?} has non-finite features", r.id)));
            }
            for cap in &r.captions {
                let eos = cap.iter().filter(|&&t| t == EOS_ID).count();
                if cap.last() != Some(&EOS_ID) || eos != 1 {
                    return Err(Error::Data(format!(
                        "video {:?}: caption must end with exactly one {EOS}",
                        r.id
                    )));
                }
                if let Some(bad) = cap.iter().find(|&&t| t >= vocab.len()) {
                    return Err(Error::Data(format!(
                        "video {:?}: token index {bad} outside vocabulary of {}",
                        r.id,
                        vocab.len()
                    )));
                }
            }
        }
        Ok(Dataset {
            split,
            records,
            vocab,
            tags,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim_2d(&self) -> usize {
        self.records.first().map_or(0, |r| r.res2d.len())
    }

    pub fn dim_3d(&self) -> usize {
        self.records.first().map_or(0, |r| r.res3d.len())
    }

    pub fn ground_truth(&self) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .map(|r| tag_ground_truth(r, &self.tags))
            .collect()
    }

    /// Reference captions as token strings (no `<eos>`), one list per video.
    pub fn reference_tokens(&self) -> Vec<Vec<Vec<String>>> {
        self.records
            .iter()
            .map(|r| r.captions.iter().map(|c| self.vocab.decode(c)).collect())
            .collect()
    }
}

/// The three splits sharing one vocabulary and tag vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Arc<Vocabulary>,
    pub tags: Arc<TagVocabulary>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}
