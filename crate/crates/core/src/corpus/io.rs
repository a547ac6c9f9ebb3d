//! Line-delimited JSON feature/caption files and one-token-per-line
//! vocabulary files.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    build_tag_vocabulary, default_stoplist, tokenize, Corpus, Dataset, Split, TagVocabulary,
    VideoRecord, Vocabulary, EOS_ID,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureLine {
    pub id: String,
    pub res2d: Vec<f64>,
    pub res3d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionLine {
    pub id: String,
    pub captions: Vec<String>,
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).expect("serializable record");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Vec<FeatureLine>> {
    let lines: Vec<(usize, FeatureLine)> = read_jsonl(path)?;
    let mut dims: Option<(usize, usize)> = None;
    for (line, f) in &lines {
        let d = (f.res2d.len(), f.res3d.len());
        match dims {
            None => dims = Some(d),
            Some(expect) if expect != d => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    msg: format!(
                        "feature dims ({}, {}) differ from ({}, {})",
                        d.0, d.1, expect.0, expect.1
                    ),
                })
            }
            _ => {}
        }
    }
    Ok(lines.into_iter().map(|(_, f)| f).collect())
}

pub fn read_caption_file(path: &Path) -> Result<Vec<CaptionLine>> {
    let lines: Vec<(usize, CaptionLine)> = read_jsonl(path)?;
    for (line, c) in &lines {
        if c.captions.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("video {:?} has no captions", c.id),
            });
        }
    }
    Ok(lines.into_iter().map(|(_, c)| c).collect())
}

pub fn write_feature_file(path: &Path, lines: &[FeatureLine]) -> Result<()> {
    write_jsonl(path, lines)
}

pub fn write_caption_file(path: &Path, lines: &[CaptionLine]) -> Result<()> {
    write_jsonl(path, lines)
}

/// One token per line; the line number is the index.
pub fn read_token_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tok = line.trim_end_matches('\r');
        if tok.trim().is_empty() || tok.contains(char::is_whitespace) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected a single token, got {tok:?}"),
            });
        }
        out.push(tok.to_string());
    }
    Ok(out)
}

pub fn write_token_file(path: &Path, tokens: &[String]) -> Result<()> {
    let mut text = tokens.join("\n");
    text.push('\n');
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn tokenize_captions(lines: &[CaptionLine]) -> Vec<Vec<String>> {
    lines
        .iter()
        .flat_map(|c| c.captions.iter().map(|s| tokenize(s)))
        .collect()
}

/// Reads one split. Without a vocabulary one is built from this split's
/// captions (min count 1); without a tag vocabulary the most frequent
/// non-stoplist tokens (up to 300) are used.
pub fn load_dataset(
    split: Split,
    features: &Path,
    captions: &Path,
    vocab: Option<Arc<Vocabulary>>,
    tags: Option<Arc<TagVocabulary>>,
) -> Result<Dataset> {
    let feats = read_feature_file(features)?;
    let caps = read_caption_file(captions)?;

    let mut by_id: HashMap<&str, &CaptionLine> = HashMap::new();
    for c in &caps {
        if by_id.insert(c.id.as_str(), c).is_some() {
            return Err(Error::Data(format!(
                "{}: duplicate id {:?}",
                captions.display(),
                c.id
            )));
        }
    }
    let feat_ids: BTreeSet<&str> = feats.iter().map(|f| f.id.as_str()).collect();
    let cap_ids: BTreeSet<&str> = by_id.keys().copied().collect();
    if feat_ids != cap_ids {
        let missing_caps: Vec<_> = feat_ids.difference(&cap_ids).collect();
        let missing_feats: Vec<_> = cap_ids.difference(&feat_ids).collect();
        return Err(Error::Data(format!(
            "id mismatch between {} and {}: without captions {:?}, without features {:?}",
            features.display(),
            captions.display(),
            missing_caps,
            missing_feats
        )));
    }

    let vocab = match vocab {
        Some(v) => v,
        None => Arc::new(Vocabulary::build(&tokenize_captions(&caps), 1, None)),
    };
    let tags = match tags {
        Some(t) => t,
        None => {
            let toks = tokenize_captions(&caps);
            let stop = default_stoplist();
            let eligible = toks
                .iter()
                .flatten()
                .filter(|t| !stop.contains(*t) && vocab.get(t).is_some_and(|i| i > 1))
                .collect::<BTreeSet<_>>()
                .len();
            Arc::new(build_tag_vocabulary(&toks, eligible.min(300), &stop, &vocab)?)
        }
    };

    let records = feats
        .into_iter()
        .map(|f| {
            let cl = by_id[f.id.as_str()];
            let captions = cl
                .captions
                .iter()
                .map(|s| vocab.encode(&tokenize(s)))
                .collect();
            VideoRecord {
                id: f.id,
                res2d: f.res2d,
                res3d: f.res3d,
                captions,
            }
        })
        .collect();
    Dataset::new(split, records, vocab, tags)
}

/// Writes a split back out in the same formats `load_dataset` reads.
pub fn save_dataset(dataset: &Dataset, features: &Path, captions: &Path) -> Result<()> {
    let feats: Vec<FeatureLine> = dataset
        .records
        .iter()
        .map(|r| FeatureLine {
            id: r.id.clone(),
            res2d: r.res2d.clone(),
            res3d: r.res3d.clone(),
        })
        .collect();
    let caps: Vec<CaptionLine> = dataset
        .records
        .iter()
        .map(|r| CaptionLine {
            id: r.id.clone(),
            captions: r
                .captions
                .iter()
                .map(|c| dataset.vocab.decode(c).join(" "))
                .collect(),
        })
        .collect();
    write_feature_file(features, &feats)?;
    write_caption_file(captions, &caps)
}

pub(crate) fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{split}_features.jsonl")),
        dir.join(format!("{split}_captions.jsonl")),
    )
}

impl Corpus {
    pub const VOCAB_FILE: &'static str = "vocab.txt";
    pub const TAG_FILE: &'static str = "tags.txt";

    /// Feature/caption file pair for `split` inside a corpus directory.
    pub fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
        split_paths(dir, split)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_token_file(&dir.join(Self::VOCAB_FILE), self.vocab.tokens())?;
        write_token_file(&dir.join(Self::TAG_FILE), self.tags.tags())?;
        for split in Split::ALL {
            let (f, c) = split_paths(dir, split);
            save_dataset(self.split(split), &f, &c)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Arc::new(Vocabulary::from_tokens(read_token_file(
            &dir.join(Self::VOCAB_FILE),
        )?)?);
        let tags = Arc::new(TagVocabulary::from_tags(
            read_token_file(&dir.join(Self::TAG_FILE))?,
            &vocab,
        )?);
        Self::load_with(dir, vocab, tags)
    }

    /// Loads a directory holding only the split files: the vocabulary and
    /// the tags are built from the train and val captions. `tag_k` defaults to every
    /// eligible token, capped at 300.
    pub fn build(
        dir: &Path,
        min_count: usize,
        tag_k: Option<usize>,
        stoplist: &HashSet<String>,
    ) -> Result<Self> {
        let mut toks = Vec::new();
        for split in [Split::Train, Split::Val] {
            let (_, captions) = split_paths(dir, split);
            toks.extend(tokenize_captions(&read_caption_file(&captions)?));
        }
        let vocab = Arc::new(Vocabulary::build(&toks, min_count, None));
        let eligible = toks
            .iter()
            .flatten()
            .filter(|t| !stoplist.contains(*t) && vocab.get(t).is_some_and(|i| i > EOS_ID))
            .collect::<BTreeSet<_>>()
            .len();
        let k = tag_k.unwrap_or(eligible.min(300));
        let tags = Arc::new(build_tag_vocabulary(&toks, k, stoplist, &vocab)?);
        Self::load_with(dir, vocab, tags)
    }

    fn load_with(dir: &Path, vocab: Arc<Vocabulary>, tags: Arc<TagVocabulary>) -> Result<Self> {
        let load = |split| {
            let (f, c) = split_paths(dir, split);
            load_dataset(split, &f, &c, Some(vocab.clone()), Some(tags.clone()))
        };
        Ok(Corpus {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
            vocab: vocab.clone(),
            tags: tags.clone(),
        })
    }
}
