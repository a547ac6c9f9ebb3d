//! Desk-scale synthetic captioning corpus.
//!
//! Every video realizes a latent (subject, verb, object) template. The 2D
//! feature is the sum of a subject and an object prototype, the 3D feature is
//! the verb prototype, so the template is recoverable from `v` exactly when
//! `feature_noise` is zero. Captions read "a SUBJ is VERB a OBJ", optionally
//! perturbed by paraphrase edits that change wording and length.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::io::{split_paths, write_jsonl, write_token_file};
use super::{
    build_tag_vocabulary, default_stoplist, tokenize, CaptionLine, Corpus, Dataset, FeatureLine,
    Split, VideoRecord, Vocabulary,
};
use crate::error::{Error, Result};
use crate::numkit::SeededRng;

const SUBJECTS: &[&str] = &["man", "woman", "dog", "cat", "boy", "girl", "chef", "player"];
const VERBS: &[&str] = &[
    "cooking", "playing", "riding", "eating", "cutting", "holding", "throwing", "washing",
];
const OBJECTS: &[&str] = &[
    "guitar", "ball", "bicycle", "pizza", "onion", "bottle", "horse", "car",
];
const ADJECTIVES: &[&str] = &["young", "small", "tall"];
const PLACES: &[&str] = &["outside", "indoors", "together"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub captions_per_video: usize,
    pub subjects: usize,
    pub verbs: usize,
    pub objects: usize,
    /// Number of distinct (subject, verb, object) templates in use.
    pub templates: usize,
    pub dim_2d: usize,
    pub dim_3d: usize,
    /// Probability that a caption receives a paraphrase edit.
    pub noise: f64,
    /// Standard deviation of Gaussian jitter added to the features.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train: 50,
            val: 10,
            test: 10,
            captions_per_video: 3,
            subjects: 4,
            verbs: 4,
            objects: 4,
            templates: 10,
            dim_2d: 16,
            dim_3d: 16,
            noise: 0.0,
            feature_noise: 0.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("synthetic spec: {m}")));
        if self.train + self.val + self.test < 10 {
            return bad("need at least 10 videos".into());
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return bad("every split needs at least one video".into());
        }
        if self.dim_2d < 2 || self.dim_3d < 2 {
            return bad("feature dims must be >= 2".into());
        }
        if self.captions_per_video == 0 {
            return bad("captions_per_video must be >= 1".into());
        }
        if self.subjects == 0 || self.subjects > SUBJECTS.len()
            || self.verbs == 0 || self.verbs > VERBS.len()
            || self.objects == 0 || self.objects > OBJECTS.len()
        {
            return bad(format!(
                "pool sizes must be in 1..={}",
                SUBJECTS.len().min(VERBS.len()).min(OBJECTS.len())
            ));
        }
        // <unk>, <eos>, "a", "is" plus the pools
        let vocab = 4 + self.subjects + self.verbs + self.objects;
        if vocab < 8 {
            return bad(format!("vocabulary of {vocab} tokens is below 8"));
        }
        let combos = self.subjects * self.verbs * self.objects;
        if self.templates == 0 || self.templates > combos {
            return bad(format!(
                "{} templates requested, pools support {combos}",
                self.templates
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(self.feature_noise >= 0.0) {
            return bad("noise must be in [0,1], feature_noise >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub features: FeatureLine,
    pub captions: CaptionLine,
    /// Index into [`SyntheticCorpus::templates`].
    pub template: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SynthSpec,
    /// (subject, verb, object) word triples.
    pub templates: Vec<[String; 3]>,
    pub train: Vec<SyntheticVideo>,
    pub val: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

fn gaussian(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..dim).map(|_| rng.normal()).collect()
}

fn realize(template: &[String; 3], noise: f64, rng: &mut SeededRng) -> String {
    let [subj, verb, obj] = template;
    if noise > 0.0 && rng.uniform() < noise {
        match rng.below(4) {
            0 => {
                let adj = ADJECTIVES[rng.below(ADJECTIVES.len())];
                format!("a {adj} {subj} is {verb} a {obj}")
            }
            1 => {
                let place = PLACES[rng.below(PLACES.len())];
                format!("a {subj} is {verb} a {obj} {place}")
            }
            2 => format!("the {subj} is {verb} the {obj}"),
            _ => format!("a {subj} {verb} a {obj}"),
        }
    } else {
        format!("a {subj} is {verb} a {obj}")
    }
}

/// Deterministic in `spec.seed`.
pub fn generate_synthetic_dataset(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);

    let mut combos: Vec<(usize, usize, usize)> = Vec::new();
    for s in 0..spec.subjects {
        for v in 0..spec.verbs {
            for o in 0..spec.objects {
                combos.push((s, v, o));
            }
        }
    }
    rng.shuffle(&mut combos);
    combos.truncate(spec.templates);
    let templates: Vec<[String; 3]> = combos
        .iter()
        .map(|&(s, v, o)| [SUBJECTS[s], VERBS[v], OBJECTS[o]].map(String::from))
        .collect();

    let scale = 1.0 / 2f64.sqrt();
    let subj_proto: Vec<_> = (0..spec.subjects).map(|_| gaussian(spec.dim_2d, &mut rng)).collect();
    let obj_proto: Vec<_> = (0..spec.objects).map(|_| gaussian(spec.dim_2d, &mut rng)).collect();
    let verb_proto: Vec<_> = (0..spec.verbs).map(|_| gaussian(spec.dim_3d, &mut rng)).collect();

    let make_split = |split: Split, n: usize, rng: &mut SeededRng| -> Vec<SyntheticVideo> {
        (0..n)
            .map(|i| {
                // the first train videos cover every template once
                let t = if split == Split::Train && i < templates.len() {
                    i
                } else {
                    rng.below(templates.len())
                };
                let (s, v, o) = combos[t];
                let mut res2d: Vec<f64> = subj_proto[s]
                    .iter()
                    .zip(&obj_proto[o])
                    .map(|(a, b)| scale * (a + b))
                    .collect();
                let mut res3d = verb_proto[v].clone();
                if spec.feature_noise > 0.0 {
                    for x in res2d.iter_mut().chain(res3d.iter_mut()) {
                        *x += spec.feature_noise * rng.normal();
                    }
                }
                let id = format!("{split}_{i:04}");
                let captions = (0..spec.captions_per_video)
                    .map(|_| realize(&templates[t], spec.noise, rng))
                    .collect();
                SyntheticVideo {
                    features: FeatureLine {
                        id: id.clone(),
                        res2d,
                        res3d,
                    },
                    captions: CaptionLine { id, captions },
                    template: t,
                }
            })
            .collect()
    };
    let train = make_split(Split::Train, spec.train, &mut rng);
    let val = make_split(Split::Val, spec.val, &mut rng);
    let test = make_split(Split::Test, spec.test, &mut rng);

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        templates,
        train,
        val,
        test,
    })
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> &[SyntheticVideo] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn train_val_tokens(&self) -> Vec<Vec<String>> {
        self.train
            .iter()
            .chain(&self.val)
            .flat_map(|v| v.captions.captions.iter().map(|c| tokenize(c)))
            .collect()
    }

    /// Vocabulary (min count 1) and tags from train+val captions. `tag_k`
    /// defaults to every eligible token, capped at 300.
    pub fn to_corpus(&self, tag_k: Option<usize>) -> Result<Corpus> {
        let toks = self.train_val_tokens();
        let vocab = Arc::new(Vocabulary::build(&toks, 1, None));
        let stop = default_stoplist();
        let eligible: HashSet<&String> = toks
            .iter()
            .flatten()
            .filter(|t| !stop.contains(*t))
            .collect();
        let k = tag_k.unwrap_or_else(|| eligible.len().min(300));
        let tags = Arc::new(build_tag_vocabulary(&toks, k, &stop, &vocab)?);
        let build = |split: Split| {
            let records = self
                .split(split)
                .iter()
                .map(|v| VideoRecord {
                    id: v.features.id.clone(),
                    res2d: v.features.res2d.clone(),
                    res3d: v.features.res3d.clone(),
                    captions: v
                        .captions
                        .captions
                        .iter()
                        .map(|c| vocab.encode(&tokenize(c)))
                        .collect(),
                })
                .collect();
            Dataset::new(split, records, vocab.clone(), tags.clone())
        };
        Ok(Corpus {
            train: build(Split::Train)?,
            val: build(Split::Val)?,
            test: build(Split::Test)?,
            vocab: vocab.clone(),
            tags: tags.clone(),
        })
    }

    /// Writes raw feature/caption files for every split plus `vocab.txt`
    /// and `tags.txt`.
    pub fn write(&self, dir: &Path, tag_k: Option<usize>) -> Result<Corpus> {
        let corpus = self.to_corpus(tag_k)?;
        for split in Split::ALL {
            let (f, c) = split_paths(dir, split);
            let videos = self.split(split);
            write_jsonl(&f, videos.iter().map(|v| &v.features))?;
            write_jsonl(&c, videos.iter().map(|v| &v.captions))?;
        }
        write_token_file(&dir.join(Corpus::VOCAB_FILE), corpus.vocab.tokens())?;
        write_token_file(&dir.join(Corpus::TAG_FILE), corpus.tags.tags())?;
        Ok(corpus)
    }
}
