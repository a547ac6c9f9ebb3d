use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, EOS_ID};
use crate::error::{Error, Result};
use crate::metrics::{overall_score_partial, MetricReport, Tops};
use crate::numkit::{ParamBlocks, SeededRng};
use crate::scn_decoder::{
    accumulate_backward, forward_sequence, DecodeMode, FreeRun, ScnDims, ScnParameters,
};

use super::{
    adam_update, epsilon_clamped, length_weight, lr_for_step, sequence_log_prob, AdamState,
    ScheduledGuide, TrainConfig,
};

const SHUFFLE_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub embed: usize,
    /// Inner rank of the factorized transforms; the hidden size when unset.
    pub factor: Option<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 64,
            embed: 32,
            factor: None,
        }
    }
}

impl DecoderConfig {
    pub fn dims(&self, visual: usize, tags: usize, vocab: usize) -> ScnDims {
        ScnDims {
            hidden: self.hidden,
            factor: self.factor.unwrap_or(self.hidden),
            embed: self.embed,
            visual,
            tags,
            vocab,
        }
    }
}

/// A split together with one semantic feature per video.
#[derive(Debug, Clone, Copy)]
pub struct CaptionData<'a> {
    pub dataset: &'a Dataset,
    pub semantics: &'a [Vec<f64>],
}

impl<'a> CaptionData<'a> {
    pub fn new(dataset: &'a Dataset, semantics: &'a [Vec<f64>]) -> Result<Self> {
        if semantics.len() != dataset.len() {
            return Err(Error::Data(format!(
                "{} split has {} videos but {} semantic features",
                dataset.split,
                dataset.len(),
                semantics.len()
            )));
        }
        let k = dataset.tags.len();
        for (rec, s) in dataset.records.iter().zip(semantics) {
            if s.len() != k {
                return Err(Error::Data(format!(
                    "semantic feature of {} has {} entries, expected {k}",
                    rec.id,
                    s.len()
                )));
            }
            if s.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::Data(format!("semantic feature of {} outside [0, 1]", rec.id)));
            }
        }
        Ok(CaptionData { dataset, semantics })
    }

    fn features(&self) -> Vec<Vec<f64>> {
        self.dataset.records.iter().map(|r| r.features()).collect()
    }

    /// References without `<eos>`.
    fn references(&self) -> Vec<Vec<Vec<usize>>> {
        self.dataset
            .records
            .iter()
            .map(|r| r.captions.iter().map(|c| strip_eos(c).to_vec()).collect())
            .collect()
    }
}

fn strip_eos(c: &[usize]) -> &[usize] {
    match c.iter().position(|&t| t == EOS_ID) {
        Some(i) => &c[..i],
        None => c,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub fingerprint: String,
    /// Completed epochs; 0 is the initialization.
    pub epoch: usize,
    /// Token strings by id, so generation needs no corpus directory.
    pub vocab: Vec<String>,
    pub params: ScnParameters,
    pub adam: AdamState,
    pub validation: Option<MetricReport>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }
}

pub(crate) fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// One line of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of the length-modulated loss over all training pairs.
    pub loss: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor: Option<f64>,
    /// Against the column maxima of the epochs seen so far.
    pub overall: f64,
    pub token_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best validation checkpoint (the initialization when no epoch ran).
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochRecord>,
}

/// Overall score with metrics whose top is zero left out (every epoch ties
/// on them).
fn selection_score(report: &MetricReport, tops: &Tops) -> Result<f64> {
    let pairs: Vec<(f64, f64)> = report
        .ratio_pairs(tops)
        .into_iter()
        .filter(|&(_, top)| top > 0.0)
        .collect();
    if pairs.is_empty() {
        return Ok(0.0);
    }
    overall_score_partial(&pairs)
}

/// Mini-batch training with scheduled sampling and the length-modulated
/// loss. The validation split is decoded greedily after every epoch and the
/// epoch with the best overall score is returned.
pub fn train_captioner(
    train: CaptionData<'_>,
    val: CaptionData<'_>,
    decoder: &DecoderConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.dataset.is_empty() || val.dataset.is_empty() {
        return Err(Error::Data("train and validation splits must be non-empty".into()));
    }
    let visual = train.dataset.dim_2d() + train.dataset.dim_3d();
    let dims = decoder.dims(visual, train.dataset.tags.len(), train.dataset.vocab.len());
    let mut params = ScnParameters::init(dims, config.seed)?;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = SeededRng::stream(config.seed, SHUFFLE_STREAM);
    let mut sample_rng = SeededRng::stream(config.seed, SAMPLING_STREAM);

    let feats = train.features();
    let pairs: Vec<(usize, usize)> = train
        .dataset
        .records
        .iter()
        .enumerate()
        .flat_map(|(vi, r)| (0..r.captions.len()).map(move |ci| (vi, ci)))
        .collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    let mut trace: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut reports: Vec<MetricReport> = Vec::with_capacity(config.epochs);
    let mut best = Checkpoint {
        fingerprint: String::new(),
        epoch: 0,
        vocab: train.dataset.vocab.tokens().to_vec(),
        params: params.clone(),
        adam: adam.clone(),
        validation: None,
    };

    for ep in 0..config.epochs {
        let eps = epsilon_clamped(ep, config.epsilon_rate, config.epsilon_max);
        let lr_at = |step: u64| match config.lr_decay_interval {
            Some(i) => lr_for_step(step, config.learning_rate, config.lr_decay, i),
            None => config.learning_rate,
        };
        let epoch_lr = lr_at(adam.step);
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for &pi in chunk {
                let (vi, ci) = pairs[pi];
                let targets = &train.dataset.records[vi].captions[ci];
                let mut guide = ScheduledGuide::new(targets, eps, config.strategy, &mut sample_rng)?;
                let run = forward_sequence(&params, &feats[vi], &train.semantics[vi], &mut guide, targets.len())?;
                let weight = length_weight(targets.len(), config.beta);
                let dists: Vec<&[f64]> = run.distributions().collect();
                batch_loss -= weight * sequence_log_prob(&dists, targets)?;
                accumulate_backward(&params, &run, targets, weight, &mut grads)?;
            }
            let step = adam.step as usize;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: ep,
                    step,
                    detail: format!("batch loss {batch_loss}"),
                });
            }
            let lr = lr_at(adam.step);
            adam_update(&mut params, &grads, &mut adam, lr, &config.adam).map_err(|e| Error::Divergence {
                epoch: ep,
                step,
                detail: e.to_string(),
            })?;
            epoch_loss += batch_loss;
        }

        let (report, token_acc) = validate(&params, &val, config.max_len)?;
        reports.push(report);
        let tops = Tops::from_reports(&reports).expect("at least one report");
        let overall = selection_score(&report, &tops)?;
        let best_overall = match &best.validation {
            Some(b) => Some(selection_score(b, &tops)?),
            None => None,
        };
        log::info!(
            "epoch {ep}: loss {epoch_loss:.4} eps {eps:.3} B4 {:.4} R {:.4} C {:.4} acc {token_acc:.4}",
            report.bleu4,
            report.rouge_l,
            report.cider
        );
        trace.push(EpochRecord {
            epoch: ep,
            loss: epoch_loss,
            epsilon: eps,
            lr: epoch_lr,
            bleu4: report.bleu4,
            rouge_l: report.rouge_l,
            cider: report.cider,
            meteor: report.meteor,
            overall,
            token_accuracy: token_acc,
        });
        if best_overall.is_none_or(|b| overall > b) {
            best = Checkpoint {
                fingerprint: String::new(),
                epoch: ep + 1,
                vocab: best.vocab.clone(),
                params: params.clone(),
                adam: adam.clone(),
                validation: Some(report),
            };
        }
    }
    Ok(TrainOutcome {
        checkpoint: best,
        trace,
    })
}

/// Decodes a caption (without `<eos>`). Multinomial mode needs `rng`;
/// argmax mode ignores it.
pub fn generate_caption(
    params: &ScnParameters,
    v: &[f64],
    s: &[f64],
    mode: DecodeMode,
    max_len: usize,
    rng: Option<&mut SeededRng>,
) -> Result<Vec<usize>> {
    let mut guide = match (mode, rng) {
        (DecodeMode::Argmax, _) => FreeRun::argmax(),
        (DecodeMode::Multinomial, Some(rng)) => FreeRun::multinomial(rng),
        (DecodeMode::Multinomial, None) => {
            return Err(Error::invalid("multinomial generation needs a random source"))
        }
    };
    forward_sequence(params, v, s, &mut guide, max_len)?;
    Ok(strip_eos(&guide.tokens).to_vec())
}

/// Captions for every video of a split, in record order.
pub fn generate_split(
    params: &ScnParameters,
    data: &CaptionData<'_>,
    mode: DecodeMode,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut rng = SeededRng::new(seed);
    data.features()
        .iter()
        .zip(data.semantics)
        .map(|(v, s)| generate_caption(params, v, s, mode, max_len, Some(&mut rng)))
        .collect()
}

/// Position-wise accuracy with `<eos>` appended to both sides, over the
/// longer of the two; each caption is scored against its best-matching
/// reference. Micro-averaged over all positions.
pub fn token_accuracy(generated: &[Vec<usize>], references: &[Vec<Vec<usize>>]) -> Result<f64> {
    if generated.len() != references.len() {
        return Err(Error::shape("token_accuracy", generated.len(), references.len()));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (g, refs) in generated.iter().zip(references) {
        let g: Vec<usize> = g.iter().copied().chain([EOS_ID]).collect();
        let best = refs
            .iter()
            .map(|r| {
                let r: Vec<usize> = r.iter().copied().chain([EOS_ID]).collect();
                let h = g.iter().zip(&r).filter(|(a, b)| a == b).count();
                (h, g.len().max(r.len()))
            })
            .max_by(|a, b| (a.0 * b.1).cmp(&(b.0 * a.1)).then(b.1.cmp(&a.1)))
            .ok_or_else(|| Error::invalid("token_accuracy: video without references"))?;
        hits += best.0;
        total += best.1;
    }
    if total == 0 {
        return Err(Error::invalid("token_accuracy: no captions"));
    }
    Ok(hits as f64 / total as f64)
}

/// Greedy-decodes `data` and scores it: (BLEU-4/ROUGE-L/CIDEr report, token
/// accuracy).
pub fn validate(params: &ScnParameters, data: &CaptionData<'_>, max_len: usize) -> Result<(MetricReport, f64)> {
    let generated = generate_split(params, data, DecodeMode::Argmax, max_len, 0)?;
    let refs = data.references();
    let report = MetricReport::compute(&generated, &refs)?;
    let acc = token_accuracy(&generated, &refs)?;
    Ok((report, acc))
}
