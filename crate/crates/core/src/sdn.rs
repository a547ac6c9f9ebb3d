//! Semantic detection network: an MLP multi-label classifier mapping the
//! concatenated video feature to tag probabilities `s = σ(f(v))`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, write_jsonl, Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::metrics::mean_average_precision;
use crate::numkit::{sigmoid, Matrix, ParamBlocks, SeededRng};
use crate::trainer::{adam_update, AdamConfig, AdamState};

pub const DEFAULT_PROB_CLIP: f64 = 1e-7;

/// Which visual feature blocks are fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    #[default]
    Both,
    Res2d,
    Res3d,
}

impl FeatureSet {
    pub fn select(self, record: &VideoRecord) -> Vec<f64> {
        match self {
            FeatureSet::Both => record.features(),
            FeatureSet::Res2d => record.res2d.clone(),
            FeatureSet::Res3d => record.res3d.clone(),
        }
    }

    pub fn input_dim(self, dim_2d: usize, dim_3d: usize) -> usize {
        match self {
            FeatureSet::Both => dim_2d + dim_3d,
            FeatureSet::Res2d => dim_2d,
            FeatureSet::Res3d => dim_3d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Layer stack; every layer but the last is followed by a rectifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdnParameters {
    pub layers: Vec<DenseLayer>,
}

impl SdnParameters {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden: &[usize], k: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(k);
        let layers = dims
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                DenseLayer {
                    weight: Matrix::uniform(w[1], w[0], limit, &mut rng),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        SdnParameters { layers }
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("SDN needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows() {
                return Err(Error::shape(
                    "SdnParameters",
                    format!("layer {i} weight {}x{}", l.weight.rows(), l.weight.cols()),
                    format!("bias of {}", l.bias.len()),
                ));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(Error::shape(
                    "SdnParameters",
                    format!("layer {} outputs {}", i - 1, layers[i - 1].weight.rows()),
                    format!("layer {i} expects {}", l.weight.cols()),
                ));
            }
        }
        Ok(SdnParameters { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    /// Number of tags K.
    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }
}

impl ParamBlocks for SdnParameters {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.data()));
            out.push((format!("layer{i}.bias"), &l.bias[..]));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.data_mut()));
            out.push((format!("layer{i}.bias"), &mut l.bias[..]));
        }
        out
    }
}

struct ForwardCache {
    /// Input of every layer (index 0 is `v`).
    inputs: Vec<Vec<f64>>,
    output: Vec<f64>,
}

fn forward_cached(params: &SdnParameters, v: &[f64]) -> Result<ForwardCache> {
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut x = v.to_vec();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = layer.weight.matvec(&x)?;
        for (zi, b) in z.iter_mut().zip(&layer.bias) {
            *zi += b;
        }
        inputs.push(std::mem::take(&mut x));
        x = if i == last {
            sigmoid(&z)
        } else {
            z.into_iter().map(|a| a.max(0.0)).collect()
        };
    }
    Ok(ForwardCache { inputs, output: x })
}

/// Tag probabilities for one feature vector.
pub fn sdn_forward(params: &SdnParameters, v: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_cached(params, v)?.output)
}

fn check_binary(truth: &[f64]) -> Result<()> {
    match truth.iter().find(|&&t| t != 0.0 && t != 1.0) {
        Some(t) => Err(Error::invalid(format!("ground-truth tag value {t} is not 0/1"))),
        None => Ok(()),
    }
}

/// Binary cross-entropy of one sample, summed over tags, with probabilities
/// clipped to `[clip, 1 - clip]`.
pub fn sdn_bce_loss(s: &[f64], truth: &[f64], clip: f64) -> Result<f64> {
    if s.len() != truth.len() {
        return Err(Error::shape("sdn_bce_loss", s.len(), truth.len()));
    }
    if !(clip > 0.0 && clip < 0.1) {
        return Err(Error::invalid(format!("probability clip {clip} outside (0, 0.1)")));
    }
    check_binary(truth)?;
    Ok(s.iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let p = p.clamp(clip, 1.0 - clip);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum())
}

/// Mean per-sample BCE over a batch of `(v, ŝ)` pairs.
pub fn sdn_batch_loss(params: &SdnParameters, batch: &[(Vec<f64>, Vec<f64>)], clip: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty SDN batch"));
    }
    let mut total = 0.0;
    for (v, truth) in batch {
        total += sdn_bce_loss(&sdn_forward(params, v)?, truth, clip)?;
    }
    Ok(total / batch.len() as f64)
}

/// Batch loss and its gradient with respect to every layer.
pub fn sdn_backward(
    params: &SdnParameters,
    batch: &[(Vec<f64>, Vec<f64>)],
    clip: f64,
) -> Result<(f64, SdnParameters)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty SDN batch"));
    }
    let mut grads = params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (v, truth) in batch {
        let cache = forward_cached(params, v)?;
        loss += sdn_bce_loss(&cache.output, truth, clip)? * scale;
        // d(loss)/d(logit) = s - ŝ inside the clip range, zero where clipped
        let mut delta: Vec<f64> = cache
            .output
            .iter()
            .zip(truth)
            .map(|(&s, &t)| {
                if s < clip || s > 1.0 - clip {
                    0.0
                } else {
                    scale * (s - t)
                }
            })
            .collect();
        for i in (0..params.layers.len()).rev() {
            let input = &cache.inputs[i];
            let g = &mut grads.layers[i];
            g.weight.add_outer(&delta, input);
            for (gb, d) in g.bias.iter_mut().zip(&delta) {
                *gb += d;
            }
            if i == 0 {
                break;
            }
            let mut back = vec![0.0; input.len()];
            params.layers[i].weight.matvec_t_acc(&delta, &mut back);
            // input[i] = relu(pre-activation); its derivative is 1 where positive
            for (b, &x) in back.iter_mut().zip(input) {
                if x <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = back;
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdnConfig {
    pub hidden: Vec<usize>,
    pub feature_set: FeatureSet,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub prob_clip: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for SdnConfig {
    fn default() -> Self {
        SdnConfig {
            hidden: vec![512, 512],
            feature_set: FeatureSet::Both,
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            prob_clip: DEFAULT_PROB_CLIP,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdnEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_map: f64,
}

#[derive(Debug, Clone)]
pub struct SdnTrainOutcome {
    /// Parameters of the epoch with the highest validation mAP (the
    /// initialization when no epoch ran).
    pub params: SdnParameters,
    pub adam: AdamState,
    pub trace: Vec<SdnEpochRecord>,
    pub best_epoch: Option<usize>,
}

fn examples(ds: &Dataset, set: FeatureSet) -> Vec<(Vec<f64>, Vec<f64>)> {
    let truths = ds.ground_truth();
    ds.records.iter().map(|r| set.select(r)).zip(truths).collect()
}

/// Predicted tag probabilities for every video of a split.
pub fn predict(params: &SdnParameters, ds: &Dataset, set: FeatureSet) -> Result<Vec<Vec<f64>>> {
    ds.records
        .iter()
        .map(|r| sdn_forward(params, &set.select(r)))
        .collect()
}

/// mAP of the network's predictions on a split.
pub fn evaluate_map(params: &SdnParameters, ds: &Dataset, set: FeatureSet) -> Result<f64> {
    mean_average_precision(&predict(params, ds, set)?, &ds.ground_truth())
}

/// Mini-batch Adam on the mean BCE. Validation mAP is recorded every epoch
/// and the best checkpoint is returned.
pub fn sdn_train(train: &Dataset, val: &Dataset, config: &SdnConfig) -> Result<SdnTrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("sdn_train: train and validation splits must be non-empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("sdn batch_size must be >= 1".into()));
    }
    let set = config.feature_set;
    let input_dim = set.input_dim(train.dim_2d(), train.dim_3d());
    let k = train.tags.len();
    let mut params = SdnParameters::init(input_dim, &config.hidden, k, config.seed);
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = SeededRng::stream(config.seed, 1);

    let data = examples(train, set);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, SdnParameters, AdamState)> = None;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = sdn_backward(&params, &batch, config.prob_clip)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("SDN loss {loss}"),
                });
            }
            adam_update(&mut params, &grads, &mut adam, config.learning_rate, &config.adam)
                .map_err(|e| Error::Divergence {
                    epoch,
                    step,
                    detail: e.to_string(),
                })?;
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        let val_map = evaluate_map(&params, val, set)?;
        log::debug!("sdn epoch {epoch}: loss {:.6} val mAP {val_map:.4}", epoch_loss / data.len() as f64);
        trace.push(SdnEpochRecord {
            epoch,
            loss: epoch_loss / data.len() as f64,
            val_map,
        });
        if best.as_ref().is_none_or(|b| val_map > b.1) {
            best = Some((epoch, val_map, params.clone(), adam.clone()));
        }
    }

    Ok(match best {
        Some((epoch, _, params, adam)) => SdnTrainOutcome {
            params,
            adam,
            trace,
            best_epoch: Some(epoch),
        },
        None => SdnTrainOutcome {
            params,
            adam,
            trace,
            best_epoch: None,
        },
    })
}

/// One line of an exported semantic-feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticLine {
    pub id: String,
    pub semantic: Vec<f64>,
}

pub fn write_semantic_file(path: &Path, ds: &Dataset, features: &[Vec<f64>]) -> Result<()> {
    let lines = ds.records.iter().zip(features).map(|(r, s)| SemanticLine {
        id: r.id.clone(),
        semantic: s.clone(),
    });
    write_jsonl(path, lines)
}

/// Reads semantic features and aligns them with the records of `ds`.
pub fn read_semantic_file(path: &Path, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let lines: Vec<(usize, SemanticLine)> = read_jsonl(path)?;
    let k = ds.tags.len();
    let mut by_id = std::collections::HashMap::new();
    for (line, s) in lines {
        if s.semantic.len() != k {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected {k} semantic values, got {}", s.semantic.len()),
            });
        }
        by_id.insert(s.id, s.semantic);
    }
    ds.records
        .iter()
        .map(|r| {
            by_id.remove(&r.id).ok_or_else(|| {
                Error::Data(format!("{}: no semantic features for {:?}", path.display(), r.id))
            })
        })
        .collect()
}

/// Semantic features derived from ground-truth tags with label noise: each
/// label is, with probability `flip_prob`, replaced by a fair coin. Scores sit
/// at 0.1 / 0.9 plus a small uniform jitter. Used to produce feature sets of
/// controlled mAP.
pub fn label_noise_features(truths: &[Vec<f64>], flip_prob: f64, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    truths
        .iter()
        .map(|row| {
            row.iter()
                .map(|&t| {
                    // both draws are always taken so that, for a fixed seed,
                    // the set of replaced labels grows with `flip_prob`
                    let (u, coin) = (rng.uniform(), rng.uniform());
                    let label = if u < flip_prob {
                        if coin < 0.5 { 1.0 } else { 0.0 }
                    } else {
                        t
                    };
                    0.1 + 0.8 * label + rng.uniform_range(-0.05, 0.05)
                })
                .collect()
        })
        .collect()
}
