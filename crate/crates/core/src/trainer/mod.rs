//! Captioner training: sampling strategies, the ε schedule, the
//! length-modulated loss, Adam, checkpoints and greedy generation.

mod adam;
mod captioner;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{argmax, multinomial_draw, SeededRng};
use crate::scn_decoder::{
    output_distribution, scn_step, CellState, Guide, InputSource, ScnParameters, SemanticContext,
    StepTrace,
};

pub use adam::{adam_update, global_norm, AdamConfig, AdamState};
pub use captioner::{
    generate_caption, generate_split, token_accuracy, train_captioner, validate, CaptionData,
    Checkpoint, DecoderConfig, EpochRecord, TrainOutcome,
};
pub(crate) use captioner::{load_json, save_json};

/// Probabilities are clipped below at this value before taking logs.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    TeacherForcing,
    ScheduledArgmax,
    ScheduledMultinomial,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::TeacherForcing => "teacher_forcing",
            Strategy::ScheduledArgmax => "scheduled_argmax",
            Strategy::ScheduledMultinomial => "scheduled_multinomial",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_forcing" => Ok(Strategy::TeacherForcing),
            "scheduled_argmax" => Ok(Strategy::ScheduledArgmax),
            "scheduled_multinomial" => Ok(Strategy::ScheduledMultinomial),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected teacher_forcing, scheduled_argmax or scheduled_multinomial)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub beta: f64,
    pub epsilon_rate: f64,
    /// Upper clamp of the ε schedule.
    pub epsilon_max: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Steps between decays; `None` disables decay.
    pub lr_decay_interval: Option<u64>,
    pub adam: AdamConfig,
    /// Generation limit used for validation and inference.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::ScheduledMultinomial,
            beta: 0.7,
            epsilon_rate: 0.008,
            epsilon_max: 1.0,
            epochs: 50,
            batch_size: 64,
            learning_rate: 2e-4,
            lr_decay: 0.316,
            lr_decay_interval: Some(20350),
            adam: AdamConfig::default(),
            max_len: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.beta, self.epsilon_rate, self.epsilon_max, self.learning_rate, self.lr_decay];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("training rates must be finite".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.epsilon_rate < 0.0 {
            return Err(Error::Config(format!("epsilon_rate must be >= 0, got {}", self.epsilon_rate)));
        }
        if !(0.0..=1.0).contains(&self.epsilon_max) {
            return Err(Error::Config(format!("epsilon_max must lie in [0, 1], got {}", self.epsilon_max)));
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config("batch_size and max_len must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning_rate and lr_decay must be > 0".into()));
        }
        if self.lr_decay_interval == Some(0) {
            return Err(Error::Config("lr_decay_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// `min(1, ep × rate)`.
pub fn epsilon_for_epoch(ep: usize, rate: f64) -> f64 {
    epsilon_clamped(ep, rate, 1.0)
}

/// `min(max, ep × rate)`.
pub fn epsilon_clamped(ep: usize, rate: f64, max: f64) -> f64 {
    (ep as f64 * rate).min(max)
}

/// `base · factor^⌊step / interval⌋`.
pub fn lr_for_step(step: u64, base: f64, factor: f64, interval: u64) -> f64 {
    base * factor.powi((step / interval.max(1)) as i32)
}

/// `Σ_t log p_t(targets[t])`, probabilities clipped below at [`LOG_PROB_FLOOR`].
pub fn sequence_log_prob<D: AsRef<[f64]>>(distributions: &[D], targets: &[usize]) -> Result<f64> {
    if distributions.len() != targets.len() {
        return Err(Error::shape(
            "sequence_log_prob",
            format!("{} distributions", distributions.len()),
            format!("{} targets", targets.len()),
        ));
    }
    let mut sum = 0.0;
    for (d, &t) in distributions.iter().zip(targets) {
        let d = d.as_ref();
        let p = *d
            .get(t)
            .ok_or_else(|| Error::invalid(format!("target {t} outside distribution of {}", d.len())))?;
        sum += p.max(LOG_PROB_FLOOR).ln();
    }
    Ok(sum)
}

/// Per-sentence weight `1 / L^β`.
pub fn length_weight(len: usize, beta: f64) -> f64 {
    (len as f64).powf(-beta)
}

/// `-Σ_i L_i^{-β} · log_probs[i]`.
pub fn length_modulated_loss(log_probs: &[f64], lengths: &[usize], beta: f64) -> Result<f64> {
    if log_probs.len() != lengths.len() {
        return Err(Error::shape("length_modulated_loss", log_probs.len(), lengths.len()));
    }
    if lengths.contains(&0) {
        return Err(Error::invalid("length_modulated_loss: sentence lengths must be >= 1"));
    }
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("length_modulated_loss: beta {beta} < 0")));
    }
    Ok(-log_probs
        .iter()
        .zip(lengths)
        .map(|(lp, &l)| length_weight(l, beta) * lp)
        .sum::<f64>())
}

/// Chooses the next input token: with probability `eps` a token drawn from
/// `dist` (argmax or multinomial per `strategy`), otherwise the ground truth.
/// The coin is drawn first; a multinomial draw follows only when it lands
/// below `eps`. Teacher forcing never draws.
pub fn scheduled_choice(
    dist: &[f64],
    eps: f64,
    strategy: Strategy,
    ground_truth: Option<usize>,
    rng: &mut SeededRng,
) -> Result<InputSource> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::invalid(format!("epsilon {eps} outside [0, 1]")));
    }
    let use_model = match strategy {
        Strategy::TeacherForcing => false,
        _ => rng.uniform() < eps,
    };
    if use_model {
        let id = match strategy {
            Strategy::ScheduledMultinomial => multinomial_draw(dist, rng)?,
            _ => argmax(dist),
        };
        return Ok(InputSource::Token { id, sampled: true });
    }
    match ground_truth {
        Some(id) => Ok(InputSource::Token { id, sampled: false }),
        None => Err(Error::invalid("scheduled decoding: ground-truth token missing")),
    }
}

/// One scheduled-sampling step: runs the cell on `x_t`, emits the output
/// distribution and picks the input source of the following step.
#[allow(clippy::too_many_arguments)]
pub fn scheduled_decode_step(
    params: &ScnParameters,
    ctx: &SemanticContext,
    x_t: &[f64],
    source: InputSource,
    state: &CellState,
    eps: f64,
    strategy: Strategy,
    ground_truth: Option<usize>,
    rng: &mut SeededRng,
) -> Result<(CellState, StepTrace, InputSource)> {
    let (next, mut trace) = scn_step(params, ctx, x_t, state, source)?;
    trace.dist = output_distribution(params, &next.h)?;
    let choice = scheduled_choice(&trace.dist, eps, strategy, ground_truth, rng)?;
    Ok((next, trace, choice))
}

/// [`Guide`] that runs exactly `targets.len()` steps, feeding ground truth or
/// model tokens per [`scheduled_choice`].
pub struct ScheduledGuide<'a> {
    targets: &'a [usize],
    eps: f64,
    strategy: Strategy,
    rng: &'a mut SeededRng,
}

impl<'a> ScheduledGuide<'a> {
    pub fn new(targets: &'a [usize], eps: f64, strategy: Strategy, rng: &'a mut SeededRng) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("scheduled decoding needs a non-empty target sequence"));
        }
        Ok(ScheduledGuide {
            targets,
            eps,
            strategy,
            rng,
        })
    }
}

impl Guide for ScheduledGuide<'_> {
    fn next_input(&mut self, step: usize, dist: &[f64]) -> Result<Option<InputSource>> {
        if step + 1 >= self.targets.len() {
            return Ok(None);
        }
        scheduled_choice(dist, self.eps, self.strategy, Some(self.targets[step]), self.rng).map(Some)
    }
}
