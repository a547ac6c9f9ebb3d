use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::ParamBlocks;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm the gradient is rescaled to when exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// First/second moment accumulators, one vector per parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub names: Vec<String>,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: ParamBlocks>(params: &P) -> Self {
        let blocks = params.blocks();
        AdamState {
            step: 0,
            names: blocks.iter().map(|(n, _)| n.clone()).collect(),
            first: blocks.iter().map(|(_, b)| vec![0.0; b.len()]).collect(),
            second: blocks.iter().map(|(_, b)| vec![0.0; b.len()]).collect(),
        }
    }

    fn check_shape<P: ParamBlocks>(&self, params: &P) -> Result<()> {
        let blocks = params.blocks();
        if blocks.len() != self.first.len() {
            return Err(Error::shape(
                "adam_update",
                format!("{} parameter blocks", blocks.len()),
                format!("{} moment blocks", self.first.len()),
            ));
        }
        for ((name, b), m) in blocks.iter().zip(&self.first) {
            if b.len() != m.len() {
                return Err(Error::shape("adam_update", name, format!("moment of len {}", m.len())));
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient block.
pub fn global_norm<P: ParamBlocks>(grads: &P) -> f64 {
    grads
        .blocks()
        .iter()
        .flat_map(|(_, b)| b.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One Adam step with bias correction. Gradients are clipped to
/// `cfg.clip_norm` (global norm) first. Returns the pre-clip gradient norm.
pub fn adam_update<P: ParamBlocks>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<f64> {
    state.check_shape(params)?;
    state.check_shape(grads)?;
    for (name, g) in grads.blocks() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient block {name}")));
        }
    }
    let norm = global_norm(grads);
    let scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let grad_blocks = grads.blocks();
    for (k, (_, p)) in params.blocks_mut().into_iter().enumerate() {
        let g = grad_blocks[k].1;
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        for i in 0..p.len() {
            let gi = g[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}
