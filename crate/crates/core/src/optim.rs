//! Plain SGD with a fixed learning rate and global-norm gradient clipping.
//!
//! Clipping rescales all blocks jointly: if the norm over every parameter
//! block exceeds `gc`, everything is multiplied by `gc / norm`. Direction is
//! preserved; there is no elementwise clamping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::l2_norm;
use crate::network::{Gradients, Params};

pub const DEFAULT_BATCH_SIZE: usize = 16;

const CLIP_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(lr: f64, clip: f64, max_steps: usize, eval_every: usize, seed: u64) -> Self {
        Self {
            lr,
            clip,
            batch_size: DEFAULT_BATCH_SIZE,
            max_steps,
            eval_every,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::invalid(format!("clip threshold must be > 0, got {}", self.clip)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `gc`.
/// Returns the norm measured before clipping.
pub fn clip_gradients_in_place(grads: &mut Gradients, gc: f64) -> Result<f64> {
    if !(gc > 0.0) {
        return Err(Error::invalid(format!("clip threshold must be > 0, got {gc}")));
    }
    let norm = l2_norm(grads.blocks());
    if !norm.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            reason: format!("gradient norm is {norm}"),
        });
    }
    // The slack keeps clipping idempotent: a vector already rescaled to `gc`
    // may measure a few ulps above it and must not be touched again.
    if norm > gc * (1.0 + CLIP_SLACK) {
        let s = gc / norm;
        for block in grads.blocks_mut() {
            block.iter_mut().for_each(|g| *g *= s);
        }
    }
    Ok(norm)
}

pub fn clip_gradients(mut grads: Gradients, gc: f64) -> Result<(Gradients, f64)> {
    let norm = clip_gradients_in_place(&mut grads, gc)?;
    Ok((grads, norm))
}

/// `p ← p − lr·g` for every coordinate, in block order.
pub fn sgd_step(params: &mut Params, grads: &Gradients, lr: f64) -> Result<()> {
    if !params.same_layout(grads) {
        return Err(Error::shape("sgd_step", "params layout", "gradient layout"));
    }
    for (p, g) in params.blocks_mut().into_iter().zip(grads.blocks()) {
        for (pi, gi) in p.iter_mut().zip(g) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}
