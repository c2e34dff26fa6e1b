//! Per-slot update/inherit head.

use std::collections::BTreeSet;

use dst_numerics::{Activation, Ctx, Mlp, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::encoder::EncodedTurn;
use crate::error::{DstError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateDecision {
    pub scores: Vec<f64>,
    pub update: Vec<bool>,
    pub selected: BTreeSet<usize>,
}

impl UpdateDecision {
    /// Thresholds scores at `delta`: update iff score > delta.
    pub fn from_scores(scores: Vec<f64>, delta: f64) -> Result<Self> {
        check_threshold(delta)?;
        let update: Vec<bool> = scores.iter().map(|&s| s > delta).collect();
        let selected = update.iter().enumerate().filter(|(_, &u)| u).map(|(j, _)| j).collect();
        Ok(Self { scores, update, selected })
    }
}

pub fn check_threshold(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(DstError::Config(format!("update_threshold must lie in (0, 1), got {delta}")))
    }
}

/// `sigmoid(MLP([SLOT]^j))` over the current turn's slot vectors.
#[derive(Clone, Debug)]
pub struct UpdatePredictor {
    pub mlp: Mlp,
}

impl UpdatePredictor {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(store, "update", &[d, d, 1], Activation::Relu, Activation::Identity, rng)? })
    }

    /// Logits, `J × 1`.
    pub fn logits(&self, ctx: &Ctx<'_>, current: &EncodedTurn) -> Result<Var> {
        let slots = ctx.tape.gather_rows(current.hidden, &current.input.slot_pos)?;
        Ok(self.mlp.forward(ctx, slots)?)
    }

    pub fn predict(&self, ctx: &Ctx<'_>, current: &EncodedTurn, delta: f64) -> Result<UpdateDecision> {
        let logits = self.logits(ctx, current)?;
        let scores = ctx.tape.sigmoid(logits)?;
        UpdateDecision::from_scores(ctx.tape.value(scores).into_vec(), delta)
    }
}

/// Mean binary cross-entropy of `logits` (`J × 1`) against the gold update set.
pub fn update_loss(ctx: &Ctx<'_>, logits: Var, gold: &BTreeSet<usize>) -> Result<Var> {
    let tape = &ctx.tape;
    let shape = tape.shape(logits);
    let n = shape[0];
    let y: Vec<f64> = (0..n).map(|j| if gold.contains(&j) { 1.0 } else { 0.0 }).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let pos = tape.mask_mul(tape.log_sigmoid(logits)?, Tensor::new(shape.clone(), y)?)?;
    let neg = tape.mask_mul(tape.log_sigmoid(tape.scale(logits, -1.0)?)?, Tensor::new(shape, not_y)?)?;
    let ll = tape.mean(tape.add(pos, neg)?)?;
    Ok(tape.scale(ll, -1.0)?)
}
