//! Training objective: per-class BCE plus soft Dice on both heads.

use alloc::vec;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_SMOOTH: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    /// Multiplier on the deep-supervision head's terms; 0 disables it.
    pub deep_supervision: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bce: 0.6, dice: 0.4, deep_supervision: 1.0, smooth: DEFAULT_SMOOTH }
    }
}

/// Scalar values of the four loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce_f: f64,
    pub dice_f: f64,
    pub bce: f64,
    pub dice: f64,
}

pub struct Objective {
    pub total: Var,
    pub parts: LossBreakdown,
}

/// One-hot `(B, K, H, W)` targets from row-major label masks of `B * H * W` ids.
pub fn one_hot(labels: &[u32], batch: usize, classes: usize, h: usize, w: usize) -> Result<Tensor> {
    ensure!(labels.len() == batch * h * w, Config, "expected {} labels, got {}", batch * h * w, labels.len());
    let hw = h * w;
    let mut data = vec![0.0; batch * classes * hw];
    for (i, &l) in labels.iter().enumerate() {
        ensure!((l as usize) < classes, Data, "label {} out of range for {} classes", l, classes);
        let (b, p) = (i / hw, i % hw);
        data[(b * classes + l as usize) * hw + p] = 1.0;
    }
    Tensor::new(&[batch, classes, h, w], data)
}

pub fn bce_loss(g: &mut Graph, logits: Var, targets: Var) -> Result<Var> {
    g.bce_with_logits(logits, targets)
}

/// `1 - mean_c (2 Σ p t + s) / (Σ p + Σ t + s)` on probabilities.
pub fn dice_loss(g: &mut Graph, probs: Var, targets: Var, smooth: f64) -> Result<Var> {
    g.soft_dice(probs, targets, smooth)
}

/// BCE and Dice (on sigmoid probabilities) of one logit head.
pub fn head_terms(g: &mut Graph, logits: Var, targets: Var, smooth: f64) -> Result<(Var, Var)> {
    let bce = bce_loss(g, logits, targets)?;
    let probs = g.sigmoid(logits)?;
    let dice = dice_loss(g, probs, targets, smooth)?;
    Ok((bce, dice))
}

/// `w_ds (a BCE(ŷ_f) + b Dice(ŷ_f)) + a BCE(ŷ) + b Dice(ŷ)`.
pub fn combined_objective(g: &mut Graph, y_hat: Var, y_hat_f: Var, targets: Var, w: &LossWeights) -> Result<Objective> {
    ensure!(g.shape(y_hat) == g.shape(targets) && g.shape(y_hat_f) == g.shape(targets), Config, "heads {:?} / {:?} do not match targets {:?}", g.shape(y_hat), g.shape(y_hat_f), g.shape(targets));
    let (bce_f, dice_f) = head_terms(g, y_hat_f, targets, w.smooth)?;
    let (bce, dice) = head_terms(g, y_hat, targets, w.smooth)?;
    let terms = [(bce_f, w.deep_supervision * w.bce), (dice_f, w.deep_supervision * w.dice), (bce, w.bce), (dice, w.dice)];
    let mut total = g.scale(terms[0].0, terms[0].1)?;
    for &(t, c) in &terms[1..] {
        let s = g.scale(t, c)?;
        total = g.add(total, s)?;
    }
    let v = |x: Var| g.value(x).item();
    let parts = LossBreakdown { total: v(total), bce_f: v(bce_f), dice_f: v(dice_f), bce: v(bce), dice: v(dice) };
    Ok(Objective { total, parts })
}
