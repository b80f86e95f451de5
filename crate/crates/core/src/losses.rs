//! Focal, DICE, segmentation and weighted binary cross-entropy losses.
//!
//! Each loss comes in a `*_with_grad` form returning the value together with
//! its gradient w.r.t. the prediction, which the training graph records as a
//! single scalar node.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ensure_shape, Result};

/// Probabilities are clamped this far from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_weight: f64,
    pub dice_weight: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_epsilon: f64,
    pub bce_pos_weight: f64,
    /// Weight of the classifier loss in the total; 0 trains the prompt encoder alone.
    pub classifier_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_weight: 20.0,
            dice_weight: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_epsilon: 1.0,
            bce_pos_weight: 3.0,
            classifier_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("focal_weight", self.focal_weight),
            ("dice_weight", self.dice_weight),
            ("focal_gamma", self.focal_gamma),
            ("focal_alpha", self.focal_alpha),
            ("dice_epsilon", self.dice_epsilon),
            ("bce_pos_weight", self.bce_pos_weight),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(crate::Error::Config(format!("losses.{name} must be positive, got {v}")));
            }
        }
        if !(self.classifier_weight >= 0.0) {
            return Err(crate::Error::Config("losses.classifier_weight must be >= 0".into()));
        }
        Ok(())
    }
}

fn check_len(pred: &[f64], gt: &[bool]) -> Result<()> {
    ensure_shape("mask pixel count", pred.len(), gt.len())
}

/// Mean focal loss over pixels.
pub fn focal_loss(pred: &[f64], gt: &[bool], alpha: f64, gamma: f64) -> Result<f64> {
    focal_loss_with_grad(pred, gt, alpha, gamma).map(|(v, _)| v)
}

pub fn focal_loss_with_grad(pred: &[f64], gt: &[bool], alpha: f64, gamma: f64) -> Result<(f64, Vec<f64>)> {
    check_len(pred, gt)?;
    let n = pred.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (k, (&raw, &y)) in pred.iter().zip(gt).enumerate() {
        let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let inside = raw > PROB_CLAMP && raw < 1.0 - PROB_CLAMP;
        let (value, d) = if y {
            let q = 1.0 - p;
            let v = -alpha * q.powf(gamma) * p.ln();
            let d = alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p);
            (v, d)
        } else {
            let q = 1.0 - p;
            let v = -(1.0 - alpha) * p.powf(gamma) * q.ln();
            let d = -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q);
            (v, d)
        };
        total += value;
        if inside {
            grad[k] = d / n;
        }
    }
    Ok((total / n, grad))
}

/// `1 − (2·Σpg + ε) / (Σp + Σg + ε)`.
pub fn dice_loss(pred: &[f64], gt: &[bool], epsilon: f64) -> Result<f64> {
    dice_loss_with_grad(pred, gt, epsilon).map(|(v, _)| v)
}

pub fn dice_loss_with_grad(pred: &[f64], gt: &[bool], epsilon: f64) -> Result<(f64, Vec<f64>)> {
    check_len(pred, gt)?;
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (&p, &y) in pred.iter().zip(gt) {
        let g = if y { 1.0 } else { 0.0 };
        inter += p * g;
        sum += p + g;
    }
    let num = 2.0 * inter + epsilon;
    let den = sum + epsilon;
    let grad = gt
        .iter()
        .map(|&y| {
            let g = if y { 1.0 } else { 0.0 };
            -(2.0 * g * den - num) / (den * den)
        })
        .collect();
    Ok((1.0 - num / den, grad))
}

/// Weighted focal + DICE loss of one predicted mask against one ground-truth mask.
pub fn pair_loss_with_grad(pred: &[f64], gt: &[bool], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let (f, fg) = focal_loss_with_grad(pred, gt, cfg.focal_alpha, cfg.focal_gamma)?;
    let (d, dg) = dice_loss_with_grad(pred, gt, cfg.dice_epsilon)?;
    let grad = fg
        .iter()
        .zip(&dg)
        .map(|(a, b)| cfg.focal_weight * a + cfg.dice_weight * b)
        .collect();
    Ok((cfg.focal_weight * f + cfg.dice_weight * d, grad))
}

pub fn pair_loss(pred: &[f64], gt: &[bool], cfg: &LossConfig) -> Result<f64> {
    let f = focal_loss(pred, gt, cfg.focal_alpha, cfg.focal_gamma)?;
    let d = dice_loss(pred, gt, cfg.dice_epsilon)?;
    Ok(cfg.focal_weight * f + cfg.dice_weight * d)
}

/// Mean of per-pair segmentation losses; an empty set is a degenerate batch with loss 0.
pub fn segmentation_loss(pair_losses: &[f64]) -> f64 {
    if pair_losses.is_empty() {
        log::warn!("segmentation loss over zero matched pairs; using 0");
        return 0.0;
    }
    pair_losses.iter().sum::<f64>() / pair_losses.len() as f64
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `−w·y·ln σ(l) − (1−y)·ln(1−σ(l))`.
pub fn weighted_bce(logits: &[f64], labels: &[bool], pos_weight: f64) -> Result<f64> {
    weighted_bce_with_grad(logits, labels, pos_weight).map(|(v, _)| v)
}

pub fn weighted_bce_with_grad(logits: &[f64], labels: &[bool], pos_weight: f64) -> Result<(f64, Vec<f64>)> {
    ensure_shape("label count", logits.len(), labels.len())?;
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&l, &y) in logits.iter().zip(labels) {
        if y {
            total += pos_weight * softplus(-l);
            grad.push(-pos_weight * (1.0 - sigmoid(l)) / n);
        } else {
            total += softplus(l);
            grad.push(sigmoid(l) / n);
        }
    }
    Ok((total / n, grad))
}

pub fn total_loss(seg: f64, cls: f64, classifier_weight: f64) -> f64 {
    seg + classifier_weight * cls
}

/// Records the focal + DICE loss of a `1×P` prediction row on the graph.
pub fn pair_loss_node(g: &mut Graph, pred_row: Var, gt: &[bool], cfg: &LossConfig) -> Result<Var> {
    let pred: Vec<f64> = g.value(pred_row).iter().copied().collect();
    let (value, grad) = pair_loss_with_grad(&pred, gt, cfg)?;
    let grad = Array2::from_shape_vec(g.shape(pred_row), grad).expect("row gradient shape");
    Ok(g.scalar_fn(pred_row, value, grad))
}

/// Records the weighted BCE of an `N×1` logit column on the graph.
pub fn bce_node(g: &mut Graph, logits: Var, labels: &[bool], pos_weight: f64) -> Result<Var> {
    let l: Vec<f64> = g.value(logits).iter().copied().collect();
    let (value, grad) = weighted_bce_with_grad(&l, labels, pos_weight)?;
    let grad = Array2::from_shape_vec(g.shape(logits), grad).expect("logit gradient shape");
    Ok(g.scalar_fn(logits, value, grad))
}
