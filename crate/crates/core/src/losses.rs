//! Training objectives on student logits.
//!
//! Cross-entropy is always evaluated from logits with log-sum-exp. Every loss
//! has a `*_with_grad` twin that also returns the analytic gradient with
//! respect to the logits; confidences and masks are constants.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::maps::{ConfidenceMap, LabelMap, LogitMap, PixelMask, IGNORE_INDEX};

/// How the confidence-weighted loss is normalized per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightedNorm {
    /// Divide by every valid pixel, retained or not.
    #[default]
    AllPixels,
    /// Divide by retained pixels only.
    RetainedPixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda_unsup: f64,
    pub boundary_coeff: f64,
    #[serde(default)]
    pub weighted_norm: WeightedNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda_unsup: 1.0,
            boundary_coeff: 0.5,
            weighted_norm: WeightedNorm::AllPixels,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma {} < 0", self.gamma)));
        }
        if !(self.lambda_unsup >= 0.0) {
            return Err(Error::Config(format!("lambda {} < 0", self.lambda_unsup)));
        }
        if !(self.boundary_coeff >= 0.0) {
            return Err(Error::Config(format!(
                "boundary coefficient {} < 0",
                self.boundary_coeff
            )));
        }
        Ok(())
    }
}

/// Per-step loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub labeled: f64,
    pub weighted: f64,
    pub boundary: f64,
    pub total: f64,
    pub labeled_pixels: usize,
    pub retained_pixels: usize,
    pub boundary_pixels: usize,
    /// Set when no labeled pixel was available and `labeled` defaulted to 0.
    pub labeled_empty: bool,
}

/// Cross-entropy of one pixel, optionally accumulating `scale * dCE/dz` into `grad`.
#[inline]
fn pixel_ce(logits: &LogitMap, j: usize, target: usize, grad: Option<(&mut LogitMap, f64)>) -> f64 {
    let hw = logits.pixels();
    let k = logits.classes;
    let mut max = f64::NEG_INFINITY;
    for c in 0..k {
        max = max.max(logits.values[c * hw + j]);
    }
    let mut sum = 0.0;
    for c in 0..k {
        sum += (logits.values[c * hw + j] - max).exp();
    }
    let lse = max + sum.ln();
    if let Some((g, scale)) = grad {
        for c in 0..k {
            let p = (logits.values[c * hw + j] - lse).exp();
            let onehot = if c == target { 1.0 } else { 0.0 };
            g.values[c * hw + j] += scale * (p - onehot);
        }
    }
    lse - logits.values[target * hw + j]
}

fn check_dims(logits: &LogitMap, h: usize, w: usize) -> Result<()> {
    if logits.dims() != (h, w) {
        return Err(shape_err(
            format!("{h}x{w}"),
            format!("{}x{}", logits.height, logits.width),
        ));
    }
    Ok(())
}

fn check_label(label: u8, classes: usize) -> Result<usize> {
    let l = usize::from(label);
    if l >= classes {
        return Err(Error::InvalidInput(format!("label {l} outside 0..{classes}")));
    }
    Ok(l)
}

/// Result of a batch-level cross-entropy reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledCe {
    pub value: f64,
    pub pixels: usize,
    /// No non-ignored pixel existed; `value` is 0.
    pub empty: bool,
}

/// Mean cross-entropy over all non-ignored pixels pooled across images.
pub fn labeled_ce(logits: &[LogitMap], gt: &[LabelMap]) -> Result<LabeledCe> {
    labeled_impl(logits, gt, false).map(|(v, _)| v)
}

pub fn labeled_ce_with_grad(logits: &[LogitMap], gt: &[LabelMap]) -> Result<(LabeledCe, Vec<LogitMap>)> {
    labeled_impl(logits, gt, true)
}

fn labeled_impl(logits: &[LogitMap], gt: &[LabelMap], want_grad: bool) -> Result<(LabeledCe, Vec<LogitMap>)> {
    if logits.len() != gt.len() {
        return Err(shape_err(format!("{} label maps", logits.len()), gt.len()));
    }
    let mut pixels = 0usize;
    for (l, g) in logits.iter().zip(gt) {
        check_dims(l, g.height, g.width)?;
        pixels += g.valid_count();
    }
    let mut grads: Vec<LogitMap> = if want_grad {
        logits.iter().map(|l| LogitMap::zeros(l.classes, l.height, l.width)).collect()
    } else {
        Vec::new()
    };
    if pixels == 0 {
        return Ok((
            LabeledCe {
                value: 0.0,
                pixels: 0,
                empty: true,
            },
            grads,
        ));
    }
    let scale = 1.0 / pixels as f64;
    let mut sum = 0.0;
    for (i, (l, g)) in logits.iter().zip(gt).enumerate() {
        for (j, &label) in g.values.iter().enumerate() {
            if label == IGNORE_INDEX {
                continue;
            }
            let t = check_label(label, l.classes)?;
            let gr = grads.get_mut(i).map(|gm| (gm, scale));
            sum += pixel_ce(l, j, t, gr);
        }
    }
    Ok((
        LabeledCe {
            value: sum * scale,
            pixels,
            empty: false,
        },
        grads,
    ))
}

/// Confidence-weighted cross-entropy against pseudo-labels for one image.
///
/// Retained pixels contribute `conf^gamma * CE`; the sum is divided by the
/// number of non-ignored pixels (or retained pixels under
/// [`WeightedNorm::RetainedPixels`]).
pub fn confidence_weighted_ce(
    logits: &LogitMap,
    pseudo: &LabelMap,
    conf: &ConfidenceMap,
    retain: &PixelMask,
    gamma: f64,
    norm: WeightedNorm,
) -> Result<f64> {
    weighted_impl(logits, pseudo, conf, retain, gamma, norm, None).map(|(v, _)| v)
}

pub fn confidence_weighted_ce_with_grad(
    logits: &LogitMap,
    pseudo: &LabelMap,
    conf: &ConfidenceMap,
    retain: &PixelMask,
    gamma: f64,
    norm: WeightedNorm,
    grad_scale: f64,
    grad: &mut LogitMap,
) -> Result<(f64, usize)> {
    weighted_impl(logits, pseudo, conf, retain, gamma, norm, Some((grad, grad_scale)))
}

fn weighted_impl(
    logits: &LogitMap,
    pseudo: &LabelMap,
    conf: &ConfidenceMap,
    retain: &PixelMask,
    gamma: f64,
    norm: WeightedNorm,
    mut grad: Option<(&mut LogitMap, f64)>,
) -> Result<(f64, usize)> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma {gamma} < 0")));
    }
    let (h, w) = pseudo.dims();
    check_dims(logits, h, w)?;
    if conf.dims() != (h, w) || retain.dims() != (h, w) {
        return Err(shape_err(format!("{h}x{w} confidence/retain"), "other"));
    }
    let mut valid = 0usize;
    let mut retained = 0usize;
    for (j, &label) in pseudo.values.iter().enumerate() {
        if label != IGNORE_INDEX {
            valid += 1;
            if retain.values[j] {
                retained += 1;
            }
        }
    }
    let denom = match norm {
        WeightedNorm::AllPixels => valid,
        WeightedNorm::RetainedPixels => retained,
    };
    if denom == 0 {
        return Ok((0.0, retained));
    }
    let inv = 1.0 / denom as f64;
    let mut sum = 0.0;
    for (j, &label) in pseudo.values.iter().enumerate() {
        if label == IGNORE_INDEX || !retain.values[j] {
            continue;
        }
        let t = check_label(label, logits.classes)?;
        let weight = conf.values[j].powf(gamma);
        let gr = grad.as_mut().map(|(g, s)| (&mut **g, *s * weight * inv));
        sum += weight * pixel_ce(logits, j, t, gr);
    }
    Ok((sum * inv, retained))
}

/// Cross-entropy restricted to boundary pixels, normalized by the image's
/// non-ignored pixel count.
pub fn boundary_loss(logits: &LogitMap, pseudo: &LabelMap, mask: &PixelMask) -> Result<f64> {
    boundary_impl(logits, pseudo, mask, None).map(|(v, _)| v)
}

pub fn boundary_loss_with_grad(
    logits: &LogitMap,
    pseudo: &LabelMap,
    mask: &PixelMask,
    grad_scale: f64,
    grad: &mut LogitMap,
) -> Result<(f64, usize)> {
    boundary_impl(logits, pseudo, mask, Some((grad, grad_scale)))
}

fn boundary_impl(
    logits: &LogitMap,
    pseudo: &LabelMap,
    mask: &PixelMask,
    mut grad: Option<(&mut LogitMap, f64)>,
) -> Result<(f64, usize)> {
    let (h, w) = pseudo.dims();
    check_dims(logits, h, w)?;
    if mask.dims() != (h, w) {
        return Err(shape_err(format!("{h}x{w} mask"), format!("{:?}", mask.dims())));
    }
    let valid = pseudo.valid_count();
    if valid == 0 {
        return Ok((0.0, 0));
    }
    let inv = 1.0 / valid as f64;
    let mut sum = 0.0;
    let mut edge = 0usize;
    for (j, &label) in pseudo.values.iter().enumerate() {
        if label == IGNORE_INDEX || !mask.values[j] {
            continue;
        }
        edge += 1;
        let t = check_label(label, logits.classes)?;
        let gr = grad.as_mut().map(|(g, s)| (&mut **g, *s * inv));
        sum += pixel_ce(logits, j, t, gr);
    }
    Ok((sum * inv, edge))
}

/// Stage-one objective: `labeled + lambda * weighted`.
pub fn total_stage1_loss(labeled: f64, weighted: f64, lambda_unsup: f64) -> f64 {
    labeled + lambda_unsup * weighted
}

/// Full objective: `labeled + lambda * weighted + coeff * boundary`.
pub fn final_loss(labeled: f64, weighted: f64, boundary: f64, cfg: &LossConfig) -> f64 {
    total_stage1_loss(labeled, weighted, cfg.lambda_unsup) + cfg.boundary_coeff * boundary
}
