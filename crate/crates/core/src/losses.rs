//! Mask and classification objectives.
//!
//! Each mask loss has a tape version (for training) and a plain-slice
//! version (for the matching cost matrix, which never carries gradients).
//! Both evaluate the same formula.

use serde::{Deserialize, Serialize};

use crate::components::{ComponentSet, LabelMap};
use crate::error::{Error, Result};
use crate::matching::Assignment;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Smoothing term of the soft dice coefficient.
pub const DICE_EPS: f64 = 1e-6;
/// Probabilities entering the focal loss are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Dice weight in the matching cost and in the concept loss.
    pub rho: f64,
    /// Weight of the pairwise cosine term.
    pub gamma: f64,
    /// Weight of the concept loss against cross-entropy.
    pub beta: f64,
    /// Focusing exponent of the focal loss.
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rho: 1.0,
            gamma: 0.25,
            beta: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rho, self.gamma, self.beta, self.focal_gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { what, expected, got });
    }
    Ok(())
}

/// Mean focal loss of a soft mask against a binary target.
pub fn focal_value(pred: &[f64], target: &[f64], focal_gamma: f64) -> Result<f64> {
    check_len("focal target", pred.len(), target.len())?;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let pt = if t > 0.5 { p } else { 1.0 - p };
            -(1.0 - pt).powf(focal_gamma) * pt.ln()
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Squared-denominator soft dice loss.
pub fn dice_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len("dice target", pred.len(), target.len())?;
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let p2: f64 = pred.iter().map(|p| p * p).sum();
    let t2: f64 = target.iter().map(|t| t * t).sum();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (p2 + t2 + DICE_EPS))
}

pub fn cosine_value(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn as_flat(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    Ok(tape.reshape(v, &[n])?)
}

/// Focal loss on the tape. `pred` may have any shape with `target.len()`
/// elements.
pub fn focal_loss(tape: &mut Tape, pred: Var, target: &[f64], focal_gamma: f64) -> Result<Var> {
    check_len("focal target", tape.value(pred).len(), target.len())?;
    let n = target.len();
    let p = as_flat(tape, pred)?;
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    // p_t = p·(2t − 1) + (1 − t)
    let sign = tape.constant(Tensor::new(vec![n], target.iter().map(|t| 2.0 * t - 1.0).collect())?);
    let offset = tape.constant(Tensor::new(vec![n], target.iter().map(|t| 1.0 - t).collect())?);
    let signed = tape.mul(p, sign)?;
    let pt = tape.add(signed, offset)?;
    let miss = tape.affine(pt, -1.0, 1.0)?;
    let weight = tape.pow(miss, focal_gamma)?;
    let log_pt = tape.log(pt)?;
    let weighted = tape.mul(weight, log_pt)?;
    let mean = tape.mean(weighted)?;
    Ok(tape.scale(mean, -1.0)?)
}

pub fn dice_loss(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    check_len("dice target", tape.value(pred).len(), target.len())?;
    let p = as_flat(tape, pred)?;
    let t = tape.constant(Tensor::new(vec![target.len()], target.to_vec())?);
    let t2: f64 = target.iter().map(|t| t * t).sum();
    let pt = tape.mul(p, t)?;
    let inter = tape.sum(pt)?;
    let num = tape.affine(inter, 2.0, DICE_EPS)?;
    let pp = tape.mul(p, p)?;
    let p2 = tape.sum(pp)?;
    let den = tape.affine(p2, 1.0, t2 + DICE_EPS)?;
    let inv = tape.pow(den, -1.0)?;
    let ratio = tape.mul(num, inv)?;
    Ok(tape.affine(ratio, -1.0, 1.0)?)
}

fn cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ab = tape.mul(a, b)?;
    let dot = tape.sum(ab)?;
    let aa = tape.mul(a, a)?;
    let na = tape.sum(aa)?;
    let bb = tape.mul(b, b)?;
    let nb = tape.sum(bb)?;
    let norms = tape.mul(na, nb)?;
    let inv = tape.pow(norms, -0.5)?;
    Ok(tape.mul(dot, inv)?)
}

/// Mean cosine similarity over unordered pairs of masks; zero for fewer than
/// two masks.
pub fn cosine_pair_loss(tape: &mut Tape, masks: &[Var]) -> Result<Var> {
    let flat: Vec<Var> = masks.iter().map(|&m| as_flat(tape, m)).collect::<Result<_>>()?;
    let mut acc: Option<Var> = None;
    let mut pairs = 0usize;
    for i in 0..flat.len() {
        for k in i + 1..flat.len() {
            let c = cosine(tape, flat[i], flat[k])?;
            acc = Some(match acc {
                Some(a) => tape.add(a, c)?,
                None => c,
            });
            pairs += 1;
        }
    }
    match acc {
        Some(a) => Ok(tape.scale(a, 1.0 / pairs as f64)?),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// Concept supervision. `masks_t` holds the region masks as rows, `[K, N]`.
/// For each component the matched masks are summed, clamped into `[0, 1]`,
/// and scored with focal + `rho`·dice; matched masks of a component also pay
/// `gamma` times their mean pairwise cosine.
pub fn concept_loss(
    tape: &mut Tape,
    masks_t: Var,
    components: &ComponentSet,
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<Var> {
    let n = tape.shape(masks_t)[1];
    let mut total: Option<Var> = None;
    for (j, comp) in components.components.iter().enumerate() {
        let regions = assignment.regions_for(j);
        if regions.is_empty() {
            continue;
        }
        let target = comp.target();
        check_len("component mask", n, target.len())?;
        let rows = tape.select_rows(masks_t, &regions)?;
        let summed = if regions.len() == 1 {
            rows
        } else {
            let ones = tape.constant(Tensor::full(&[1, regions.len()], 1.0));
            tape.matmul(ones, rows)?
        };
        let union = tape.clamp(summed, 0.0, 1.0)?;
        let focal = focal_loss(tape, union, &target, weights.focal_gamma)?;
        let dice = dice_loss(tape, union, &target)?;
        let dice = tape.scale(dice, weights.rho)?;
        let mut term = tape.add(focal, dice)?;
        if regions.len() > 1 {
            let singles: Vec<Var> = (0..regions.len())
                .map(|r| tape.select_rows(rows, &[r]))
                .collect::<std::result::Result<_, TensorError>>()?;
            let cos = cosine_pair_loss(tape, &singles)?;
            let cos = tape.scale(cos, weights.gamma)?;
            term = tape.add(term, cos)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Mean per-pixel cross-entropy of `[N, classes]` logits.
pub fn pixel_cross_entropy(tape: &mut Tape, logits: Var, labels: &LabelMap) -> Result<Var> {
    let (n, classes) = tape.value(logits).dims2().ok_or(Error::Dimension {
        what: "logits rank",
        expected: 2,
        got: tape.shape(logits).len(),
    })?;
    check_len("label map", n, labels.len())?;
    labels.check_classes(classes)?;
    let mut onehot = vec![0.0; n * classes];
    for (i, &c) in labels.classes.iter().enumerate() {
        onehot[i * classes + c as usize] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(vec![n, classes], onehot)?);
    let probs = tape.softmax_rows(logits)?;
    let logp = tape.log(probs)?;
    let picked = tape.mul(logp, onehot)?;
    let s = tape.sum(picked)?;
    Ok(tape.scale(s, -1.0 / n as f64)?)
}

pub fn total_loss(tape: &mut Tape, ce: Var, concept: Var, beta: f64) -> Result<Var> {
    let weighted = tape.scale(concept, beta)?;
    Ok(tape.add(ce, weighted)?)
}
