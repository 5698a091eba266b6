//! Momentum SGD training with a polynomial learning-rate decay, evaluation,
//! and mask rendering.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::{supervision_components, ComponentSet};
use crate::error::{Error, Result};
use crate::losses::{concept_loss, pixel_cross_entropy, total_loss, LossWeights};
use crate::matching::{match_regions, Assignment};
use crate::metrics::{image_metrics, metrics_report, MetricsReport};
use crate::pgm::GrayImage;
use crate::sgr::{image_constant, predict, sgr_forward, ParamVars, RegionMasks, SgrConfig, SgrParameters};
use crate::synth::Scene;
use crate::tensor::{Tape, Var};

pub const CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: SgrConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub poly_power: f64,
    pub seed: u64,
    /// When off, the concept term is never computed.
    pub supervision: bool,
    /// Rescales the gradient when its global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: SgrConfig::default(),
            weights: LossWeights::default(),
            lr: 0.01,
            momentum: 0.9,
            steps: 2000,
            poly_power: 0.9,
            seed: 0,
            supervision: true,
            clip_norm: Some(CLIP_NORM),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip norm must be > 0, got {c}")));
            }
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        Ok(())
    }

    fn concept_active(&self) -> bool {
        self.supervision
    }
}

/// `base · (1 − step/total)^power`.
pub fn lr_schedule(step: usize, total: usize, base: f64, power: f64) -> f64 {
    base * (1.0 - step as f64 / total as f64).powf(power)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pixel_accuracy: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub losses: Vec<f64>,
    pub ce_losses: Vec<f64>,
    pub concept_losses: Vec<f64>,
    pub wall_clock_secs: f64,
    pub evaluation: Option<Evaluation>,
}

impl RunReport {
    /// Mean of the last `window` recorded losses.
    pub fn final_loss(&self, window: usize) -> f64 {
        let w = window.clamp(1, self.losses.len().max(1));
        self.losses[self.losses.len() - w..].iter().sum::<f64>() / w as f64
    }

    /// `step,loss` lines.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }
}

/// Loss values and gradients of one image.
pub struct StepOutcome {
    pub total: f64,
    pub ce: f64,
    pub concept: f64,
    pub assignment: Option<Assignment>,
    pub grads: Vec<Vec<f64>>,
}

/// Forward and backward on one scene. The assignment is computed on detached
/// masks unless one is supplied.
pub fn step_gradients(
    params: &SgrParameters,
    cfg: &TrainConfig,
    scene: &Scene,
    components: &ComponentSet,
    fixed: Option<&Assignment>,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let (loss, ce, concept, assignment) = build_loss(&mut tape, &vars, cfg, scene, components, fixed)?;
    let total = tape.value(loss).item();
    let ce_v = tape.value(ce).item();
    let concept_v = concept.map(|c| tape.value(c).item()).unwrap_or(0.0);
    let grads = tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params.iter())
        .map(|(v, t)| grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok(StepOutcome {
        total,
        ce: ce_v,
        concept: concept_v,
        assignment,
        grads,
    })
}

/// Records `CE + β·concept` for one scene. Returns the total, the CE term,
/// the concept term (when supervised) and the assignment used.
pub fn build_loss(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &TrainConfig,
    scene: &Scene,
    components: &ComponentSet,
    fixed: Option<&Assignment>,
) -> Result<(Var, Var, Option<Var>, Option<Assignment>)> {
    let m = &cfg.model;
    let img = image_constant(tape, &scene.image, m)?;
    let out = sgr_forward(tape, img, vars, m)?;
    let ce = pixel_cross_entropy(tape, out.logits, &scene.labels)?;
    if !cfg.concept_active() || components.is_empty() {
        return Ok((ce, ce, None, None));
    }
    let assignment = match fixed {
        Some(a) => a.clone(),
        None => {
            let masks = RegionMasks::from_tape(tape, out.masks, m.width, m.height)?;
            match_regions(&masks, components, cfg.weights.rho, cfg.weights.focal_gamma, m.max_active)?
        }
    };
    let concept = concept_loss(tape, out.masks_t, components, &assignment, &cfg.weights)?;
    let total = total_loss(tape, ce, concept, cfg.weights.beta)?;
    Ok((total, ce, Some(concept), Some(assignment)))
}

pub fn train(cfg: &TrainConfig, data: &[Scene]) -> Result<(SgrParameters, RunReport)> {
    let params = SgrParameters::init(&cfg.model, cfg.seed)?;
    train_from(cfg, data, params)
}

/// Trains starting from `params`.
pub fn train_from(cfg: &TrainConfig, data: &[Scene], mut params: SgrParameters) -> Result<(SgrParameters, RunReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let started = Instant::now();
    let components: Vec<ComponentSet> = data.iter().map(|s| supervision_components(&s.labels)).collect();
    let mut velocity: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_da7a);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = RunReport {
        losses: Vec::with_capacity(cfg.steps),
        ce_losses: Vec::with_capacity(cfg.steps),
        concept_losses: Vec::with_capacity(cfg.steps),
        wall_clock_secs: 0.0,
        evaluation: None,
    };
    for step in 0..cfg.steps {
        if step % data.len() == 0 {
            order.shuffle(&mut rng);
        }
        let idx = order[step % data.len()];
        let out = step_gradients(&params, cfg, &data[idx], &components[idx], None)?;
        if !out.total.is_finite() || out.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                ce: out.ce,
                concept: out.concept,
            });
        }
        let lr = lr_schedule(step, cfg.steps, cfg.lr, cfg.poly_power);
        let norm = out.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let factor = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&out.grads) {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = cfg.momentum * *vv + factor * gv;
                *pv -= lr * *vv;
            }
        }
        if step % 100 == 0 {
            log::debug!("step {step}: loss {:.4} (ce {:.4}, concept {:.4})", out.total, out.ce, out.concept);
        }
        report.losses.push(out.total);
        report.ce_losses.push(out.ce);
        report.concept_losses.push(out.concept);
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Pixel accuracy, IoU per class, and token metrics over `data`.
pub fn evaluate(params: &SgrParameters, cfg: &SgrConfig, data: &[Scene]) -> Result<Evaluation> {
    let k = cfg.num_classes;
    let mut confusion = vec![0usize; k * k];
    let mut per_image = Vec::with_capacity(data.len());
    for scene in data {
        scene.labels.check_classes(k)?;
        let pred = predict(params, cfg, &scene.image)?;
        for (&t, &p) in scene.labels.classes.iter().zip(&pred.classes) {
            confusion[t as usize * k + p as usize] += 1;
        }
        per_image.push(image_metrics(format!("seed-{}", scene.seed), &pred.masks, &scene.labels));
    }
    let (class_iou, mean_iou, pixel_accuracy) = confusion_scores(&confusion, k);
    Ok(Evaluation {
        pixel_accuracy,
        class_iou,
        mean_iou,
        metrics: metrics_report(per_image),
    })
}

/// `(per-class IoU, mean IoU, accuracy)` of a row-major `truth × predicted`
/// confusion matrix.
pub fn confusion_scores(confusion: &[usize], k: usize) -> (Vec<Option<f64>>, f64, f64) {
    let total: usize = confusion.iter().sum();
    let correct: usize = (0..k).map(|c| confusion[c * k + c]).sum();
    let ious: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = confusion[c * k + c];
            let fn_: usize = (0..k).map(|p| confusion[c * k + p]).sum::<usize>() - tp;
            let fp: usize = (0..k).map(|t| confusion[t * k + c]).sum::<usize>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    let acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    (ious, miou, acc)
}

/// Writes one 8-bit PGM per concept, `mask_000.pgm`, ..., with values
/// `round(255·P)`.
pub fn render_masks(masks: &RegionMasks, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    (0..masks.concepts)
        .map(|k| {
            let path = out_dir.join(format!("mask_{k:03}.pgm"));
            GrayImage::from_unit(masks.width, masks.height, &masks.mask(k)).write(&path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0, 100, 0.004, 0.9), 0.004);
        assert_relative_eq!(lr_schedule(50, 100, 0.004, 0.9), 0.004 * 0.5f64.powf(0.9), epsilon = 1e-15);
        assert_relative_eq!(lr_schedule(50, 100, 0.004, 0.9), 0.002143, epsilon = 1e-6);
        let last = lr_schedule(99_999, 100_000, 0.004, 0.9);
        assert!(last < 1e-6 && last > 0.0);
        let mut prev = f64::INFINITY;
        for s in 0..100 {
            let lr = lr_schedule(s, 100, 0.01, 0.9);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { steps: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn confusion_perfect_and_chance() {
        let (iou, miou, acc) = confusion_scores(&[5, 0, 0, 7], 2);
        assert_eq!(iou, vec![Some(1.0), Some(1.0)]);
        assert_eq!((miou, acc), (1.0, 1.0));
        let (iou, _, acc) = confusion_scores(&[3, 0, 0, 0, 0, 0, 0, 0, 0], 3);
        assert_eq!(iou, vec![Some(1.0), None, None]);
        assert_eq!(acc, 1.0);
        let (_, _, acc) = confusion_scores(&[1, 1, 1, 1], 2);
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn render_half_masks() {
        let dir = tempfile::tempdir().unwrap();
        let masks = RegionMasks::new(3, 2, 2, vec![0.5; 12]).unwrap();
        let files = render_masks(&masks, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let img = GrayImage::read(&files[1]).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn loss_csv_format() {
        let r = RunReport {
            losses: vec![1.5, 0.25],
            ce_losses: vec![],
            concept_losses: vec![],
            wall_clock_secs: 0.0,
            evaluation: None,
        };
        assert_eq!(r.loss_csv(), "step,loss\n0,1.5\n1,0.25\n");
        assert_eq!(r.final_loss(1), 0.25);
    }
}
