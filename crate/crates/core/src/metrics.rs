//! Token interpretability metrics.
//!
//! Every token's soft mask votes for the ground-truth label of each pixel it
//! covers, giving one normalised histogram per token over the labels present
//! in the image. Semantics is the mean Shannon entropy (natural log) of those
//! histograms; diversity is the per-bin variance across tokens, averaged over
//! bins. Class-level scores use class bins over all pixels; instance-level
//! scores use instance bins over pixels that belong to an instance.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::components::LabelMap;
use crate::error::{Error, Result};
use crate::sgr::RegionMasks;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenHistogram {
    pub token: usize,
    pub bins: BTreeMap<u32, f64>,
}

impl TokenHistogram {
    pub fn entropy(&self) -> f64 {
        entropy(self.bins.values().copied())
    }
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(probs: impl IntoIterator<Item = f64>) -> f64 {
    probs
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

/// Normalised soft-vote histogram of one token. `labels[i] == None` marks an
/// unlabeled pixel; only labels in `present` get bins.
pub fn token_histogram(token: usize, mask: &[f64], labels: &[Option<u32>], present: &BTreeSet<u32>) -> Result<TokenHistogram> {
    if mask.len() != labels.len() {
        return Err(Error::Dimension {
            what: "histogram labels",
            expected: mask.len(),
            got: labels.len(),
        });
    }
    let mut bins: BTreeMap<u32, f64> = present.iter().map(|&l| (l, 0.0)).collect();
    let mut total = 0.0;
    for (&w, label) in mask.iter().zip(labels) {
        if let Some(bin) = label.and_then(|l| bins.get_mut(&l)) {
            *bin += w;
            total += w;
        }
    }
    if !(total > 0.0) {
        return Err(Error::ZeroMass);
    }
    bins.values_mut().for_each(|v| *v /= total);
    Ok(TokenHistogram { token, bins })
}

/// Mean token entropy of one image.
pub fn image_semantics(hists: &[TokenHistogram]) -> f64 {
    if hists.is_empty() {
        return 0.0;
    }
    hists.iter().map(TokenHistogram::entropy).sum::<f64>() / hists.len() as f64
}

/// Per-bin population variance across tokens, averaged over bins.
pub fn image_diversity(hists: &[TokenHistogram]) -> f64 {
    if hists.len() < 2 {
        log::warn!("diversity needs at least two tokens, got {}", hists.len());
        return 0.0;
    }
    let labels: BTreeSet<u32> = hists.iter().flat_map(|h| h.bins.keys().copied()).collect();
    if labels.is_empty() {
        return 0.0;
    }
    let n = hists.len() as f64;
    let total: f64 = labels
        .iter()
        .map(|l| {
            let vals: Vec<f64> = hists.iter().map(|h| h.bins.get(l).copied().unwrap_or(0.0)).collect();
            // offset from the first value keeps identical inputs at exactly zero
            let mean = vals[0] + vals.iter().map(|v| v - vals[0]).sum::<f64>() / n;
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
        })
        .sum();
    total / labels.len() as f64
}

/// Dataset semantics: mean over images of per-image mean entropy.
pub fn semantics_score(images: &[Vec<TokenHistogram>]) -> f64 {
    mean(images.iter().map(|h| image_semantics(h)))
}

pub fn diversity_score(images: &[Vec<TokenHistogram>]) -> f64 {
    mean(images.iter().map(|h| image_diversity(h)))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn histograms(masks: &RegionMasks, labels: &[Option<u32>]) -> Vec<TokenHistogram> {
    let present: BTreeSet<u32> = labels.iter().flatten().copied().collect();
    (0..masks.concepts)
        .filter_map(|k| match token_histogram(k, &masks.mask(k), labels, &present) {
            Ok(h) => Some(h),
            Err(e) => {
                log::warn!("token {k} skipped: {e}");
                None
            }
        })
        .collect()
}

pub fn class_histograms(masks: &RegionMasks, labels: &LabelMap) -> Vec<TokenHistogram> {
    let l: Vec<Option<u32>> = labels.classes.iter().map(|&c| Some(c)).collect();
    histograms(masks, &l)
}

/// Instance-bin histograms over pixels with a nonzero instance id.
pub fn instance_histograms(masks: &RegionMasks, labels: &LabelMap) -> Result<Vec<TokenHistogram>> {
    let inst = labels.instances.as_ref().ok_or(Error::MissingInstances)?;
    let l: Vec<Option<u32>> = inst.iter().map(|&i| (i != 0).then_some(i)).collect();
    Ok(histograms(masks, &l))
}

/// `(s_instance, d_instance)` of one image.
pub fn instance_metrics(masks: &RegionMasks, labels: &LabelMap) -> Result<(f64, f64)> {
    let h = instance_histograms(masks, labels)?;
    Ok((image_semantics(&h), image_diversity(&h)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub s_class: f64,
    pub d_class: f64,
    pub s_instance: Option<f64>,
    pub d_instance: Option<f64>,
    pub class_entropies: Vec<f64>,
    pub instance_entropies: Vec<f64>,
    pub class_histograms: Vec<TokenHistogram>,
    pub instance_histograms: Vec<TokenHistogram>,
}

pub fn image_metrics(id: impl Into<String>, masks: &RegionMasks, labels: &LabelMap) -> ImageMetrics {
    let ch = class_histograms(masks, labels);
    let ih = if labels.instances.as_ref().is_some_and(|i| i.iter().any(|&v| v != 0)) {
        instance_histograms(masks, labels).unwrap_or_default()
    } else {
        Vec::new()
    };
    let has_inst = !ih.is_empty();
    ImageMetrics {
        id: id.into(),
        s_class: image_semantics(&ch),
        d_class: image_diversity(&ch),
        s_instance: has_inst.then(|| image_semantics(&ih)),
        d_instance: has_inst.then(|| image_diversity(&ih)),
        class_entropies: ch.iter().map(TokenHistogram::entropy).collect(),
        instance_entropies: ih.iter().map(TokenHistogram::entropy).collect(),
        class_histograms: ch,
        instance_histograms: ih,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub s_class: f64,
    pub s_instance: f64,
    pub d_class: f64,
    pub d_instance: f64,
    pub images: Vec<ImageMetrics>,
}

/// Dataset means in image order. Images without instance pixels do not
/// enter the instance-level means.
pub fn metrics_report(images: Vec<ImageMetrics>) -> MetricsReport {
    MetricsReport {
        s_class: mean(images.iter().map(|m| m.s_class)),
        d_class: mean(images.iter().map(|m| m.d_class)),
        s_instance: mean(images.iter().filter_map(|m| m.s_instance)),
        d_instance: mean(images.iter().filter_map(|m| m.d_instance)),
        images,
    }
}
