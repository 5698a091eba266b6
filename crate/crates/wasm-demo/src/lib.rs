//! Browser demo: synthetic scenes and their components, the two-stage
//! matcher on a hand-written cost matrix, and region masks from a small
//! model trained in the page.
//!
//! Each operation is a plain function returning JSON so it can be tested
//! natively; the `wasm_bindgen` exports wrap them.

use serde_json::{json, Value};
use sgr_core::components::{extract_components, supervision_components, ComponentSet};
use sgr_core::matching::{match_costs, match_regions, CostMatrix};
use sgr_core::metrics::image_metrics;
use sgr_core::sgr::{predict, SgrConfig};
use sgr_core::synth::{class_color, generate_dataset, generate_scene, SceneSpec};
use sgr_core::train::{evaluate, train, TrainConfig};
use sgr_core::Result;
use wasm_bindgen::prelude::*;

/// Model size used by the in-page training run.
pub fn demo_model(size: usize) -> SgrConfig {
    SgrConfig {
        width: size,
        height: size,
        channels: 8,
        concepts: 8,
        max_active: 6,
        token_dim: 8,
        num_layers: 1,
        num_heads: 2,
        num_classes: 4,
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGBA bytes for a canvas `ImageData`.
fn rgba(pixels: impl Iterator<Item = [f64; 3]>) -> Vec<u8> {
    pixels.flat_map(|[r, g, b]| [to_byte(r), to_byte(g), to_byte(b), 255]).collect()
}

fn class_rgba(classes: &[u32]) -> Vec<u8> {
    rgba(classes.iter().map(|&c| class_color(c)))
}

/// Pixel -> 1-based component index, 0 where no component survives.
fn component_ids(cs: &ComponentSet, pixels: usize) -> Vec<usize> {
    let mut ids = vec![0; pixels];
    for (i, c) in cs.components.iter().enumerate() {
        for (p, _) in c.mask.iter().enumerate().filter(|(_, &m)| m) {
            ids[p] = i + 1;
        }
    }
    ids
}

fn component_rgba(ids: &[usize]) -> Vec<u8> {
    rgba(ids.iter().map(|&id| {
        if id == 0 {
            [0.0; 3]
        } else {
            // spread hues so neighbouring ids differ
            let h = (id as f64 * 0.381_966) % 1.0;
            let f = |o: f64| 0.5 + 0.45 * (std::f64::consts::TAU * (h + o)).cos();
            [f(0.0), f(1.0 / 3.0), f(2.0 / 3.0)]
        }
    }))
}

fn component_summary(cs: &ComponentSet) -> Vec<Value> {
    cs.components.iter().map(|c| json!({ "class": c.class_id, "area": c.area })).collect()
}

/// Scene image, class map, raw components and the filtered supervision set.
pub fn scene_view(seed: u64, size: usize) -> Result<Value> {
    let spec = SceneSpec {
        width: size,
        height: size,
        seed,
        ..Default::default()
    };
    let scene = generate_scene(&spec)?;
    let raw = extract_components(&scene.labels);
    let kept = supervision_components(&scene.labels);
    let pixels = scene.labels.len();
    Ok(json!({
        "width": size,
        "height": size,
        "image": rgba(scene.image.chunks(3).map(|c| [c[0], c[1], c[2]])),
        "classes": class_rgba(&scene.labels.classes),
        "components": component_rgba(&component_ids(&kept, pixels)),
        "raw": component_summary(&raw),
        "kept": component_summary(&kept),
    }))
}

/// Parses rows of whitespace- or comma-separated numbers. Rows are regions,
/// columns are components.
pub fn parse_costs(text: &str) -> std::result::Result<CostMatrix, String> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
                .collect()
        })
        .collect::<std::result::Result<_, _>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err("empty cost matrix".into());
    }
    if rows.iter().any(|r| r.len() != cols) {
        return Err("rows have different lengths".into());
    }
    CostMatrix::new(rows.len(), cols, rows.concat()).map_err(|e| e.to_string())
}

/// Two-stage matching on a user cost matrix.
pub fn match_view(text: &str, l: usize) -> std::result::Result<Value, String> {
    let cost = parse_costs(text)?;
    let a = match_costs(&cost, l).map_err(|e| e.to_string())?;
    let one_to_one = if a.shortfall > 0 { a.len() } else { a.num_components.min(a.len()) };
    let pairs: Vec<Value> = a
        .pairs
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            json!({
                "region": r,
                "component": c,
                "cost": cost.get(r, c),
                "stage": if i < one_to_one { "hungarian" } else { "greedy" },
            })
        })
        .collect();
    Ok(json!({
        "regions": cost.regions,
        "components": cost.components,
        "pairs": pairs,
        "total": cost.total(&a.pairs),
        "uncovered": a.shortfall,
    }))
}

/// Trains the demo model for `steps` on eight scenes, then shows every
/// region mask on a held-out scene together with the regions matched to its
/// components.
pub fn regions_view(seed: u64, steps: usize, supervised: bool) -> Result<Value> {
    let size = 16;
    let model = demo_model(size);
    let spec = SceneSpec {
        width: size,
        height: size,
        ..Default::default()
    };
    let data = generate_dataset(&spec.with_seed(seed * 1000), 8)?;
    let scene = generate_scene(&spec.with_seed(seed * 1000 + 500))?;
    let mut cfg = TrainConfig {
        model,
        steps: steps.max(1),
        seed,
        supervision: supervised,
        ..Default::default()
    };
    if !supervised {
        cfg.weights.beta = 0.0;
    }
    let (params, report) = train(&cfg, &data)?;
    let pred = predict(&params, &model, &scene.image)?;
    let cs = supervision_components(&scene.labels);
    let assignment = match_regions(&pred.masks, &cs, cfg.weights.rho, cfg.weights.focal_gamma, model.max_active)?;
    let m = image_metrics("demo", &pred.masks, &scene.labels);
    let acc = evaluate(&params, &model, std::slice::from_ref(&scene))?.pixel_accuracy;
    let masks: Vec<Value> = (0..model.concepts)
        .map(|k| {
            let mask = pred.masks.mask(k);
            let matched: Vec<usize> = assignment.pairs.iter().filter(|p| p.0 == k).map(|p| p.1).collect();
            json!({
                "pixels": rgba(mask.iter().map(|&v| [v, v, v])),
                "centroid": pred.centroids[k],
                "components": matched,
            })
        })
        .collect();
    Ok(json!({
        "width": size,
        "height": size,
        "image": rgba(scene.image.chunks(3).map(|c| [c[0], c[1], c[2]])),
        "truth": class_rgba(&scene.labels.classes),
        "predicted": class_rgba(&pred.classes),
        "masks": masks,
        "first_loss": report.losses[0],
        "final_loss": report.final_loss(20),
        "accuracy": acc,
        "s_class": m.s_class,
        "d_class": m.d_class,
    }))
}

fn js(r: std::result::Result<Value, String>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn scene(seed: u32, size: u32) -> std::result::Result<String, JsError> {
    js(scene_view(seed.into(), size as usize).map_err(|e| e.to_string()))
}

#[wasm_bindgen]
pub fn assign(costs: &str, l: u32) -> std::result::Result<String, JsError> {
    js(match_view(costs, l as usize))
}

#[wasm_bindgen]
pub fn regions(seed: u32, steps: u32, supervised: bool) -> std::result::Result<String, JsError> {
    js(regions_view(seed.into(), steps as usize, supervised).map_err(|e| e.to_string()))
}
