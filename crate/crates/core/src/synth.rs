//! Procedural labeled scenes: a background class plus rectangles and
//! ellipses of foreground classes, painted in order so later shapes occlude
//! earlier ones.
//!
//! Every scene contains a foreground class split into at least two
//! components that survive filtering, which keeps the many-to-one matching
//! path busy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::components::{supervision_components, LabelMap};
use crate::error::{Error, Result};
use crate::pgm::GrayImage;

const MAX_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect,
    Disc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Including the background class 0.
    pub num_classes: usize,
    pub max_instances_per_class: usize,
    pub shapes: Vec<ShapeKind>,
    /// Standard deviation of per-pixel Gaussian color noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            num_classes: 4,
            max_instances_per_class: 3,
            shapes: vec![ShapeKind::Rect, ShapeKind::Disc],
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 {
            return Err(Error::Config("scenes need at least 4x4 pixels".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("scenes need a background and a foreground class".into()));
        }
        if self.shapes.is_empty() || self.max_instances_per_class == 0 {
            return Err(Error::Config("empty shape palette or zero instances".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("bad noise level {}", self.noise)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    /// `[W·H, 3]` row-major RGB in roughly `[0, 1]`.
    pub image: Vec<f64>,
    pub labels: LabelMap,
}

/// Base color of a class.
pub fn class_color(class: u32) -> [f64; 3] {
    const TABLE: [[f64; 3]; 8] = [
        [0.15, 0.15, 0.2],
        [0.9, 0.2, 0.2],
        [0.2, 0.8, 0.3],
        [0.25, 0.35, 0.95],
        [0.95, 0.85, 0.2],
        [0.8, 0.3, 0.85],
        [0.2, 0.85, 0.85],
        [0.95, 0.55, 0.15],
    ];
    if let Some(c) = TABLE.get(class as usize) {
        return *c;
    }
    let hue = (class as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.2 + 0.7 * r, 0.2 + 0.7 * g, 0.2 + 0.7 * b]
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    kind: ShapeKind,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Placed {
    fn contains(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.w || y >= self.y0 + self.h {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Disc => {
                let (rx, ry) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
                let dx = (x as f64 + 0.5 - self.x0 as f64 - rx) / rx;
                let dy = (y as f64 + 0.5 - self.y0 as f64 - ry) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn size_range(extent: usize) -> (usize, usize) {
    let lo = (extent / 5).max(2);
    let hi = (extent / 2).max(lo);
    (lo, hi)
}

fn random_box(rng: &mut ChaCha8Rng, kind: ShapeKind, width: usize, height: usize, area: (usize, usize, usize, usize)) -> Placed {
    let (ax, ay, aw, ah) = area;
    let (wlo, whi) = size_range(width);
    let (hlo, hhi) = size_range(height);
    let w = rng.gen_range(wlo..=whi).min(aw);
    let h = rng.gen_range(hlo..=hhi).min(ah);
    Placed {
        kind,
        x0: ax + rng.gen_range(0..=aw - w),
        y0: ay + rng.gen_range(0..=ah - h),
        w,
        h,
    }
}

/// Deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let mut best = None;
    for _ in 0..MAX_ATTEMPTS {
        let scene = attempt(spec, &mut rng);
        if has_split_foreground(&scene.labels) {
            return Ok(scene);
        }
        best.get_or_insert(scene);
    }
    log::warn!("seed {}: no split foreground class after {MAX_ATTEMPTS} attempts ({w}x{h})", spec.seed);
    Ok(best.expect("at least one attempt"))
}

fn has_split_foreground(labels: &LabelMap) -> bool {
    let cs = supervision_components(labels);
    let mut counts = std::collections::BTreeMap::new();
    for c in cs.components.iter().filter(|c| c.class_id != 0) {
        *counts.entry(c.class_id).or_insert(0usize) += 1;
    }
    counts.values().any(|&n| n >= 2)
}

fn attempt(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Scene {
    let (w, h) = (spec.width, spec.height);
    let split = rng.gen_range(1..spec.num_classes) as u32;

    // two shapes of the split class in opposite quadrants, one pixel of margin
    let (qw, qh) = (w / 2 - 1, h / 2 - 1);
    let flip = rng.gen_bool(0.5);
    let quadrants = if flip {
        [(0, 0, qw, qh), (w / 2 + 1, h / 2 + 1, w - w / 2 - 1, h - h / 2 - 1)]
    } else {
        [(w / 2 + 1, 0, w - w / 2 - 1, qh), (0, h / 2 + 1, qw, h - h / 2 - 1)]
    };
    let mut shapes: Vec<(u32, Placed)> = quadrants
        .iter()
        .map(|&q| {
            let kind = *spec.shapes.choose(rng).expect("non-empty palette");
            (split, random_box(rng, kind, w, h, q))
        })
        .collect();

    let mut rest = Vec::new();
    for class in 1..spec.num_classes as u32 {
        let mut count = rng.gen_range(0..=spec.max_instances_per_class);
        if class == split {
            count = count.saturating_sub(2);
        }
        rest.extend(std::iter::repeat(class).take(count));
    }
    rest.shuffle(rng);
    for class in rest {
        let kind = *spec.shapes.choose(rng).expect("non-empty palette");
        shapes.push((class, random_box(rng, kind, w, h, (0, 0, w, h))));
    }

    let mut classes = vec![0u32; w * h];
    let mut instances = vec![0u32; w * h];
    let mut tint = vec![[0.0; 3]; shapes.len() + 1];
    for (i, (class, shape)) in shapes.iter().enumerate() {
        let id = i as u32 + 1;
        let base = class_color(*class);
        for (t, b) in tint[id as usize].iter_mut().zip(base) {
            *t = (b + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
        for y in shape.y0..shape.y0 + shape.h {
            for x in shape.x0..shape.x0 + shape.w {
                if shape.contains(x, y) {
                    classes[y * w + x] = *class;
                    instances[y * w + x] = id;
                }
            }
        }
    }
    tint[0] = class_color(0);

    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut image = Vec::with_capacity(w * h * 3);
    for &id in &instances {
        for ch in 0..3 {
            let n = if spec.noise > 0.0 { normal.sample(rng) } else { 0.0 };
            image.push(tint[id as usize][ch] + n);
        }
    }
    let labels = LabelMap::new(w, h, classes, Some(instances)).expect("sizes agree and ids refine classes");
    Scene {
        seed: spec.seed,
        image,
        labels,
    }
}

/// Scenes for seeds `spec.seed .. spec.seed + n`.
pub fn generate_dataset(spec: &SceneSpec, n: usize) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    (0..n as u64).map(|i| generate_scene(&spec.with_seed(spec.seed + i))).collect()
}

impl Scene {
    /// Writes `{stem}_r/_g/_b.pgm`, `{stem}_class.pgm` and
    /// `{stem}_instance.pgm` into `dir`.
    pub fn write_pgm(&self, dir: &Path, stem: &str) -> Result<()> {
        let (w, h) = (self.labels.width, self.labels.height);
        for (ch, name) in ["r", "g", "b"].iter().enumerate() {
            let vals: Vec<f64> = self.image.iter().skip(ch).step_by(3).copied().collect();
            GrayImage::from_unit(w, h, &vals).write(&dir.join(format!("{stem}_{name}.pgm")))?;
        }
        let class: Vec<u16> = self.labels.classes.iter().map(|&c| c as u16).collect();
        GrayImage::new(w, h, class).write(&dir.join(format!("{stem}_class.pgm")))?;
        if let Some(inst) = &self.labels.instances {
            let inst: Vec<u16> = inst.iter().map(|&c| c as u16).collect();
            GrayImage::new(w, h, inst).write(&dir.join(format!("{stem}_instance.pgm")))?;
        }
        Ok(())
    }

    /// Reads the files written by [`Scene::write_pgm`]. Channel values are
    /// scaled by each file's maxval; the instance map is optional.
    pub fn read_pgm(dir: &Path, stem: &str) -> Result<Scene> {
        let mut channels = Vec::with_capacity(3);
        for name in ["r", "g", "b"] {
            channels.push(GrayImage::read(&dir.join(format!("{stem}_{name}.pgm")))?);
        }
        let mut labels = LabelMap::from_pgm(&dir.join(format!("{stem}_class.pgm")))?;
        let inst = dir.join(format!("{stem}_instance.pgm"));
        if inst.exists() {
            labels = labels.with_instance_pgm(&inst)?;
        }
        for c in &channels {
            if (c.width, c.height) != (labels.width, labels.height) {
                return Err(Error::Dimension {
                    what: "image channel",
                    expected: labels.len(),
                    got: c.pixels.len(),
                });
            }
        }
        let mut image = Vec::with_capacity(labels.len() * 3);
        for i in 0..labels.len() {
            for c in &channels {
                image.push(c.pixels[i] as f64 / c.maxval as f64);
            }
        }
        Ok(Scene { seed: 0, image, labels })
    }
}
