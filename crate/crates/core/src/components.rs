//! Per-class connected components of ground-truth label maps.
//!
//! Components use 8-connectivity. Filtering applies one 3×3 binary opening
//! to each component, relabels, and drops pieces smaller than 5% of the
//! largest surviving area.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::GrayImage;

/// Minimum kept area, as a percentage of the image's largest component.
pub const MIN_AREA_PERCENT: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    /// Row-major class ids.
    pub classes: Vec<u32>,
    /// Row-major instance ids, `0` meaning no instance.
    pub instances: Option<Vec<u32>>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, classes: Vec<u32>, instances: Option<Vec<u32>>) -> Result<Self> {
        let n = width * height;
        if classes.len() != n {
            return Err(Error::Dimension {
                what: "class map",
                expected: n,
                got: classes.len(),
            });
        }
        if let Some(inst) = &instances {
            if inst.len() != n {
                return Err(Error::Dimension {
                    what: "instance map",
                    expected: n,
                    got: inst.len(),
                });
            }
            let mut owner = std::collections::HashMap::new();
            for (&i, &c) in inst.iter().zip(&classes) {
                if i != 0 && *owner.entry(i).or_insert(c) != c {
                    return Err(Error::Config(format!("instance {i} spans several classes")));
                }
            }
        }
        Ok(Self {
            width,
            height,
            classes,
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn present_classes(&self) -> BTreeSet<u32> {
        self.classes.iter().copied().collect()
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.classes.iter().find(|&&c| c as usize >= num_classes) {
            Some(&id) => Err(Error::ClassOutOfRange { id, num_classes }),
            None => Ok(()),
        }
    }

    /// Class map from a PGM whose sample values are class ids.
    pub fn from_pgm(path: &Path) -> Result<Self> {
        let img = GrayImage::read(path)?;
        Self::new(img.width, img.height, img.pixels.iter().map(|&p| p as u32).collect(), None)
    }

    /// Attaches instance ids from a PGM of matching size.
    pub fn with_instance_pgm(self, path: &Path) -> Result<Self> {
        let img = GrayImage::read(path)?;
        if (img.width, img.height) != (self.width, self.height) {
            return Err(Error::Dimension {
                what: "instance map",
                expected: self.len(),
                got: img.pixels.len(),
            });
        }
        let inst = img.pixels.iter().map(|&p| p as u32).collect();
        Self::new(self.width, self.height, self.classes, Some(inst))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub class_id: u32,
    pub mask: Vec<bool>,
    pub area: usize,
}

impl Component {
    /// Binary mask as `0.0 / 1.0` values.
    pub fn target(&self) -> Vec<f64> {
        self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub width: usize,
    pub height: usize,
    pub components: Vec<Component>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn areas(&self) -> Vec<usize> {
        self.components.iter().map(|c| c.area).collect()
    }

    pub fn max_area(&self) -> usize {
        self.components.iter().map(|c| c.area).max().unwrap_or(0)
    }
}

fn neighbours(width: usize, height: usize, idx: usize) -> impl Iterator<Item = usize> {
    let (x, y) = ((idx % width) as isize, (idx / width) as isize);
    (-1isize..=1)
        .flat_map(move |dy| (-1isize..=1).map(move |dx| (x + dx, y + dy)))
        .filter(move |&(nx, ny)| nx >= 0 && ny >= 0 && nx < width as isize && ny < height as isize)
        .map(move |(nx, ny)| ny as usize * width + nx as usize)
}

/// 8-connected components of a binary mask, in raster order of their first
/// pixel.
pub fn label_binary(width: usize, height: usize, mask: &[bool]) -> Vec<Vec<bool>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = vec![false; mask.len()];
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            comp[p] = true;
            for q in neighbours(width, height, p) {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        out.push(comp);
    }
    out
}

fn make_component(class_id: u32, mask: Vec<bool>) -> Component {
    let area = mask.iter().filter(|&&b| b).count();
    Component { class_id, mask, area }
}

/// Components of every class present, ordered by class id and then by first
/// pixel. No filtering.
pub fn extract_components(labels: &LabelMap) -> ComponentSet {
    let mut components = Vec::new();
    for class in labels.present_classes() {
        let mask: Vec<bool> = labels.classes.iter().map(|&c| c == class).collect();
        components.extend(
            label_binary(labels.width, labels.height, &mask)
                .into_iter()
                .map(|m| make_component(class, m)),
        );
    }
    ComponentSet {
        width: labels.width,
        height: labels.height,
        components,
    }
}

/// 3×3 erosion; out-of-image neighbours are ignored.
pub fn erode(width: usize, height: usize, mask: &[bool]) -> Vec<bool> {
    (0..mask.len())
        .map(|i| mask[i] && neighbours(width, height, i).all(|q| mask[q]))
        .collect()
}

/// 3×3 dilation; out-of-image neighbours are ignored.
pub fn dilate(width: usize, height: usize, mask: &[bool]) -> Vec<bool> {
    (0..mask.len())
        .map(|i| neighbours(width, height, i).any(|q| mask[q]))
        .collect()
}

pub fn open(width: usize, height: usize, mask: &[bool]) -> Vec<bool> {
    dilate(width, height, &erode(width, height, mask))
}

/// Keeps components whose area is at least 5% of the largest one.
pub fn drop_small(cs: &ComponentSet) -> ComponentSet {
    let max = cs.max_area();
    ComponentSet {
        width: cs.width,
        height: cs.height,
        components: cs
            .components
            .iter()
            .filter(|c| c.area * 100 >= MIN_AREA_PERCENT * max)
            .cloned()
            .collect(),
    }
}

/// Opening, relabelling, and the 5% area rule. When opening erases every
/// component, the area rule is applied to the input instead.
pub fn filter_small_components(cs: &ComponentSet) -> ComponentSet {
    let (w, h) = (cs.width, cs.height);
    let mut opened = Vec::new();
    for comp in &cs.components {
        let m = open(w, h, &comp.mask);
        opened.extend(label_binary(w, h, &m).into_iter().map(|m| make_component(comp.class_id, m)));
    }
    if opened.is_empty() {
        return drop_small(cs);
    }
    drop_small(&ComponentSet {
        width: w,
        height: h,
        components: opened,
    })
}

/// Extraction followed by filtering: the supervision targets of one image.
pub fn supervision_components(labels: &LabelMap) -> ComponentSet {
    filter_small_components(&extract_components(labels))
}
