//! Two-stage assignment of latent regions to ground-truth components.
//!
//! Stage one is an optimal one-to-one assignment (Hungarian method with
//! potentials) that covers every component. Stage two adds the globally
//! cheapest entries of the still-unmatched regions, any component allowed,
//! until `min(L, K)` regions are matched. Ties go to the lowest region index,
//! then the lowest component index.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::components::ComponentSet;
use crate::error::{Error, Result};
use crate::losses::{dice_value, focal_value};
use crate::sgr::RegionMasks;

/// `regions × components` costs, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    pub regions: usize,
    pub components: usize,
    pub values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(regions: usize, components: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != regions * components {
            return Err(Error::Dimension {
                what: "cost matrix",
                expected: regions * components,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Infeasible("non-finite cost".into()));
        }
        Ok(Self {
            regions,
            components,
            values,
        })
    }

    pub fn get(&self, region: usize, component: usize) -> f64 {
        self.values[region * self.components + component]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Sum of the costs of `pairs`, in order.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(region, component)`, one-to-one stage first (by component), then
    /// greedy additions in selection order.
    pub pairs: Vec<(usize, usize)>,
    pub num_components: usize,
    /// Components left without a region because `K < C`.
    pub shortfall: usize,
}

impl Assignment {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn matched_regions(&self) -> BTreeSet<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    /// Regions matched to `component`, ascending.
    pub fn regions_for(&self, component: usize) -> Vec<usize> {
        let mut r: Vec<usize> = self.pairs.iter().filter(|p| p.1 == component).map(|p| p.0).collect();
        r.sort_unstable();
        r
    }
}

/// `Cost[i, j] = focal(P_i, M_j) + rho · dice(P_i, M_j)` on detached masks.
pub fn build_cost_matrix(masks: &RegionMasks, cs: &ComponentSet, rho: f64, focal_gamma: f64) -> Result<CostMatrix> {
    if cs.is_empty() {
        return Err(Error::NoComponents);
    }
    if rho < 0.0 {
        return Err(Error::Config(format!("rho must be >= 0, got {rho}")));
    }
    let targets: Vec<Vec<f64>> = cs.components.iter().map(|c| c.target()).collect();
    let mut values = Vec::with_capacity(masks.concepts * cs.len());
    for k in 0..masks.concepts {
        let mask = masks.mask(k);
        for t in &targets {
            values.push(focal_value(&mask, t, focal_gamma)? + rho * dice_value(&mask, t)?);
        }
    }
    CostMatrix::new(masks.concepts, cs.len(), values)
}

/// Minimum-cost assignment of each of `n` rows to a distinct column out of
/// `m >= n`. Returns the column of each row.
fn solve_rectangular(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    debug_assert!(n <= m);
    // 1-based potentials; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            col_of_row[owner[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Optimal one-to-one assignment covering every component. Needs at least as
/// many regions as components. Pairs are ordered by component.
pub fn hungarian_match(cost: &CostMatrix) -> Result<Vec<(usize, usize)>> {
    if cost.regions < cost.components {
        return Err(Error::Infeasible(format!(
            "{} regions cannot cover {} components one-to-one",
            cost.regions, cost.components
        )));
    }
    let region_of = solve_rectangular(cost.components, cost.regions, |c, r| cost.get(r, c));
    Ok(region_of.into_iter().enumerate().map(|(c, r)| (r, c)).collect())
}

/// Adds the cheapest entries of unmatched regions until `min(l, K)` regions
/// are matched. A base larger than that target is returned unchanged.
pub fn greedy_extend(cost: &CostMatrix, base: &Assignment, l: usize) -> Assignment {
    let target = l.min(cost.regions);
    let mut out = base.clone();
    if base.len() >= target {
        if base.len() > target {
            log::warn!(
                "{} components exceed the active-region budget {}; no greedy matches added",
                base.len(),
                target
            );
        }
        return out;
    }
    let matched = base.matched_regions();
    let mut candidates: Vec<(f64, usize, usize)> = (0..cost.regions)
        .filter(|r| !matched.contains(r))
        .filter_map(|r| {
            (0..cost.components)
                .map(|c| (cost.get(r, c), r, c))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)))
        })
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    out.pairs
        .extend(candidates.into_iter().take(target - base.len()).map(|(_, r, c)| (r, c)));
    out
}

/// Cost matrix, one-to-one stage, greedy stage.
pub fn match_costs(cost: &CostMatrix, l: usize) -> Result<Assignment> {
    if cost.components == 0 {
        return Ok(Assignment::default());
    }
    if cost.regions < cost.components {
        // every region goes to a distinct component; the rest stay uncovered
        let comp_of = solve_rectangular(cost.regions, cost.components, |r, c| cost.get(r, c));
        let shortfall = cost.components - cost.regions;
        log::warn!("{shortfall} components left without a region (K < C)");
        return Ok(Assignment {
            pairs: comp_of.into_iter().enumerate().collect(),
            num_components: cost.components,
            shortfall,
        });
    }
    let base = Assignment {
        pairs: hungarian_match(cost)?,
        num_components: cost.components,
        shortfall: 0,
    };
    Ok(greedy_extend(cost, &base, l))
}

/// Matches region masks to components. An empty component set yields an
/// empty assignment.
pub fn match_regions(masks: &RegionMasks, cs: &ComponentSet, rho: f64, focal_gamma: f64, l: usize) -> Result<Assignment> {
    if cs.is_empty() {
        log::warn!("no components to match");
        return Ok(Assignment::default());
    }
    let cost = build_cost_matrix(masks, cs, rho, focal_gamma)?;
    match_costs(&cost, l)
}
