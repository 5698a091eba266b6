//! Brute-force reference implementations, kept independent of the
//! production algorithms they check.

use crate::matching::CostMatrix;

/// Minimum total over all injective component → region maps, by exhaustive
/// enumeration. Costs are summed in component order.
pub fn min_assignment_cost(cost: &CostMatrix) -> f64 {
    fn go(cost: &CostMatrix, comp: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if comp == cost.components {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for r in 0..cost.regions {
            if !used[r] {
                used[r] = true;
                go(cost, comp + 1, used, acc + cost.get(r, comp), best);
                used[r] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.regions], 0.0, &mut best);
    best
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Same-class 8-connected components by union-find over a single raster
/// pass. Each component is `(class, sorted pixel indices)`; the list is
/// sorted.
pub fn union_find_components(width: usize, height: usize, classes: &[u32]) -> Vec<(u32, Vec<usize>)> {
    let n = width * height;
    let mut parent: Vec<usize> = (0..n).collect();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            // already-visited neighbours: W, NW, N, NE
            let mut prev = Vec::with_capacity(4);
            if x > 0 {
                prev.push(i - 1);
            }
            if y > 0 {
                prev.push(i - width);
                if x > 0 {
                    prev.push(i - width - 1);
                }
                if x + 1 < width {
                    prev.push(i - width + 1);
                }
            }
            for j in prev {
                if classes[j] == classes[i] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<(u32, Vec<usize>)> = groups.into_values().map(|px| (classes[px[0]], px)).collect();
    out.sort();
    out
}
