//! 8-connected component labeling over a binary patch mask.

use super::Patch;
use crate::error::{Error, Result};
use crate::saliency::BinaryMask;

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let ra = find(parent, a);
    let rb = find(parent, b);
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Maximal 8-connected sets of true cells.
///
/// Components are ordered by size (largest first), ties by their first patch
/// in row-major order; patches inside a component are row-major.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<Patch>> {
    let (h, w) = (mask.height, mask.width);
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let here = r * w + c;
            // Already-visited neighbours: W, NW, N, NE.
            if c > 0 && mask.get(r, c - 1) {
                union(&mut parent, here, here - 1);
            }
            if r > 0 {
                for dc in [-1isize, 0, 1] {
                    let cc = c as isize + dc;
                    if cc >= 0 && (cc as usize) < w && mask.get(r - 1, cc as usize) {
                        union(&mut parent, here, (r - 1) * w + cc as usize);
                    }
                }
            }
        }
    }

    let mut by_root: Vec<Option<usize>> = vec![None; h * w];
    let mut comps: Vec<Vec<Patch>> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let root = find(&mut parent, r * w + c);
            let slot = *by_root[root].get_or_insert_with(|| {
                comps.push(Vec::new());
                comps.len() - 1
            });
            comps[slot].push((r, c));
        }
    }
    // Stable: equal sizes keep row-major order of first appearance.
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    comps
}

/// Drops components with fewer than `alpha * height * width` patches.
pub fn filter_small(
    components: Vec<Vec<Patch>>,
    height: usize,
    width: usize,
    alpha: f64,
) -> Result<Vec<Vec<Patch>>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let min_area = alpha * (height * width) as f64;
    Ok(components
        .into_iter()
        .filter(|c| c.len() as f64 >= min_area)
        .collect())
}
