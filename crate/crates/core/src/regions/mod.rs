//! Region bank construction: threshold the saliency map, label 8-connected
//! components, keep the top `N - 1` by mean saliency, compress each to at most
//! `n` tokens, and pool everything else into one global complement embedding.

mod components;
pub mod render;

pub use components::{connected_components, filter_small};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kmeans, RngStream, Similarity, Vector};
use crate::saliency::{
    binarize, compute_saliency, otsu_threshold, BinaryMask, OtsuThreshold, PatchGrid, SaliencyMap,
    OTSU_BINS,
};

/// `(row, col)` on the patch grid.
pub type Patch = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BBox {
    pub fn of(patches: &[Patch]) -> Option<BBox> {
        let first = patches.first()?;
        let mut b = BBox {
            min_row: first.0,
            min_col: first.1,
            max_row: first.0,
            max_col: first.1,
        };
        for &(r, c) in patches {
            b.min_row = b.min_row.min(r);
            b.min_col = b.min_col.min(c);
            b.max_row = b.max_row.max(r);
            b.max_col = b.max_col.max(c);
        }
        Some(b)
    }

    fn top_left(&self) -> (usize, usize) {
        (self.min_row, self.min_col)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    /// Bank slots: `max_regions - 1` local regions plus the global complement.
    pub max_regions: usize,
    /// Token budget per region.
    pub token_budget: usize,
    /// Components smaller than `min_area_frac * H * W` are discarded.
    pub min_area_frac: f64,
    pub otsu_bins: usize,
    pub similarity: Similarity,
    /// Oversized regions pre-select `pool_factor * token_budget` patches by
    /// saliency before clustering down to `token_budget` centroids.
    pub pool_factor: usize,
    pub kmeans_iters: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            max_regions: 5,
            token_budget: 48,
            min_area_frac: 0.01,
            otsu_bins: OTSU_BINS,
            similarity: Similarity::Cosine,
            pool_factor: 4,
            kmeans_iters: 50,
        }
    }
}

impl RegionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_regions < 1 {
            return Err(Error::invalid("max_regions must be >= 1"));
        }
        if self.token_budget < 1 {
            return Err(Error::invalid("token_budget must be >= 1"));
        }
        if !(self.min_area_frac > 0.0 && self.min_area_frac < 1.0) {
            return Err(Error::invalid("min_area_frac must lie in (0, 1)"));
        }
        if self.otsu_bins < 2 {
            return Err(Error::invalid("otsu_bins must be >= 2"));
        }
        if self.pool_factor < 1 {
            return Err(Error::invalid("pool_factor must be >= 1"));
        }
        Ok(())
    }
}

/// A selected local region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// Row-major, 8-connected for saliency regions.
    pub patches: Vec<Patch>,
    /// Mean normalized saliency over `patches`.
    pub score: f64,
    /// At most `token_budget` compressed patch embeddings.
    pub tokens: Vec<Vector>,
    /// Mean of `tokens`; what the policy scores and the reasoner receives.
    pub embedding: Vector,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBank {
    pub height: usize,
    pub width: usize,
    /// Sorted by descending score, ties by smaller top-left corner.
    pub regions: Vec<Region>,
    /// Patches not covered by any region.
    pub global_patches: Vec<Patch>,
    pub global_embedding: Vector,
}

impl RegionBank {
    /// Local regions plus the global slot.
    pub fn slot_count(&self) -> usize {
        self.regions.len() + 1
    }

    /// Index of the global complement slot.
    pub fn global_slot(&self) -> usize {
        self.regions.len()
    }

    pub fn slot_embedding(&self, slot: usize) -> &Vector {
        if slot < self.regions.len() {
            &self.regions[slot].embedding
        } else {
            &self.global_embedding
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.global_embedding.len()
    }

    /// A bank laid out on a `1 x (k + 1)` strip, one patch per slot, with each
    /// local region holding a single token. Scores descend with the index.
    pub fn from_slots(locals: Vec<Vector>, global: Vector) -> RegionBank {
        let k = locals.len();
        let regions = locals
            .into_iter()
            .enumerate()
            .map(|(i, e)| Region {
                patches: vec![(0, i)],
                score: 1.0 - i as f64 / (k + 1) as f64,
                tokens: vec![e.clone()],
                embedding: e,
                bbox: BBox {
                    min_row: 0,
                    min_col: i,
                    max_row: 0,
                    max_col: i,
                },
            })
            .collect();
        RegionBank {
            height: 1,
            width: k + 1,
            regions,
            global_patches: vec![(0, k)],
            global_embedding: global,
        }
    }

    /// Checks coverage, disjointness, ordering and stored means.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![0u8; self.height * self.width];
        let mut mark = |p: &Patch| -> Result<()> {
            if p.0 >= self.height || p.1 >= self.width {
                return Err(Error::Data(format!("patch {p:?} outside the grid")));
            }
            seen[p.0 * self.width + p.1] += 1;
            Ok(())
        };
        for r in &self.regions {
            if r.patches.is_empty() {
                return Err(Error::Data("region with no patches".into()));
            }
            r.patches.iter().try_for_each(&mut mark)?;
        }
        self.global_patches.iter().try_for_each(&mut mark)?;
        let covered = self.global_patches.len() + self.regions.iter().map(|r| r.patches.len()).sum::<usize>();
        if seen.iter().any(|&s| s > 1) {
            return Err(Error::Data("bank regions overlap".into()));
        }
        if covered != self.height * self.width && !self.global_patches.is_empty() {
            return Err(Error::Data("bank does not cover the grid".into()));
        }
        for w in self.regions.windows(2) {
            if region_order(&w[0], &w[1]) == Ordering::Greater {
                return Err(Error::Data("bank regions are not sorted by score".into()));
            }
        }
        let dim = self.global_embedding.len();
        for r in &self.regions {
            if r.tokens.is_empty() || r.tokens.iter().any(|t| t.len() != dim) {
                return Err(Error::Data("region tokens have the wrong dimension".into()));
            }
        }
        Ok(())
    }
}

fn region_order(a: &Region, b: &Region) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.top_left().cmp(&b.bbox.top_left()))
}

/// A component with its mean saliency.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredComponent {
    pub patches: Vec<Patch>,
    pub score: f64,
    pub bbox: BBox,
}

pub fn mean_saliency(patches: &[Patch], sal: &SaliencyMap) -> f64 {
    patches.iter().map(|&(r, c)| sal.get(r, c)).sum::<f64>() / patches.len() as f64
}

/// Scores components by mean normalized saliency and keeps the best `n_slots - 1`.
pub fn score_and_select(
    components: Vec<Vec<Patch>>,
    sal: &SaliencyMap,
    n_slots: usize,
) -> Result<Vec<ScoredComponent>> {
    if n_slots < 1 {
        return Err(Error::invalid("number of bank slots must be >= 1"));
    }
    let mut scored: Vec<ScoredComponent> = components
        .into_iter()
        .filter(|c| !c.is_empty())
        .map(|patches| {
            let score = mean_saliency(&patches, sal);
            let bbox = BBox::of(&patches).expect("non-empty");
            ScoredComponent {
                patches,
                score,
                bbox,
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.bbox.top_left().cmp(&b.bbox.top_left()))
            .then_with(|| a.patches[0].cmp(&b.patches[0]))
    });
    scored.truncate(n_slots - 1);
    Ok(scored)
}

/// Reduces a region's patch embeddings to at most `budget` tokens.
///
/// Regions within budget pass through in row-major order. Larger regions keep
/// their `pool_factor * budget` most salient patches and return the `budget`
/// k-means centroids of those embeddings.
pub fn compress_region(
    patches: &[Patch],
    grid: &PatchGrid,
    sal: &SaliencyMap,
    budget: usize,
    pool_factor: usize,
    kmeans_iters: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vector>> {
    if patches.is_empty() {
        return Err(Error::invalid("cannot compress an empty region"));
    }
    if budget == 0 {
        return Err(Error::invalid("token budget must be >= 1"));
    }
    if patches.len() <= budget {
        return Ok(patches.iter().map(|&(r, c)| grid.patch(r, c).clone()).collect());
    }
    let mut ranked: Vec<Patch> = patches.to_vec();
    ranked.sort_by(|a, b| sal.get(b.0, b.1).total_cmp(&sal.get(a.0, a.1)));
    ranked.truncate((budget * pool_factor.max(1)).min(patches.len()));
    let pool: Vec<Vector> = ranked.iter().map(|&(r, c)| grid.patch(r, c).clone()).collect();
    Ok(kmeans(&pool, budget, rng, kmeans_iters)?.centroids)
}

/// Mean patch embedding over everything outside `kept`, with the covered patches.
///
/// When `kept` covers the grid, the mean runs over all patches instead.
pub fn global_complement(kept: &[Vec<Patch>], grid: &PatchGrid) -> (Vec<Patch>, Vector) {
    let mut covered = vec![false; grid.len()];
    for region in kept {
        for &(r, c) in region {
            covered[grid.index(r, c)] = true;
        }
    }
    let rest: Vec<Patch> = (0..grid.height)
        .flat_map(|r| (0..grid.width).map(move |c| (r, c)))
        .filter(|&(r, c)| !covered[grid.index(r, c)])
        .collect();
    let embedding = if rest.is_empty() {
        Vector::mean(&grid.patch_embeddings)
    } else {
        Vector::mean(rest.iter().map(|&(r, c)| grid.patch(r, c)))
    };
    (rest, embedding)
}

/// Everything produced while segmenting one grid.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub saliency: SaliencyMap,
    /// `None` when the map was degenerate.
    pub threshold: Option<OtsuThreshold>,
    pub mask: Option<BinaryMask>,
    pub bank: RegionBank,
}

/// Assembles a bank from already-selected patch sets, in the given order.
pub fn assemble_bank(
    selected: Vec<(Vec<Patch>, f64)>,
    grid: &PatchGrid,
    sal: &SaliencyMap,
    cfg: &RegionConfig,
    rng: &mut RngStream,
) -> Result<RegionBank> {
    let mut regions = Vec::with_capacity(selected.len());
    for (i, (patches, score)) in selected.into_iter().enumerate() {
        let mut region_rng = rng.child(i as u64);
        let tokens = compress_region(
            &patches,
            grid,
            sal,
            cfg.token_budget,
            cfg.pool_factor,
            cfg.kmeans_iters,
            &mut region_rng,
        )?;
        let embedding = Vector::mean(&tokens);
        let bbox = BBox::of(&patches).expect("non-empty region");
        regions.push(Region {
            patches,
            score,
            tokens,
            embedding,
            bbox,
        });
    }
    regions.sort_by(region_order);
    let kept: Vec<Vec<Patch>> = regions.iter().map(|r| r.patches.clone()).collect();
    let (global_patches, global_embedding) = global_complement(&kept, grid);
    Ok(RegionBank {
        height: grid.height,
        width: grid.width,
        regions,
        global_patches,
        global_embedding,
    })
}

/// Saliency, Otsu, binarize, label, filter, select, compress, complement.
pub fn segment(grid: &PatchGrid, cfg: &RegionConfig, rng: &mut RngStream) -> Result<Segmentation> {
    cfg.validate()?;
    let saliency = compute_saliency(grid, cfg.similarity)?;
    let threshold = match otsu_threshold(&saliency, cfg.otsu_bins) {
        Ok(t) => t,
        Err(Error::DegenerateSaliency) => {
            let bank = assemble_bank(Vec::new(), grid, &saliency, cfg, rng)?;
            return Ok(Segmentation {
                saliency,
                threshold: None,
                mask: None,
                bank,
            });
        }
        Err(e) => return Err(e),
    };
    let mask = binarize(&saliency, threshold.tau)?;
    let comps = filter_small(
        connected_components(&mask),
        grid.height,
        grid.width,
        cfg.min_area_frac,
    )?;
    let selected = score_and_select(comps, &saliency, cfg.max_regions)?
        .into_iter()
        .map(|s| (s.patches, s.score))
        .collect();
    let bank = assemble_bank(selected, grid, &saliency, cfg, rng)?;
    Ok(Segmentation {
        saliency,
        threshold: Some(threshold),
        mask: Some(mask),
        bank,
    })
}

pub fn build_region_bank(
    grid: &PatchGrid,
    cfg: &RegionConfig,
    rng: &mut RngStream,
) -> Result<RegionBank> {
    Ok(segment(grid, cfg, rng)?.bank)
}

/// Unstructured baseline: random patch subsets with the given sizes.
///
/// Each subset has the same patch count as the matching saliency region, so
/// the token budget is unchanged; the patches are drawn uniformly without
/// regard to the query.
pub fn patch_subset_bank(
    grid: &PatchGrid,
    sal: &SaliencyMap,
    sizes: &[usize],
    cfg: &RegionConfig,
    rng: &mut RngStream,
) -> Result<RegionBank> {
    let total: usize = sizes.iter().sum();
    if total > grid.len() {
        return Err(Error::invalid("patch subsets exceed the grid"));
    }
    let order = rng.choose_distinct(grid.len(), total);
    let mut selected = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &size in sizes.iter().filter(|&&s| s > 0) {
        let mut patches: Vec<Patch> = order[offset..offset + size]
            .iter()
            .map(|&i| (i / grid.width, i % grid.width))
            .collect();
        patches.sort_unstable();
        offset += size;
        let score = mean_saliency(&patches, sal);
        selected.push((patches, score));
    }
    assemble_bank(selected, grid, sal, cfg, rng)
}

/// Question-independent bank of `count` random rectangular tiles.
///
/// The grid is cut into `tile x tile` blocks (edge blocks may be smaller);
/// every tile scores 0, so the bank is ordered by position.
pub fn tiling_bank(
    grid: &PatchGrid,
    tile: usize,
    count: usize,
    cfg: &RegionConfig,
    rng: &mut RngStream,
) -> Result<RegionBank> {
    if tile == 0 {
        return Err(Error::invalid("tile size must be >= 1"));
    }
    let mut tiles: Vec<Vec<Patch>> = Vec::new();
    for r0 in (0..grid.height).step_by(tile) {
        for c0 in (0..grid.width).step_by(tile) {
            let patches = (r0..(r0 + tile).min(grid.height))
                .flat_map(|r| (c0..(c0 + tile).min(grid.width)).map(move |c| (r, c)))
                .collect();
            tiles.push(patches);
        }
    }
    let picked = rng.choose_distinct(tiles.len(), count.min(tiles.len()));
    let sal = SaliencyMap::from_raw(grid.height, grid.width, vec![0.0; grid.len()])?;
    let selected = picked.into_iter().map(|i| (tiles[i].clone(), 0.0)).collect();
    assemble_bank(selected, grid, &sal, cfg, rng)
}
