//! Question-conditioned saliency over a patch grid, Otsu thresholding and binarization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netpbm::GrayImage;
use crate::numerics::{Similarity, Vector};

/// Default histogram resolution for [`otsu_threshold`].
pub const OTSU_BINS: usize = 256;

/// Patch embeddings on an `height x width` grid plus the query they are scored against.
///
/// `patch_embeddings` are the encoder features used to build regions;
/// `fused_embeddings` live in the query's space and drive saliency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch_embeddings: Vec<Vector>,
    pub fused_embeddings: Vec<Vector>,
    pub query: Vector,
}

impl PatchGrid {
    pub fn new(
        height: usize,
        width: usize,
        patch_embeddings: Vec<Vector>,
        fused_embeddings: Vec<Vector>,
        query: Vector,
    ) -> Result<Self> {
        let grid = PatchGrid {
            height,
            width,
            patch_embeddings,
            fused_embeddings,
            query,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if n == 0 {
            return Err(Error::invalid("patch grid must be non-empty"));
        }
        if self.patch_embeddings.len() != n || self.fused_embeddings.len() != n {
            return Err(Error::invalid(format!(
                "grid {}x{} needs {n} embeddings, got {} patch / {} fused",
                self.height,
                self.width,
                self.patch_embeddings.len(),
                self.fused_embeddings.len()
            )));
        }
        let dv = self.patch_embeddings[0].len();
        if dv == 0 || self.patch_embeddings.iter().any(|z| z.len() != dv) {
            return Err(Error::invalid("patch embeddings must share one positive dimension"));
        }
        if self
            .fused_embeddings
            .iter()
            .any(|z| z.len() != self.query.len())
        {
            return Err(Error::invalid("fused embeddings must match the query dimension"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn embedding_dim(&self) -> usize {
        self.patch_embeddings[0].len()
    }

    pub fn patch(&self, row: usize, col: usize) -> &Vector {
        &self.patch_embeddings[self.index(row, col)]
    }
}

/// Raw similarities and their min-max rescaling to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl SaliencyMap {
    /// Min-max normalizes `raw`. A constant map normalizes to all zeros.
    pub fn from_raw(height: usize, width: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != height * width || raw.is_empty() {
            return Err(Error::invalid(format!(
                "saliency map {height}x{width} needs {} values, got {}",
                height * width,
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("saliency values must be finite"));
        }
        let normalized = min_max_normalize(&raw);
        Ok(SaliencyMap {
            height,
            width,
            raw,
            normalized,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.normalized[row * self.width + col]
    }

    pub fn is_constant(&self) -> bool {
        let first = self.raw[0];
        self.raw.iter().all(|&v| v == first)
    }

    /// 8-bit grayscale rendering, `round(255 * normalized)`.
    pub fn to_pgm(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self
                .normalized
                .iter()
                .map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }

    /// Reads an 8-bit map; raw values are `pixel / 255`.
    pub fn from_pgm(img: &GrayImage) -> Result<Self> {
        let raw = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        SaliencyMap::from_raw(img.height, img.width, raw)
    }
}

pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        let span = max - min;
        raw.iter().map(|v| ((v - min) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

/// Scores every fused patch embedding against the grid's query.
pub fn compute_saliency(grid: &PatchGrid, similarity: Similarity) -> Result<SaliencyMap> {
    grid.validate()?;
    let raw = grid
        .fused_embeddings
        .iter()
        .map(|z| similarity.eval(&grid.query, z))
        .collect::<Result<Vec<f64>>>()?;
    SaliencyMap::from_raw(grid.height, grid.width, raw)
}

/// Histogram bin of a normalized value.
pub fn histogram_bin(value: f64, bins: usize) -> usize {
    ((value * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtsuThreshold {
    /// First bin of the upper class.
    pub bin: usize,
    pub bins: usize,
    /// Lower edge of `bin`; the mask keeps values `>= tau`.
    pub tau: f64,
}

/// Otsu's threshold over a `bins`-bucket histogram of the normalized map.
///
/// Between-class variance is compared exactly in integer arithmetic using bin
/// indices as gray levels, so ties resolve to the smallest threshold.
/// Returns [`Error::DegenerateSaliency`] when every value lands in one bin.
pub fn otsu_threshold(map: &SaliencyMap, bins: usize) -> Result<OtsuThreshold> {
    if bins < 2 {
        return Err(Error::invalid("otsu needs at least 2 bins"));
    }
    if map.normalized.is_empty() {
        return Err(Error::invalid("otsu on an empty map"));
    }
    let mut counts = vec![0u64; bins];
    for &v in &map.normalized {
        counts[histogram_bin(v, bins)] += 1;
    }
    let total_n: i128 = map.normalized.len() as i128;
    let total_s: i128 = counts
        .iter()
        .enumerate()
        .map(|(b, &c)| b as i128 * c as i128)
        .sum();

    // Variance n0*n1*(mu0-mu1)^2 scaled by N^2: (n1*s0 - n0*s1)^2 / (n0*n1).
    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0i128, 0i128);
    for t in 1..bins {
        n0 += counts[t - 1] as i128;
        s0 += (t as i128 - 1) * counts[t - 1] as i128;
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_s - s0;
        let diff = n1 * s0 - n0 * s1;
        let num = (diff * diff) as u128;
        let den = (n0 * n1) as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    let (bin, _, _) = best.ok_or(Error::DegenerateSaliency)?;
    Ok(OtsuThreshold {
        bin,
        bins,
        tau: bin as f64 / bins as f64,
    })
}

/// The thresholded map: `bits[i] == (normalized[i] >= threshold)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
    pub threshold: f64,
}

impl BinaryMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

pub fn binarize(map: &SaliencyMap, tau: f64) -> Result<BinaryMask> {
    if !tau.is_finite() {
        return Err(Error::invalid("threshold must be finite"));
    }
    Ok(BinaryMask {
        height: map.height,
        width: map.width,
        bits: map.normalized.iter().map(|&v| v >= tau).collect(),
        threshold: tau,
    })
}
