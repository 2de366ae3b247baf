//! PPM overlay of a saliency map with region outlines, plus a JSON legend.

use serde::Serialize;

use super::{Patch, RegionBank};
use crate::error::{Error, Result};
use crate::netpbm::RgbImage;
use crate::saliency::SaliencyMap;

/// Pixels per patch side in the overlay.
pub const DEFAULT_SCALE: usize = 16;

const PALETTE: [[u8; 3]; 8] = [
    [0, 255, 0],
    [0, 128, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 128, 0],
    [128, 0, 255],
    [255, 255, 255],
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LegendEntry {
    pub rank: usize,
    pub color: [u8; 3],
    pub score: f64,
    pub patches: usize,
    pub bbox: super::BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Legend {
    pub scale: usize,
    pub regions: Vec<LegendEntry>,
    pub global_patches: usize,
}

pub fn palette_color(rank: usize) -> [u8; 3] {
    PALETTE[rank % PALETTE.len()]
}

/// Saliency in the red channel, each region's boundary drawn in its rank color.
///
/// A patch pixel lies on the boundary when it sits on the patch edge facing a
/// patch outside the region (or the image border).
pub fn render_overlay(
    sal: &SaliencyMap,
    bank: &RegionBank,
    scale: usize,
) -> Result<(RgbImage, Legend)> {
    if scale == 0 {
        return Err(Error::invalid("render scale must be >= 1"));
    }
    if sal.height != bank.height || sal.width != bank.width {
        return Err(Error::invalid("saliency map and bank disagree on grid size"));
    }
    let (h, w) = (sal.height, sal.width);
    let mut img = RgbImage::new(w * scale, h * scale);
    for r in 0..h {
        for c in 0..w {
            let red = (255.0 * sal.get(r, c)).round().clamp(0.0, 255.0) as u8;
            for y in 0..scale {
                for x in 0..scale {
                    img.put(c * scale + x, r * scale + y, [red, 0, 0]);
                }
            }
        }
    }

    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (k, region) in bank.regions.iter().enumerate() {
        for &(r, c) in &region.patches {
            owner[r * w + c] = Some(k);
        }
    }
    let owner_at = |r: isize, c: isize| -> Option<usize> {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            None
        } else {
            owner[r as usize * w + c as usize]
        }
    };
    let thickness = (scale / 8).max(1);
    for (k, region) in bank.regions.iter().enumerate() {
        let color = palette_color(k);
        for &(r, c) in &region.patches {
            let draw = |img: &mut RgbImage, dr: isize, dc: isize| {
                let (ri, ci) = (r as isize, c as isize);
                if owner_at(ri + dr, ci + dc) == Some(k) {
                    return;
                }
                for t in 0..thickness {
                    for s in 0..scale {
                        let (x, y) = match (dr, dc) {
                            (-1, 0) => (s, t),
                            (1, 0) => (s, scale - 1 - t),
                            (0, -1) => (t, s),
                            _ => (scale - 1 - t, s),
                        };
                        img.put(c * scale + x, r * scale + y, color);
                    }
                }
            };
            for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                draw(&mut img, dr, dc);
            }
        }
    }

    let legend = Legend {
        scale,
        regions: bank
            .regions
            .iter()
            .enumerate()
            .map(|(k, r)| LegendEntry {
                rank: k,
                color: palette_color(k),
                score: r.score,
                patches: r.patches.len(),
                bbox: r.bbox,
            })
            .collect(),
        global_patches: bank.global_patches.len(),
    };
    Ok((img, legend))
}

/// Patches whose overlay pixels carry a region color somewhere.
pub fn outlined_patches(img: &RgbImage, scale: usize, color: [u8; 3]) -> Vec<Patch> {
    let mut out = Vec::new();
    for r in 0..img.height / scale {
        for c in 0..img.width / scale {
            let hit = (0..scale).any(|y| (0..scale).any(|x| img.get(c * scale + x, r * scale + y) == color));
            if hit {
                out.push((r, c));
            }
        }
    }
    out
}
