//! Occupancy pyramids and prune supervision for the decoder's upsampling
//! stages.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::grid::{SparseAttributeGrid, VoxelCoord};

/// Coarse coordinates `c / factor`, sorted and deduplicated.
pub fn downsample_occupancy(coords: &[VoxelCoord], factor: u32, resolution: u32) -> Result<Vec<VoxelCoord>> {
    if factor == 0 || resolution % factor != 0 {
        return Err(Error::InvalidInput(format!("factor {factor} does not divide resolution {resolution}")));
    }
    let mut out: Vec<VoxelCoord> = coords.iter().map(|c| c.parent(factor)).collect();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// All eight children of each coordinate, sorted.
pub fn children(coords: &[VoxelCoord]) -> Vec<VoxelCoord> {
    let mut out = Vec::with_capacity(coords.len() * 8);
    for c in coords {
        for b in 0..8u32 {
            out.push(VoxelCoord::new(2 * c.x + (b >> 2 & 1), 2 * c.y + (b >> 1 & 1), 2 * c.z + (b & 1)));
        }
    }
    out.sort_unstable();
    out
}

/// Occupancy at `R, R/2, R/4, R/8` (level 0 is the finest).
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyPyramid {
    pub resolution: u32,
    pub levels: Vec<Vec<VoxelCoord>>,
}

impl OccupancyPyramid {
    pub fn build(coords: &[VoxelCoord], resolution: u32, depth: usize) -> Result<Self> {
        let mut base = coords.to_vec();
        base.sort_unstable();
        base.dedup();
        let mut levels = vec![base];
        let mut res = resolution;
        for _ in 0..depth {
            let next = downsample_occupancy(levels.last().unwrap(), 2, res)?;
            res /= 2;
            levels.push(next);
        }
        Ok(Self { resolution, levels })
    }

    pub fn coarsest(&self) -> &[VoxelCoord] {
        self.levels.last().unwrap()
    }

    pub fn level_resolution(&self, level: usize) -> u32 {
        self.resolution >> level
    }

    /// Grow every level by a Chebyshev radius so prune supervision tolerates
    /// near-surface voxels. Coarser levels are rebuilt from the dilated base
    /// so that the pyramid stays consistent.
    pub fn dilated(&self, radius: u32) -> Result<Self> {
        if radius == 0 {
            return Ok(self.clone());
        }
        let r = radius as i32;
        let mut grown = HashSet::new();
        for c in &self.levels[0] {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if let Some(n) = c.offset([dx, dy, dz], self.resolution) {
                            grown.insert(n);
                        }
                    }
                }
            }
        }
        let base: Vec<VoxelCoord> = grown.into_iter().collect();
        Self::build(&base, self.resolution, self.levels.len() - 1)
    }
}

/// 1 for predicted voxels present in the ground truth (keep), 0 otherwise.
pub fn prune_targets(pred: &[VoxelCoord], gt: &[VoxelCoord]) -> Vec<f64> {
    let set: HashSet<&VoxelCoord> = gt.iter().collect();
    pred.iter().map(|c| if set.contains(c) { 1.0 } else { 0.0 }).collect()
}

/// `log(sigmoid(s))` without overflow.
pub fn log_sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        -(-s).exp().ln_1p()
    } else {
        s - s.exp().ln_1p()
    }
}

/// Mean binary cross-entropy on logits.
pub fn prune_bce(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logits for {} labels", logits.len(), labels.len())));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&s, &y)| -(y * log_sigmoid(s) + (1.0 - y) * log_sigmoid(-s)))
        .sum();
    Ok(total / logits.len() as f64)
}

/// Inference rule: keep when `sigmoid(logit) >= 0.5`.
pub fn keep_from_logits(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&s| s >= 0.0).collect()
}

pub fn apply_prune(grid: &SparseAttributeGrid, keep: &[bool]) -> Result<SparseAttributeGrid> {
    grid.retain_mask(keep)
}
