//! Splat a front-view image into a sparse color grid through its view
//! position map. Each touched voxel stores the mean color of its pixels.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{ChannelLayout, SparseAttributeGrid, VoxelCoord};
use crate::render::ViewPositionMap;
use crate::uv::TextureImage;

pub fn project_image_to_grid(img: &TextureImage, vpm: &ViewPositionMap, resolution: u32) -> Result<SparseAttributeGrid> {
    if img.width != vpm.width || img.height != vpm.height {
        return Err(Error::Shape(format!(
            "image is {}x{} but position map is {}x{}",
            img.width, img.height, vpm.width, vpm.height
        )));
    }
    if img.channels < 3 {
        return Err(Error::Layout(format!("image has {} channels, need 3 color channels", img.channels)));
    }
    // Buckets keyed by voxel; sums are accumulated in pixel-index order so the
    // result does not depend on how pixels are visited.
    let mut buckets: BTreeMap<VoxelCoord, ([f64; 3], usize)> = BTreeMap::new();
    for idx in 0..vpm.len() {
        if !(vpm.mask[idx] && img.mask[idx]) {
            continue;
        }
        let c = VoxelCoord::containing(vpm.positions[idx], resolution);
        let t = img.texel(idx);
        let slot = buckets.entry(c).or_insert(([0.0; 3], 0));
        for k in 0..3 {
            slot.0[k] += t[k];
        }
        slot.1 += 1;
    }
    let entries = buckets.into_iter().map(|(c, (sum, n))| {
        let mean = sum.map(|s| (s / n as f64).clamp(0.0, 1.0));
        (c, mean.to_vec())
    });
    SparseAttributeGrid::from_entries(resolution, ChannelLayout::color_only(), entries)
}

/// Pixel count per voxel of the projection, in grid entry order.
pub fn projection_counts(vpm: &ViewPositionMap, img: &TextureImage, resolution: u32) -> BTreeMap<VoxelCoord, usize> {
    let mut counts = BTreeMap::new();
    for idx in 0..vpm.len() {
        if vpm.mask[idx] && img.mask[idx] {
            *counts.entry(VoxelCoord::containing(vpm.positions[idx], resolution)).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uv::PositionMap;

    fn image_and_map(points: &[([f64; 3], [f64; 3])]) -> (TextureImage, PositionMap) {
        let w = points.len() as u32 + 1;
        let mut img = TextureImage::new(w, 1, 3);
        let mut map = PositionMap::empty(w, 1);
        for (i, (p, c)) in points.iter().enumerate() {
            map.set(i, *p);
            img.texel_mut(i).copy_from_slice(c);
            img.mask[i] = true;
        }
        (img, map)
    }

    #[test]
    fn one_pixel_one_voxel() {
        let (img, map) = image_and_map(&[([0.1, 0.2, 0.3], [0.2, 0.4, 0.6])]);
        let g = project_image_to_grid(&img, &map, 8).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.get(VoxelCoord::containing([0.1, 0.2, 0.3], 8)).unwrap(), &[0.2, 0.4, 0.6]);
    }

    #[test]
    fn colliding_pixels_average() {
        let (img, map) = image_and_map(&[
            ([0.1, 0.2, 0.3], [0.2, 0.4, 0.6]),
            ([0.11, 0.21, 0.31], [0.4, 0.0, 1.0]),
        ]);
        let g = project_image_to_grid(&img, &map, 8).unwrap();
        assert_eq!(g.len(), 1);
        let v = g.value(0);
        for (a, b) in v.iter().zip([0.3, 0.2, 0.8]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_errors() {
        let img = TextureImage::new(2, 2, 3);
        let map = PositionMap::empty(3, 2);
        assert!(project_image_to_grid(&img, &map, 8).is_err());
    }
}
