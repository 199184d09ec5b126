//! Procedural test assets: a mesh plus a colored surface grid.

use std::f64::consts::TAU;

use crate::error::Result;
use crate::grid::{voxelize_surface, ChannelLayout, SparseAttributeGrid};
use crate::mesh::TriMesh;

#[derive(Clone, Debug)]
pub struct Asset {
    pub mesh: TriMesh,
    pub grid: SparseAttributeGrid,
}

/// Smooth color field; `variant` shifts the phase and axis assignment so
/// different variants are easy to tell apart.
pub fn color_field(p: [f64; 3], variant: u32) -> [f64; 3] {
    let phase = variant as f64 * 0.37;
    std::array::from_fn(|c| {
        let axis = (c + variant as usize) % 3;
        0.5 + 0.35 * (TAU * (1.5 * p[axis] + phase + c as f64 * 0.21)).sin()
    })
}

/// Color grid on the voxelized surface of `mesh`.
pub fn colored_surface(mesh: &TriMesh, resolution: u32, variant: u32) -> Result<SparseAttributeGrid> {
    let coords = voxelize_surface(mesh, resolution)?;
    let entries = coords.into_iter().map(|c| (c, color_field(c.center(resolution), variant).to_vec()));
    SparseAttributeGrid::from_entries(resolution, ChannelLayout::color_only(), entries)
}

/// Icosphere asset. At `R = 32`, radius 0.17 gives roughly 500 surface voxels.
pub fn sphere_asset(resolution: u32, radius: f64, variant: u32) -> Result<Asset> {
    let mesh = TriMesh::icosphere(radius, 3);
    let grid = colored_surface(&mesh, resolution, variant)?;
    Ok(Asset { mesh, grid })
}

/// Cube asset with a UV atlas, usable for texture baking.
pub fn cube_asset(resolution: u32, size: f64, variant: u32) -> Result<Asset> {
    let mesh = TriMesh::cube(size);
    let grid = colored_surface(&mesh, resolution, variant)?;
    Ok(Asset { mesh, grid })
}
