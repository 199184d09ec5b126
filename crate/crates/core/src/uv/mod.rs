//! UV position maps and grid-to-texture baking.
//!
//! Texel `(i, j)` has its center at `((i + 0.5) / W, (j + 0.5) / H)` in UV
//! space, with row `j = 0` at `v = 0` (the bottom of the texture). Buffers are
//! stored row-major starting from that bottom row.

mod io;

pub use io::{read_png, read_posmap, texture_to_rgba, write_png, write_posmap, POSMAP_MAGIC};

use crate::error::{Error, Result};
use crate::grid::{QueryOptions, Span, SparseAttributeGrid};
use crate::mesh::TriMesh;

/// Per-texel surface point plus validity. Invalid texels hold `[0, 0, 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionMap {
    pub width: u32,
    pub height: u32,
    pub positions: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

pub type UVPositionMap = PositionMap;

impl PositionMap {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = (width * height) as usize;
        Self { width, height, positions: vec![[0.0; 3]; n], mask: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn index(&self, i: u32, j: u32) -> usize {
        (j * self.width + i) as usize
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn set(&mut self, idx: usize, p: [f64; 3]) {
        self.positions[idx] = p.map(|v| v.clamp(-0.5, 0.5));
        self.mask[idx] = true;
    }
}

/// Texture with `channels` values per texel, a validity mask and the
/// trilinear missing mass observed while baking each texel.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureImage {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
    pub missing_mass: Vec<f64>,
}

impl TextureImage {
    pub fn new(width: u32, height: u32, channels: usize) -> Self {
        let n = (width * height) as usize;
        Self {
            width,
            height,
            channels,
            data: vec![0.0; n * channels],
            mask: vec![false; n],
            missing_mass: vec![0.0; n],
        }
    }

    pub fn texel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn texel_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Counters gathered while rasterizing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BakeStats {
    pub skipped_degenerate: usize,
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Top-left rule for counter-clockwise triangles in a y-up frame.
fn owns_edge(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy < 0.0 || (dy == 0.0 && dx < 0.0)
}

/// Sample-point coverage of a 2D triangle, calling `emit(index, bary)` for
/// every texel center it owns. `tri` is in texel units.
pub(crate) fn raster_triangle(
    tri: [[f64; 2]; 3],
    width: u32,
    height: u32,
    mut emit: impl FnMut(u32, u32, [f64; 3]),
) -> bool {
    let mut t = tri;
    let mut order = [0usize, 1, 2];
    let mut area = edge(t[0], t[1], t[2]);
    if area == 0.0 || !area.is_finite() {
        return false;
    }
    if area < 0.0 {
        t.swap(1, 2);
        order.swap(1, 2);
        area = -area;
    }
    let min_x = t.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_x = t.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = t.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_y = t.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let i0 = ((min_x - 0.5).ceil().max(0.0)) as u32;
    let i1 = ((max_x - 0.5).floor().min(width as f64 - 1.0)).max(-1.0) as i64;
    let j0 = ((min_y - 0.5).ceil().max(0.0)) as u32;
    let j1 = ((max_y - 0.5).floor().min(height as f64 - 1.0)).max(-1.0) as i64;
    let owns = [owns_edge(t[1], t[2]), owns_edge(t[2], t[0]), owns_edge(t[0], t[1])];
    for j in j0 as i64..=j1 {
        for i in i0 as i64..=i1 {
            let p = [i as f64 + 0.5, j as f64 + 0.5];
            let w = [edge(t[1], t[2], p), edge(t[2], t[0], p), edge(t[0], t[1], p)];
            let inside = (0..3).all(|k| w[k] > 0.0 || (w[k] == 0.0 && owns[k]));
            if inside {
                let mut bary = [0.0; 3];
                for k in 0..3 {
                    bary[order[k]] = w[k] / area;
                }
                emit(i as u32, j as u32, bary);
            }
        }
    }
    true
}

/// Rasterize every triangle in UV space and store the interpolated surface
/// position at covered texel centers. Later triangles overwrite earlier ones.
pub fn bake_position_map(mesh: &TriMesh, width: u32, height: u32) -> Result<(UVPositionMap, BakeStats)> {
    let (map, _, stats) = bake_position_map_with_faces(mesh, width, height)?;
    Ok((map, stats))
}

/// As [`bake_position_map`], also returning the owning face of each texel
/// (`u32::MAX` for uncovered texels).
pub fn bake_position_map_with_faces(
    mesh: &TriMesh,
    width: u32,
    height: u32,
) -> Result<(UVPositionMap, Vec<u32>, BakeStats)> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("position map must have nonzero size".into()));
    }
    if !mesh.has_uvs() {
        return Err(Error::InvalidInput("mesh has no per-face UVs".into()));
    }
    mesh.validate()?;
    if let Some(bad) = mesh.uvs.iter().find(|t| t.iter().any(|v| !(0.0..=1.0).contains(v))) {
        return Err(Error::InvalidInput(format!("UV {bad:?} outside [0, 1]^2")));
    }
    let mut map = PositionMap::empty(width, height);
    let mut faces = vec![u32::MAX; map.len()];
    let mut stats = BakeStats::default();
    for f in 0..mesh.faces.len() {
        let uv = mesh.uv_triangle(f).expect("checked has_uvs");
        let px = uv.map(|t| [t[0] * width as f64, t[1] * height as f64]);
        let pos = mesh.triangle(f);
        let drawn = raster_triangle(px, width, height, |i, j, b| {
            let p = std::array::from_fn(|d| b[0] * pos[0][d] + b[1] * pos[1][d] + b[2] * pos[2][d]);
            let idx = (j * width + i) as usize;
            map.set(idx, p);
            faces[idx] = f as u32;
        });
        if !drawn {
            stats.skipped_degenerate += 1;
        }
    }
    if stats.skipped_degenerate > 0 {
        log::warn!("skipped {} zero-area UV triangles", stats.skipped_degenerate);
    }
    Ok((map, faces, stats))
}

/// Query the grid at every valid texel's position, keeping only `span`.
pub fn bake_texture(
    grid: &SparseAttributeGrid,
    posmap: &PositionMap,
    span: Span,
    opts: &QueryOptions,
) -> Result<TextureImage> {
    let range = grid.layout().range(span)?;
    let mut img = TextureImage::new(posmap.width, posmap.height, range.len());
    let valid: Vec<usize> = (0..posmap.len()).filter(|&i| posmap.mask[i]).collect();
    let results = crate::par::map(&valid, |&idx| {
        let stencil = grid.stencil(posmap.positions[idx]);
        grid.resolve(&stencil, opts)
    });
    for (idx, res) in valid.into_iter().zip(results) {
        img.texel_mut(idx).copy_from_slice(&res.values[range.clone()]);
        img.mask[idx] = true;
        img.missing_mass[idx] = res.missing_mass;
    }
    Ok(img)
}

/// Grow valid regions outward: each pass fills invalid texels that touch a
/// valid 8-neighbour with the mean of those neighbours.
pub fn dilate_texture(img: &TextureImage, iterations: usize) -> TextureImage {
    let mut cur = img.clone();
    let (w, h, c) = (img.width as i64, img.height as i64, img.channels);
    for _ in 0..iterations {
        let mut next = cur.clone();
        let mut changed = false;
        for j in 0..h {
            for i in 0..w {
                let idx = (j * w + i) as usize;
                if cur.mask[idx] {
                    continue;
                }
                let mut sum = vec![0.0; c];
                let mut count = 0usize;
                for dj in -1..=1 {
                    for di in -1..=1 {
                        let (ni, nj) = (i + di, j + dj);
                        if (di, dj) == (0, 0) || ni < 0 || nj < 0 || ni >= w || nj >= h {
                            continue;
                        }
                        let n = (nj * w + ni) as usize;
                        if cur.mask[n] {
                            count += 1;
                            for (s, v) in sum.iter_mut().zip(cur.texel(n)) {
                                *s += v;
                            }
                        }
                    }
                }
                if count > 0 {
                    let t = next.texel_mut(idx);
                    for (o, s) in t.iter_mut().zip(&sum) {
                        *o = s / count as f64;
                    }
                    next.mask[idx] = true;
                    changed = true;
                }
            }
        }
        cur = next;
        if !changed {
            break;
        }
    }
    cur
}
