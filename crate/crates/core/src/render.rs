//! Orthographic position-map rendering and grid rendering through those maps.
//!
//! A camera named `+z` sits on the `+z` side of the unit cube and looks
//! toward `-z`; its image right axis is `+x` and its up axis `+y`. Pixel
//! rows start at the bottom of the image, matching texture conventions.

use crate::error::{Error, Result};
use crate::grid::{QueryOptions, Span, SparseAttributeGrid};
use crate::mesh::TriMesh;
use crate::uv::{bake_texture, PositionMap, TextureImage};

pub type ViewPositionMap = PositionMap;

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: V3) -> Option<V3> {
    let n = dot(a, a).sqrt();
    (n > 0.0 && n.is_finite()).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrthoCamera {
    /// Ray direction (unit length).
    pub dir: V3,
    pub right: V3,
    pub up: V3,
    /// Half side of the square image footprint in world units.
    pub half_extent: f64,
    pub width: u32,
    pub height: u32,
}

impl OrthoCamera {
    /// Camera looking along `dir` whose footprint is just large enough to
    /// contain the projection of the unit cube.
    pub fn new(dir: V3, width: u32, height: u32) -> Result<Self> {
        let dir = normalize(dir).ok_or_else(|| Error::InvalidInput("zero view direction".into()))?;
        let back = [-dir[0], -dir[1], -dir[2]];
        let hint = if dir[1].abs() > 0.999 { [0.0, 0.0, -dir[1].signum()] } else { [0.0, 1.0, 0.0] };
        let right = normalize(cross(hint, back)).expect("hint not parallel to view");
        let up = cross(back, right);
        let reach = |a: V3| 0.5 * (a[0].abs() + a[1].abs() + a[2].abs());
        let half_extent = reach(right).max(reach(up));
        Self::with_extent(dir, right, up, half_extent, width, height)
    }

    pub fn with_extent(dir: V3, right: V3, up: V3, half_extent: f64, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("camera image must have nonzero size".into()));
        }
        let reach = |a: V3| 0.5 * (a[0].abs() + a[1].abs() + a[2].abs());
        if half_extent + 1e-12 < reach(right).max(reach(up)) {
            return Err(Error::InvalidInput("camera footprint does not contain the unit cube".into()));
        }
        Ok(Self { dir, right, up, half_extent, width, height })
    }

    /// Parse `+x`, `-x`, `+y`, `-y`, `+z`, `-z` or `dx,dy,dz` (camera side).
    pub fn from_view(view: &str, width: u32, height: u32) -> Result<Self> {
        let side: V3 = match view {
            "+x" => [1.0, 0.0, 0.0],
            "-x" => [-1.0, 0.0, 0.0],
            "+y" => [0.0, 1.0, 0.0],
            "-y" => [0.0, -1.0, 0.0],
            "+z" => [0.0, 0.0, 1.0],
            "-z" => [0.0, 0.0, -1.0],
            other => {
                let parts: Vec<f64> = other
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::InvalidInput(format!("unknown view `{other}`")))?;
                if parts.len() != 3 {
                    return Err(Error::InvalidInput(format!("unknown view `{other}`")));
                }
                [parts[0], parts[1], parts[2]]
            }
        };
        Self::new([-side[0], -side[1], -side[2]], width, height)
    }

    /// The six axis-aligned views, in the order +x, -x, +y, -y, +z, -z.
    pub fn canonical_views(width: u32, height: u32) -> Vec<Self> {
        ["+x", "-x", "+y", "-y", "+z", "-z"]
            .iter()
            .map(|v| Self::from_view(v, width, height).expect("static view"))
            .collect()
    }

    /// Ray origin for pixel `(i, j)`, placed outside the unit cube.
    pub fn ray_origin(&self, i: u32, j: u32) -> V3 {
        let a = ((i as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * self.half_extent;
        let b = ((j as f64 + 0.5) / self.height as f64 * 2.0 - 1.0) * self.half_extent;
        std::array::from_fn(|d| a * self.right[d] + b * self.up[d] - 2.0 * self.dir[d])
    }
}

/// Möller–Trumbore intersection with inclusive edges; returns `(t, u, v)`.
pub fn ray_triangle(origin: V3, dir: V3, tri: &[V3; 3]) -> Option<(f64, f64, f64)> {
    let e1 = sub(tri[1], tri[0]);
    let e2 = sub(tri[2], tri[0]);
    let pvec = cross(dir, e2);
    let det = dot(e1, pvec);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = sub(origin, tri[0]);
    let u = dot(tvec, pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = cross(tvec, e1);
    let v = dot(dir, qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = dot(e2, qvec) * inv;
    (t > 0.0).then_some((t, u, v))
}

/// Nearest hit per pixel; equal depths keep the smaller triangle index.
pub fn render_position_map(mesh: &TriMesh, cam: &OrthoCamera) -> Result<ViewPositionMap> {
    Ok(render_position_map_with_faces(mesh, cam)?.0)
}

/// As [`render_position_map`], also returning the hit face per pixel
/// (`u32::MAX` on misses).
pub fn render_position_map_with_faces(mesh: &TriMesh, cam: &OrthoCamera) -> Result<(ViewPositionMap, Vec<u32>)> {
    if mesh.faces.is_empty() {
        return Err(Error::EmptyInput("mesh has no faces"));
    }
    mesh.validate()?;
    let tris: Vec<[V3; 3]> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
    let (w, h) = (cam.width, cam.height);
    let rows = crate::par::map_range(h as usize, |j| {
        (0..w)
            .map(|i| {
                let o = cam.ray_origin(i, j as u32);
                let mut best: Option<(f64, usize, f64, f64)> = None;
                for (f, tri) in tris.iter().enumerate() {
                    if let Some((t, u, v)) = ray_triangle(o, cam.dir, tri) {
                        if best.map_or(true, |b| t < b.0) {
                            best = Some((t, f, u, v));
                        }
                    }
                }
                best.map(|(_, f, u, v)| {
                    let tri = &tris[f];
                    let e1 = sub(tri[1], tri[0]);
                    let e2 = sub(tri[2], tri[0]);
                    let p: V3 = std::array::from_fn(|d| tri[0][d] + u * e1[d] + v * e2[d]);
                    (f as u32, p)
                })
            })
            .collect::<Vec<_>>()
    });
    let mut map = PositionMap::empty(w, h);
    let mut faces = vec![u32::MAX; map.len()];
    for (j, row) in rows.into_iter().enumerate() {
        for (i, hit) in row.into_iter().enumerate() {
            if let Some((f, p)) = hit {
                let idx = j * w as usize + i;
                map.set(idx, p);
                faces[idx] = f;
            }
        }
    }
    Ok((map, faces))
}

/// Render grid attributes seen through a view position map. Shares the
/// texture baking path.
pub fn render_view(
    grid: &SparseAttributeGrid,
    vpm: &ViewPositionMap,
    span: Span,
    opts: &QueryOptions,
) -> Result<TextureImage> {
    bake_texture(grid, vpm, span, opts)
}

/// Linear map from grid entries to valid pixels: pixel value =
/// `sum(weight * entry value)` with absent corners contributing zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelStencil {
    /// Position-map index of each output row.
    pub pixels: Vec<usize>,
    /// `(row, grid entry, weight)` triplets, rows ascending.
    pub taps: Vec<(u32, u32, f64)>,
    pub entries: usize,
}

impl PixelStencil {
    pub fn build(grid: &SparseAttributeGrid, map: &PositionMap) -> Self {
        let mut pixels = Vec::new();
        let mut taps = Vec::new();
        for idx in (0..map.len()).filter(|&i| map.mask[i]) {
            let row = pixels.len() as u32;
            pixels.push(idx);
            let s = grid.stencil(map.positions[idx]);
            for b in 0..8 {
                if let Some(e) = s.entries[b] {
                    if s.weights[b] != 0.0 {
                        taps.push((row, e as u32, s.weights[b]));
                    }
                }
            }
        }
        Self { pixels, taps, entries: grid.len() }
    }

    /// Apply to a row-major `entries x c` value array, giving `pixels x c`.
    pub fn apply(&self, values: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.pixels.len() * c];
        for &(r, e, w) in &self.taps {
            let (r, e) = (r as usize, e as usize);
            for k in 0..c {
                out[r * c + k] += w * values[e * c + k];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ChannelLayout, VoxelCoord};

    #[test]
    fn quad_footprint_and_depth() {
        let mesh = TriMesh::quad([-0.25, -0.25, 0.1], [0.5, 0.0, 0.0], [0.0, 0.5, 0.0]);
        let cam = OrthoCamera::from_view("+z", 8, 8).unwrap();
        assert_eq!(cam.half_extent, 0.5);
        let map = render_position_map(&mesh, &cam).unwrap();
        for j in 0..8 {
            for i in 0..8 {
                let idx = map.index(i, j);
                // analytic footprint: pixel centers (2k+1)/16 - 0.5 inside (-0.25, 0.25)
                let inside = (2..6).contains(&i) && (2..6).contains(&j);
                assert_eq!(map.mask[idx], inside, "pixel {i},{j}");
                if inside {
                    assert_eq!(map.positions[idx][2], 0.1);
                    let x = (2 * i + 1) as f64 / 16.0 - 0.5;
                    assert!((map.positions[idx][0] - x).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn nearer_quad_wins() {
        let mut mesh = TriMesh::quad([-0.25, -0.25, -0.2], [0.5, 0.0, 0.0], [0.0, 0.5, 0.0]);
        mesh.append(&TriMesh::quad([-0.25, -0.25, 0.2], [0.5, 0.0, 0.0], [0.0, 0.5, 0.0]));
        let cam = OrthoCamera::from_view("+z", 8, 8).unwrap();
        let (map, faces) = render_position_map_with_faces(&mesh, &cam).unwrap();
        for idx in 0..map.len() {
            if map.mask[idx] {
                assert_eq!(map.positions[idx][2], 0.2);
                assert!(faces[idx] >= 2);
            }
        }
        let back = OrthoCamera::from_view("-z", 8, 8).unwrap();
        let map = render_position_map(&mesh, &back).unwrap();
        assert!(map.positions.iter().zip(&map.mask).filter(|(_, m)| **m).all(|(p, _)| p[2] == -0.2));
    }

    #[test]
    fn miss_is_invalid_and_empty_mesh_errors() {
        let mesh = TriMesh::quad([0.3, 0.3, 0.0], [0.1, 0.0, 0.0], [0.0, 0.1, 0.0]);
        let cam = OrthoCamera::from_view("+z", 4, 4).unwrap();
        let map = render_position_map(&mesh, &cam).unwrap();
        assert!(!map.mask[0]);
        assert!(render_position_map(&TriMesh::default(), &cam).is_err());
    }

    #[test]
    fn camera_bases_are_orthonormal() {
        for cam in OrthoCamera::canonical_views(4, 4)
            .into_iter()
            .chain([OrthoCamera::new([1.0, 2.0, -0.5], 4, 4).unwrap()])
        {
            assert!((dot(cam.right, cam.up)).abs() < 1e-12);
            assert!((dot(cam.right, cam.dir)).abs() < 1e-12);
            assert!((dot(cam.up, cam.up) - 1.0).abs() < 1e-12);
            // footprint covers every cube corner
            for b in 0..8 {
                let c = [(b >> 2 & 1) as f64 - 0.5, (b >> 1 & 1) as f64 - 0.5, (b & 1) as f64 - 0.5];
                assert!(dot(c, cam.right).abs() <= cam.half_extent + 1e-12);
                assert!(dot(c, cam.up).abs() <= cam.half_extent + 1e-12);
            }
        }
        let plus_z = OrthoCamera::from_view("+z", 4, 4).unwrap();
        assert_eq!((plus_z.right, plus_z.up, plus_z.dir), ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]));
        assert!(OrthoCamera::with_extent([0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], 0.4, 4, 4).is_err());
    }

    #[test]
    fn render_view_constant_grid() {
        let r = 8;
        let entries = (0..r).flat_map(|x| {
            (0..r).flat_map(move |y| (0..r).map(move |z| (VoxelCoord::new(x, y, z), vec![0.3, 0.4, 0.5])))
        });
        let grid = SparseAttributeGrid::from_entries(r, ChannelLayout::color_only(), entries).unwrap();
        let cam = OrthoCamera::from_view("+x", 16, 16).unwrap();
        let vpm = render_position_map(&TriMesh::icosphere(0.3, 1), &cam).unwrap();
        let img = render_view(&grid, &vpm, Span::Color, &QueryOptions::default()).unwrap();
        assert!(img.valid_count() > 0);
        for idx in 0..vpm.len() {
            if vpm.mask[idx] {
                for (v, c) in img.texel(idx).iter().zip([0.3, 0.4, 0.5]) {
                    assert!((v - c).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stencil_matches_render_view() {
        let mesh = TriMesh::icosphere(0.35, 1);
        let coords = crate::grid::voxelize_surface(&mesh, 16).unwrap();
        let entries = coords.iter().map(|c| {
            let p = c.center(16);
            (*c, vec![p[0] + 0.5, p[1] + 0.5, p[2] + 0.5])
        });
        let grid = SparseAttributeGrid::from_entries(16, ChannelLayout::color_only(), entries).unwrap();
        let vpm = render_position_map(&mesh, &OrthoCamera::from_view("-y", 24, 24).unwrap()).unwrap();
        let img = render_view(&grid, &vpm, Span::Color, &QueryOptions::default()).unwrap();
        let st = PixelStencil::build(&grid, &vpm);
        let out = st.apply(grid.values(), 3);
        for (row, &idx) in st.pixels.iter().enumerate() {
            for k in 0..3 {
                assert!((out[row * 3 + k] - img.texel(idx)[k]).abs() < 1e-14);
            }
        }
    }
}
