//! Surface voxelization by triangle/cell overlap.
//!
//! A cell is occupied when its intersection with some triangle has positive
//! area: the triangle either passes through the open cell interior or lies
//! in one of the cell's face planes with a positive-area overlap. Contacts
//! along an edge or at a point do not count. Degenerate (zero-area)
//! triangles occupy the cells containing their vertices.

use super::VoxelCoord;
use crate::error::{Error, Result};
use crate::mesh::TriMesh;

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

/// Positive-area overlap between triangle `tri` and the axis-aligned box with
/// center `center` and half extent `half`.
pub fn triangle_overlaps_cell(tri: &[V3; 3], center: V3, half: f64) -> bool {
    let v = [sub(tri[0], center), sub(tri[1], center), sub(tri[2], center)];
    let e = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];
    let normal = cross(e[0], e[1]);
    if normal == [0.0; 3] {
        return false;
    }

    let separated = |axis: V3| -> bool {
        let r = half * (axis[0].abs() + axis[1].abs() + axis[2].abs());
        if r == 0.0 {
            return false;
        }
        let p = [dot(v[0], axis), dot(v[1], axis), dot(v[2], axis)];
        let (lo, hi) = (p[0].min(p[1]).min(p[2]), p[0].max(p[1]).max(p[2]));
        lo >= r || hi <= -r
    };

    let mut interior = true;
    for d in 0..3 {
        let mut axis = [0.0; 3];
        axis[d] = 1.0;
        if separated(axis) {
            interior = false;
            break;
        }
    }
    if interior {
        'outer: for ed in &e {
            for d in 0..3 {
                let mut unit = [0.0; 3];
                unit[d] = 1.0;
                if separated(cross(unit, *ed)) {
                    interior = false;
                    break 'outer;
                }
            }
        }
    }
    if interior && !separated(normal) {
        return true;
    }

    // Triangle lying in one of the cell's face planes.
    let axis_aligned = (0..3).find(|&d| normal[(d + 1) % 3] == 0.0 && normal[(d + 2) % 3] == 0.0);
    let Some(d) = axis_aligned else {
        return false;
    };
    let plane = v[0][d];
    if plane != half && plane != -half {
        return false;
    }
    let (a, b) = ((d + 1) % 3, (d + 2) % 3);
    let pts = [[v[0][a], v[0][b]], [v[1][a], v[1][b]], [v[2][a], v[2][b]]];
    let sep2 = |axis: [f64; 2]| -> bool {
        let r = half * (axis[0].abs() + axis[1].abs());
        if r == 0.0 {
            return false;
        }
        let p: Vec<f64> = pts.iter().map(|q| q[0] * axis[0] + q[1] * axis[1]).collect();
        let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lo >= r || hi <= -r
    };
    if sep2([1.0, 0.0]) || sep2([0.0, 1.0]) {
        return false;
    }
    for i in 0..3 {
        let ed = [pts[(i + 1) % 3][0] - pts[i][0], pts[(i + 1) % 3][1] - pts[i][1]];
        if sep2([-ed[1], ed[0]]) {
            return false;
        }
    }
    true
}

/// All cells at resolution `resolution` overlapping the mesh surface, sorted.
pub fn voxelize_surface(mesh: &TriMesh, resolution: u32) -> Result<Vec<VoxelCoord>> {
    if mesh.faces.is_empty() {
        return Err(Error::EmptyInput("mesh has no faces"));
    }
    let r = resolution as f64;
    let half = 0.5 / r;
    let max_idx = resolution as i64 - 1;
    let cell_of = |v: f64| ((v + 0.5) * r).floor() as i64;

    let mut out = Vec::new();
    for f in 0..mesh.faces.len() {
        let tri = mesh.triangle(f);
        let n = cross(sub(tri[1], tri[0]), sub(tri[2], tri[0]));
        if n == [0.0; 3] {
            for p in tri {
                out.push(VoxelCoord::containing(p, resolution));
            }
            continue;
        }
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for d in 0..3 {
            let mn = tri[0][d].min(tri[1][d]).min(tri[2][d]);
            let mx = tri[0][d].max(tri[1][d]).max(tri[2][d]);
            lo[d] = (cell_of(mn) - 1).clamp(0, max_idx);
            hi[d] = (cell_of(mx) + 1).clamp(0, max_idx);
        }
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let c = VoxelCoord::new(x as u32, y as u32, z as u32);
                    if triangle_overlaps_cell(&tri, c.center(resolution), half) {
                        out.push(c);
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::TriMesh;

    #[test]
    fn quad_on_cell_face_hits_both_sides() {
        // R = 4, cell size 0.25; plane x = 0 separates cells ix = 1 and ix = 2.
        let y0 = 0.0;
        let z0 = 0.25;
        let mesh = TriMesh::quad([0.0, y0, z0], [0.0, 0.25, 0.0], [0.0, 0.0, 0.25]);
        let cells = voxelize_surface(&mesh, 4).unwrap();
        assert_eq!(cells, vec![VoxelCoord::new(1, 2, 3), VoxelCoord::new(2, 2, 3)]);
    }

    #[test]
    fn degenerate_triangle_uses_vertex_cells() {
        let mesh = TriMesh::new(
            vec![[-0.4, -0.4, -0.4], [0.1, 0.1, 0.1], [0.1, 0.1, 0.1]],
            vec![[0, 1, 2]],
        );
        let cells = voxelize_surface(&mesh, 4).unwrap();
        assert_eq!(cells, vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(2, 2, 2)]);
    }

    #[test]
    fn unit_cube_surface_gives_boundary_shell() {
        let mesh = TriMesh::cube(1.0);
        let cells = voxelize_surface(&mesh, 4).unwrap();
        assert_eq!(cells.len(), 56);
        for c in &cells {
            let a = c.to_array();
            assert!(a.iter().any(|&v| v == 0 || v == 3));
        }
    }

    #[test]
    fn empty_mesh_is_an_error() {
        let mesh = TriMesh::new(vec![], vec![]);
        assert!(matches!(voxelize_surface(&mesh, 4), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn edge_contact_does_not_count() {
        // triangle in the interior plane z = 0 of cell column, touching the
        // neighbouring cell only along x = 0
        let tri = [[-0.2, 0.05, 0.0], [0.0, 0.05, 0.0], [0.0, 0.2, 0.0]];
        // cell with x in [0, 0.25], y in [0, 0.25], z in [-0.125, 0.125]
        assert!(!triangle_overlaps_cell(&tri, [0.125, 0.125, 0.0], 0.125));
        assert!(triangle_overlaps_cell(&tri, [-0.125, 0.125, 0.0], 0.125));
    }

    #[test]
    fn voxelization_is_deterministic() {
        let mesh = TriMesh::icosphere(0.3, 2);
        assert_eq!(voxelize_surface(&mesh, 16).unwrap(), voxelize_surface(&mesh, 16).unwrap());
    }
}
