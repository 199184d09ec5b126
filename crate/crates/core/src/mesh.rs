//! Triangle meshes with optional per-corner UVs, OBJ input/output and a few
//! procedural shapes used by tests and demos.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub positions: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub uvs: Vec<[f64; 2]>,
    /// Per-face UV indices; empty when the mesh carries no UVs.
    pub face_uvs: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(positions: Vec<[f64; 3]>, faces: Vec<[u32; 3]>) -> Self {
        Self { positions, faces, uvs: Vec::new(), face_uvs: Vec::new() }
    }

    pub fn with_uvs(mut self, uvs: Vec<[f64; 2]>, face_uvs: Vec<[u32; 3]>) -> Self {
        self.uvs = uvs;
        self.face_uvs = face_uvs;
        self
    }

    pub fn has_uvs(&self) -> bool {
        !self.face_uvs.is_empty() && self.face_uvs.len() == self.faces.len()
    }

    pub fn triangle(&self, f: usize) -> [[f64; 3]; 3] {
        let [a, b, c] = self.faces[f];
        [self.positions[a as usize], self.positions[b as usize], self.positions[c as usize]]
    }

    pub fn uv_triangle(&self, f: usize) -> Option<[[f64; 2]; 3]> {
        let [a, b, c] = *self.face_uvs.get(f)?;
        Some([self.uvs[a as usize], self.uvs[b as usize], self.uvs[c as usize]])
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }

    pub fn face_areas(&self) -> Vec<f64> {
        (0..self.faces.len()).map(|f| self.face_area(f)).collect()
    }

    pub fn centroid(&self, f: usize) -> [f64; 3] {
        let t = self.triangle(f);
        std::array::from_fn(|d| (t[0][d] + t[1][d] + t[2][d]) / 3.0)
    }

    /// Checks face indices and that every vertex lies in `[-0.5, 0.5]^3`.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len() as u32;
        if let Some(f) = self.faces.iter().position(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidInput(format!("face {f} references a missing vertex")));
        }
        if let Some(i) = self
            .positions
            .iter()
            .position(|p| p.iter().any(|v| !(-0.5..=0.5).contains(v)))
        {
            return Err(Error::InvalidInput(format!(
                "vertex {i} at {:?} lies outside the unit cube",
                self.positions[i]
            )));
        }
        Ok(())
    }

    /// Append another mesh, offsetting its indices.
    pub fn append(&mut self, other: &TriMesh) {
        let pv = self.positions.len() as u32;
        let pt = self.uvs.len() as u32;
        self.positions.extend_from_slice(&other.positions);
        self.faces.extend(other.faces.iter().map(|f| f.map(|i| i + pv)));
        self.uvs.extend_from_slice(&other.uvs);
        self.face_uvs.extend(other.face_uvs.iter().map(|f| f.map(|i| i + pt)));
    }

    /// Quad `origin + s * e1 + t * e2` for `s, t` in `[0, 1]`, split along the
    /// `(0,0)-(1,1)` diagonal, with UVs `(s, t)`.
    pub fn quad(origin: [f64; 3], e1: [f64; 3], e2: [f64; 3]) -> Self {
        let at = |s: f64, t: f64| -> [f64; 3] {
            std::array::from_fn(|d| origin[d] + s * e1[d] + t * e2[d])
        };
        let positions = vec![at(0.0, 0.0), at(1.0, 0.0), at(1.0, 1.0), at(0.0, 1.0)];
        let faces = vec![[0, 1, 2], [0, 2, 3]];
        let uvs = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        Self::new(positions, faces.clone()).with_uvs(uvs, faces)
    }

    /// Axis-aligned cube of edge `size` centered at the origin, outward
    /// winding, each face mapped to its own tile of a 3x2 UV atlas.
    pub fn cube(size: f64) -> Self {
        let h = size / 2.0;
        // (origin, e1, e2) chosen so e1 x e2 points outward
        let faces: [([f64; 3], [f64; 3], [f64; 3]); 6] = [
            ([h, -h, -h], [0.0, size, 0.0], [0.0, 0.0, size]),
            ([-h, -h, -h], [0.0, 0.0, size], [0.0, size, 0.0]),
            ([-h, h, -h], [0.0, 0.0, size], [size, 0.0, 0.0]),
            ([-h, -h, -h], [size, 0.0, 0.0], [0.0, 0.0, size]),
            ([-h, -h, h], [size, 0.0, 0.0], [0.0, size, 0.0]),
            ([-h, -h, -h], [0.0, size, 0.0], [size, 0.0, 0.0]),
        ];
        let mut mesh = TriMesh::default();
        for (i, (o, e1, e2)) in faces.iter().enumerate() {
            let mut q = TriMesh::quad(*o, *e1, *e2);
            let (tx, ty) = ((i % 3) as f64, (i / 3) as f64);
            // inset tiles by one part in 64 so neighbouring charts never touch
            let inset = 1.0 / 64.0;
            for uv in &mut q.uvs {
                uv[0] = (tx + inset + uv[0] * (1.0 - 2.0 * inset)) / 3.0;
                uv[1] = (ty + inset + uv[1] * (1.0 - 2.0 * inset)) / 2.0;
            }
            mesh.append(&q);
        }
        mesh
    }

    /// Icosphere of the given radius with outward winding and no UVs.
    pub fn icosphere(radius: f64, subdivisions: u32) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut pos: Vec<[f64; 3]> = vec![
            [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
            [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
            [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
        ];
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        let normalize = |p: [f64; 3]| {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            [p[0] / n, p[1] / n, p[2] / n]
        };
        for p in &mut pos {
            *p = normalize(*p);
        }
        for _ in 0..subdivisions {
            let mut cache = std::collections::HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut mid = |a: u32, b: u32, pos: &mut Vec<[f64; 3]>| -> u32 {
                let key = (a.min(b), a.max(b));
                *cache.entry(key).or_insert_with(|| {
                    let (pa, pb) = (pos[a as usize], pos[b as usize]);
                    pos.push(normalize([
                        (pa[0] + pb[0]) / 2.0,
                        (pa[1] + pb[1]) / 2.0,
                        (pa[2] + pb[2]) / 2.0,
                    ]));
                    pos.len() as u32 - 1
                })
            };
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut pos);
                let bc = mid(b, c, &mut pos);
                let ca = mid(c, a, &mut pos);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        for p in &mut pos {
            *p = [p[0] * radius, p[1] * radius, p[2] * radius];
        }
        Self::new(pos, faces)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for p in &self.positions {
            let _ = writeln!(s, "v {} {} {}", p[0], p[1], p[2]);
        }
        for t in &self.uvs {
            let _ = writeln!(s, "vt {} {}", t[0], t[1]);
        }
        for (i, f) in self.faces.iter().enumerate() {
            if self.has_uvs() {
                let t = self.face_uvs[i];
                let _ = writeln!(
                    s,
                    "f {}/{} {}/{} {}/{}",
                    f[0] + 1, t[0] + 1, f[1] + 1, t[1] + 1, f[2] + 1, t[2] + 1
                );
            } else {
                let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
            }
        }
        s
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::read_obj(std::io::BufReader::new(file))
    }

    /// Parse the `v` / `vt` / `f` subset of Wavefront OBJ. Polygons are fan
    /// triangulated; face order follows the file.
    pub fn read_obj<R: BufRead>(mut reader: R) -> Result<Self> {
        let opts = tobj::LoadOptions { triangulate: true, single_index: false, ..Default::default() };
        let (models, _) = tobj::load_obj_buf(&mut reader, &opts, |_| {
            Err(tobj::LoadError::GenericFailure)
        })
        .map_err(|e| Error::Obj(e.to_string()))?;
        let mut mesh = TriMesh::default();
        for m in models {
            let m = m.mesh;
            let positions: Vec<[f64; 3]> =
                m.positions.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            let faces: Vec<[u32; 3]> = m.indices.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            let mut part = TriMesh::new(positions, faces);
            if !m.texcoord_indices.is_empty() {
                if m.texcoord_indices.len() != m.indices.len() {
                    return Err(Error::Obj("faces mix entries with and without vt indices".into()));
                }
                part.uvs = m.texcoords.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
                part.face_uvs = m.texcoord_indices.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            }
            if !mesh.faces.is_empty() && mesh.has_uvs() != part.has_uvs() {
                return Err(Error::Obj("objects disagree on UV presence".into()));
            }
            mesh.append(&part);
        }
        Ok(mesh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obj_round_trip_keeps_faces_and_uvs() {
        let cube = TriMesh::cube(0.5);
        let text = cube.to_obj();
        let back = TriMesh::read_obj(text.as_bytes()).unwrap();
        assert_eq!(back.faces.len(), 12);
        assert!(back.has_uvs());
        for f in 0..12 {
            let (a, b) = (cube.triangle(f), back.triangle(f));
            for i in 0..3 {
                for d in 0..3 {
                    assert!((a[i][d] - b[i][d]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn obj_quads_are_triangulated() {
        let text = "v 0 0 0\nv 0.1 0 0\nv 0.1 0.1 0\nv 0 0.1 0\nf 1 2 3 4\n";
        let m = TriMesh::read_obj(text.as_bytes()).unwrap();
        assert_eq!(m.faces.len(), 2);
        assert!(!m.has_uvs());
    }

    #[test]
    fn cube_faces_point_outward() {
        let c = TriMesh::cube(1.0);
        for f in 0..c.faces.len() {
            let [a, b, cc] = c.triangle(f);
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let v = [cc[0] - a[0], cc[1] - a[1], cc[2] - a[2]];
            let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
            let cen = c.centroid(f);
            assert!(n[0] * cen[0] + n[1] * cen[1] + n[2] * cen[2] > 0.0);
        }
        assert!((c.face_areas().iter().sum::<f64>() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_outside_vertices() {
        let m = TriMesh::new(vec![[0.0; 3], [0.6, 0.0, 0.0], [0.0, 0.1, 0.0]], vec![[0, 1, 2]]);
        assert!(m.validate().is_err());
        assert!(TriMesh::icosphere(0.4, 1).validate().is_ok());
    }
}
