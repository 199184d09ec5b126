//! Part segmentation from generated label channels: per-face label
//! sampling, single-linkage clustering in label space, region merging for
//! 2D masks, and Hungarian-matched class-agnostic mIoU.

mod hungarian;
mod io;
mod merge;

use std::collections::HashMap;

use petgraph::unionfind::UnionFind;
use rand::Rng;

pub use hungarian::min_cost_assignment;
pub use io::{read_mask_set, read_parts, write_label_png, write_mask_set, write_parts, MaskSidecar, SidecarView};
pub use merge::{merge_regions, merge_view, ColorHistogram, RegionFeatures, RegionMaskSet, RegionView, HIST_BINS};

use crate::error::{Error, Result};
use crate::grid::{QueryOptions, QueryPoint, Span, SparseAttributeGrid};
use crate::mesh::TriMesh;
use crate::uv::{bake_position_map_with_faces, TextureImage};

/// Per-face part ids plus the label-space center of every part.
#[derive(Clone, Debug, PartialEq)]
pub struct PartSegmentation {
    pub face_parts: Vec<u32>,
    /// Member-mean label per part; empty when read from an id list.
    pub centers: Vec<[f64; 3]>,
    pub parts: usize,
}

impl PartSegmentation {
    /// Relabel arbitrary ids to `0..P` in order of first appearance.
    pub fn from_face_ids(ids: &[u32]) -> Self {
        let mut map = HashMap::new();
        let face_parts = ids
            .iter()
            .map(|id| {
                let next = map.len() as u32;
                *map.entry(*id).or_insert(next)
            })
            .collect();
        Self { face_parts, centers: Vec::new(), parts: map.len() }
    }

    pub fn faces(&self) -> usize {
        self.face_parts.len()
    }
}

/// Raw per-face labels sampled from the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceLabels {
    pub labels: Vec<[f64; 3]>,
    /// Centroid and the three edge midpoints; `None` where the grid has no
    /// support.
    pub samples: Vec<[Option<[f64; 3]>; 4]>,
    /// Faces labeled by the nearest-voxel fallback.
    pub fallback: Vec<bool>,
}

fn to3(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Sample the semantic span at each face's centroid and edge midpoints
/// (renormalized over present corners). The raw label is the centroid
/// sample, else the mean of supported midpoints; faces with no support and
/// zero-area faces take the value of the voxel nearest their centroid and
/// are flagged.
pub fn assign_labels(grid: &SparseAttributeGrid, mesh: &TriMesh) -> Result<FaceLabels> {
    let span = grid.layout().range(Span::Semantic)?;
    if span.len() != 3 {
        return Err(Error::Layout(format!("semantic span has {} channels, need 3", span.len())));
    }
    if grid.is_empty() {
        return Err(Error::EmptyInput("label grid has no voxels"));
    }
    mesh.validate()?;
    let opts = QueryOptions { fill: None, renormalize: true };
    let res = grid.resolution();
    // Support means at least one stored corner; the summed missing mass
    // can round just below 1 when every corner is absent.
    let sample = |p: [f64; 3]| -> Option<[f64; 3]> {
        let q = QueryPoint::new(p).ok()?;
        let st = grid.stencil(q.coords());
        st.entries.iter().any(Option::is_some).then(|| to3(&grid.resolve(&st, &opts).values[span.clone()]))
    };
    let nearest = |p: [f64; 3]| -> [f64; 3] {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in grid.coords().iter().enumerate() {
            let d = dist2(c.center(res), p);
            if d < best.0 {
                best = (d, i);
            }
        }
        to3(&grid.value(best.1)[span.clone()])
    };
    let per_face = crate::par::map_range(mesh.faces.len(), |f| {
        let tri = mesh.triangle(f);
        let mid = |a: usize, b: usize| std::array::from_fn(|d| (tri[a][d] + tri[b][d]) / 2.0);
        let centroid = mesh.centroid(f);
        let points = [centroid, mid(0, 1), mid(1, 2), mid(2, 0)];
        let samples = points.map(sample);
        if mesh.face_area(f) == 0.0 {
            return (nearest(centroid), samples, true);
        }
        if let Some(l) = samples[0] {
            return (l, samples, false);
        }
        let found: Vec<[f64; 3]> = samples[1..].iter().flatten().copied().collect();
        if found.is_empty() {
            return (nearest(centroid), samples, true);
        }
        let n = found.len() as f64;
        (std::array::from_fn(|d| found.iter().map(|l| l[d]).sum::<f64>() / n), samples, false)
    });
    let mut out = FaceLabels { labels: Vec::new(), samples: Vec::new(), fallback: Vec::new() };
    for (l, s, fb) in per_face {
        out.labels.push(l);
        out.samples.push(s);
        out.fallback.push(fb);
    }
    let flagged = out.fallback.iter().filter(|f| **f).count();
    if flagged > 0 {
        log::warn!("{flagged} faces outside the label grid support used the nearest-voxel fallback");
    }
    Ok(out)
}

/// Number each union-find root `0..` in order of its first member.
fn number_components(uf: &UnionFind<usize>, n: usize) -> Vec<u32> {
    let mut ids = HashMap::new();
    (0..n)
        .map(|i| {
            let next = ids.len() as u32;
            *ids.entry(uf.find(i)).or_insert(next)
        })
        .collect()
}

fn with_centers(face_parts: Vec<u32>, labels: &[[f64; 3]]) -> PartSegmentation {
    let parts = face_parts.iter().map(|p| *p as usize + 1).max().unwrap_or(0);
    let mut sums = vec![[0.0; 3]; parts];
    let mut counts = vec![0usize; parts];
    for (&p, l) in face_parts.iter().zip(labels) {
        for d in 0..3 {
            sums[p as usize][d] += l[d];
        }
        counts[p as usize] += 1;
    }
    let centers = sums.iter().zip(&counts).map(|(s, &n)| s.map(|v| v / n as f64)).collect();
    PartSegmentation { face_parts, centers, parts }
}

/// Single-linkage agglomeration: labels within Euclidean distance `eps`
/// (inclusive) end up in the same part. Parts are numbered by their first
/// face; centers are member means.
pub fn cluster_labels(labels: &[[f64; 3]], eps: f64) -> Result<PartSegmentation> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!("cluster distance must be positive, got {eps}")));
    }
    if let Some(i) = labels.iter().position(|l| l.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput(format!("face {i} has a non-finite label")));
    }
    let n = labels.len();
    let cell = |l: &[f64; 3]| l.map(|v| (v / eps).floor() as i64);
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, l) in labels.iter().enumerate() {
        buckets.entry(cell(l)).or_default().push(i);
    }
    let mut uf = UnionFind::new(n);
    let e2 = eps * eps;
    for (i, l) in labels.iter().enumerate() {
        let c = cell(l);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(members) = buckets.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else { continue };
                    for &j in members {
                        if j > i && dist2(*l, labels[j]) <= e2 {
                            uf.union(i, j);
                        }
                    }
                }
            }
        }
    }
    Ok(with_centers(number_components(&uf, n), labels))
}

/// Full pipeline for one mesh: raw labels, clustering, then a per-face
/// majority vote of the four samples' nearest cluster centers (ties keep
/// the face's own cluster).
pub fn segment_mesh(grid: &SparseAttributeGrid, mesh: &TriMesh, eps: f64) -> Result<(PartSegmentation, FaceLabels)> {
    let raw = assign_labels(grid, mesh)?;
    let first = cluster_labels(&raw.labels, eps)?;
    let nearest = |l: [f64; 3]| {
        (0..first.parts).min_by(|&a, &b| dist2(l, first.centers[a]).total_cmp(&dist2(l, first.centers[b]))).unwrap_or(0)
    };
    let voted: Vec<u32> = raw
        .samples
        .iter()
        .zip(&first.face_parts)
        .map(|(s, &own)| {
            let mut votes = vec![0usize; first.parts];
            for l in s.iter().flatten() {
                votes[nearest(*l)] += 1;
            }
            let top = votes.iter().copied().max().unwrap_or(0);
            if votes[own as usize] == top {
                own
            } else {
                votes.iter().position(|&v| v == top).expect("max exists") as u32
            }
        })
        .collect();
    let relabeled = PartSegmentation::from_face_ids(&voted).face_parts;
    Ok((with_centers(relabeled, &raw.labels), raw))
}

/// Area-weighted IoU between every predicted and ground-truth part.
pub fn iou_matrix(pred: &PartSegmentation, gt: &PartSegmentation, areas: &[f64]) -> Result<Vec<Vec<f64>>> {
    if pred.parts == 0 || gt.parts == 0 {
        return Err(Error::EmptyInput("segmentation has no parts"));
    }
    if pred.faces() != gt.faces() || areas.len() != gt.faces() {
        return Err(Error::Shape(format!(
            "{} predicted faces, {} ground-truth faces, {} areas",
            pred.faces(),
            gt.faces(),
            areas.len()
        )));
    }
    let mut inter = vec![vec![0.0; gt.parts]; pred.parts];
    let mut ap = vec![0.0; pred.parts];
    let mut ag = vec![0.0; gt.parts];
    for ((&p, &g), &a) in pred.face_parts.iter().zip(&gt.face_parts).zip(areas) {
        let (p, g) = (p as usize, g as usize);
        if p >= pred.parts || g >= gt.parts {
            return Err(Error::InvalidInput("part id out of range".into()));
        }
        inter[p][g] += a;
        ap[p] += a;
        ag[g] += a;
    }
    Ok((0..pred.parts)
        .map(|p| {
            (0..gt.parts)
                .map(|g| {
                    let union = ap[p] + ag[g] - inter[p][g];
                    if union > 0.0 {
                        inter[p][g] / union
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect())
}

/// Mean over ground-truth parts of the IoU of their matched predicted part
/// under the one-to-one matching maximizing total IoU; unmatched
/// ground-truth parts count as 0.
pub fn miou(pred: &PartSegmentation, gt: &PartSegmentation, areas: &[f64]) -> Result<f64> {
    Ok(matched_miou(&iou_matrix(pred, gt, areas)?))
}

/// The matching step of [`miou`] on a `pred x gt` IoU matrix (non-empty,
/// rectangular). Matched IoUs are summed in ground-truth order.
pub fn matched_miou(iou: &[Vec<f64>]) -> f64 {
    let (np, ng) = (iou.len(), iou.first().map_or(0, Vec::len));
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let n = np.max(ng);
    let cost: Vec<Vec<f64>> =
        (0..n).map(|p| (0..n).map(|g| if p < np && g < ng { -iou[p][g] } else { 0.0 }).collect()).collect();
    let mut matched = vec![0.0; ng];
    for (p, &g) in min_cost_assignment(&cost).iter().enumerate() {
        if p < np && g < ng {
            matched[g] = iou[p][g];
        }
    }
    matched.iter().sum::<f64>() / ng as f64
}

/// `n` random RGB colors with pairwise distance at least `min_dist`.
pub fn random_palette<R: Rng>(n: usize, min_dist: f64, rng: &mut R) -> Result<Vec<[f64; 3]>> {
    let mut out: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut tries = 0usize;
    while out.len() < n {
        tries += 1;
        if tries > 10_000 * n.max(1) {
            return Err(Error::InvalidInput(format!("cannot place {n} colors {min_dist} apart")));
        }
        let c: [f64; 3] = std::array::from_fn(|_| rng.random());
        if out.iter().all(|o| dist2(*o, c) >= min_dist * min_dist) {
            out.push(c);
        }
    }
    Ok(out)
}

/// UV texture coloring every texel by its face's part: part centers when
/// available, otherwise a seeded palette.
pub fn part_texture(seg: &PartSegmentation, mesh: &TriMesh, width: u32, height: u32) -> Result<TextureImage> {
    if seg.faces() != mesh.faces.len() {
        return Err(Error::Shape(format!("{} face ids for {} faces", seg.faces(), mesh.faces.len())));
    }
    let colors = if seg.centers.len() == seg.parts {
        seg.centers.clone()
    } else {
        random_palette(seg.parts, 0.2, &mut crate::seeded_rng(0))?
    };
    let (map, faces, _) = bake_position_map_with_faces(mesh, width, height)?;
    let mut img = TextureImage::new(width, height, 3);
    for (idx, &f) in faces.iter().enumerate() {
        if map.mask[idx] && f != u32::MAX {
            img.texel_mut(idx).copy_from_slice(&colors[seg.face_parts[f as usize] as usize]);
            img.mask[idx] = true;
        }
    }
    Ok(img)
}
