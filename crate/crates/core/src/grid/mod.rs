//! Sparse voxel grid holding a k-channel attribute vector per occupied voxel.
//!
//! Voxel `(ix, iy, iz)` covers the cube `[i/R - 0.5, (i+1)/R - 0.5]` on each
//! axis and its attribute vector is located at the cell center. A world point
//! `p` in `[-0.5, 0.5]^3` therefore maps to the continuous lattice coordinate
//! `(p + 0.5) * R - 0.5`, and trilinear interpolation blends the eight cell
//! centers surrounding that coordinate.

mod io;
mod voxelize;

pub use io::{read_grid, write_grid, GRID_MAGIC};
pub use voxelize::{triangle_overlaps_cell, voxelize_surface};

use crate::error::{Error, Result};

/// Integer voxel index. Ordering is lexicographic in `(x, y, z)` with `z`
/// varying fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VoxelCoord {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl VoxelCoord {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        Self { x, y, z }
    }

    pub fn in_bounds(&self, resolution: u32) -> bool {
        self.x < resolution && self.y < resolution && self.z < resolution
    }

    pub fn to_array(self) -> [u32; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [u32; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Coordinate of the enclosing voxel after dividing the resolution by `factor`.
    pub fn parent(self, factor: u32) -> Self {
        Self::new(self.x / factor, self.y / factor, self.z / factor)
    }

    /// Neighbor offset by `d`, or `None` when it leaves `[0, resolution)^3`.
    pub fn offset(self, d: [i32; 3], resolution: u32) -> Option<Self> {
        let shift = |v: u32, dv: i32| -> Option<u32> {
            let n = v as i64 + dv as i64;
            (n >= 0 && n < resolution as i64).then_some(n as u32)
        };
        Some(Self::new(
            shift(self.x, d[0])?,
            shift(self.y, d[1])?,
            shift(self.z, d[2])?,
        ))
    }

    /// World-space center of this voxel at the given resolution.
    pub fn center(self, resolution: u32) -> [f64; 3] {
        let r = resolution as f64;
        [
            (self.x as f64 + 0.5) / r - 0.5,
            (self.y as f64 + 0.5) / r - 0.5,
            (self.z as f64 + 0.5) / r - 0.5,
        ]
    }

    /// The voxel containing a world point; points on the outer boundary fall
    /// into the outermost cell.
    pub fn containing(p: [f64; 3], resolution: u32) -> Self {
        let r = resolution as f64;
        let idx = |v: f64| -> u32 {
            let i = ((v + 0.5) * r).floor();
            i.clamp(0.0, r - 1.0) as u32
        };
        Self::new(idx(p[0]), idx(p[1]), idx(p[2]))
    }
}

/// Named channel groups making up an attribute vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ChannelLayout {
    pub color: u32,
    pub semantic: u32,
    pub pbr: u32,
    pub extra: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Span {
    Color,
    Semantic,
    Pbr,
    Extra,
}

impl Span {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "color" => Ok(Span::Color),
            "semantic" => Ok(Span::Semantic),
            "pbr" => Ok(Span::Pbr),
            "extra" => Ok(Span::Extra),
            other => Err(Error::InvalidInput(format!("unknown channel span `{other}`"))),
        }
    }
}

impl ChannelLayout {
    pub const fn color_only() -> Self {
        Self { color: 3, semantic: 0, pbr: 0, extra: 0 }
    }

    pub const fn new(color: u32, semantic: u32, pbr: u32, extra: u32) -> Self {
        Self { color, semantic, pbr, extra }
    }

    /// Total channel count `k`.
    pub fn channels(&self) -> usize {
        (self.color + self.semantic + self.pbr + self.extra) as usize
    }

    pub fn spans(&self) -> [u32; 4] {
        [self.color, self.semantic, self.pbr, self.extra]
    }

    /// Channel range of a span; errors when the span is empty in this layout.
    pub fn range(&self, span: Span) -> Result<std::ops::Range<usize>> {
        let s = self.spans();
        let idx = match span {
            Span::Color => 0,
            Span::Semantic => 1,
            Span::Pbr => 2,
            Span::Extra => 3,
        };
        let start: u32 = s[..idx].iter().sum();
        let len = s[idx];
        if len == 0 {
            return Err(Error::Layout(format!("span {span:?} is empty in layout {self:?}")));
        }
        Ok(start as usize..(start + len) as usize)
    }
}

/// Attribute vector tagged with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVector {
    pub values: Vec<f64>,
    pub layout: ChannelLayout,
}

impl AttributeVector {
    pub fn new(values: Vec<f64>, layout: ChannelLayout) -> Result<Self> {
        validate_vector(&values, &layout)?;
        Ok(Self { values, layout })
    }

    pub fn span(&self, span: Span) -> Result<&[f64]> {
        Ok(&self.values[self.layout.range(span)?])
    }
}

fn validate_vector(values: &[f64], layout: &ChannelLayout) -> Result<()> {
    if values.len() != layout.channels() {
        return Err(Error::Layout(format!(
            "vector has {} channels, layout declares {}",
            values.len(),
            layout.channels()
        )));
    }
    let color = &values[..layout.color as usize];
    if let Some(bad) = color.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Layout(format!("color channel value {bad} outside [0, 1]")));
    }
    Ok(())
}

/// A point in the unit cube `[-0.5, 0.5]^3`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryPoint([f64; 3]);

impl QueryPoint {
    pub fn new(p: [f64; 3]) -> Result<Self> {
        if p.iter().all(|v| (-0.5..=0.5).contains(v)) {
            Ok(Self(p))
        } else {
            Err(Error::PointOutOfBounds {
                index: 0,
                reason: format!("{p:?} not inside [-0.5, 0.5]^3"),
            })
        }
    }

    pub fn coords(&self) -> [f64; 3] {
        self.0
    }
}

/// Behavior for corners that are absent from the sparse grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryOptions {
    /// Value used for absent corners; `None` means the zero vector.
    pub fill: Option<Vec<f64>>,
    /// Divide by the present weight mass instead of filling.
    pub renormalize: bool,
}

/// Interpolated attributes plus the total weight that fell on absent corners.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub values: Vec<f64>,
    pub missing_mass: f64,
}

/// The eight interpolation corners of a query: grid entry index (or `None`
/// when absent) and weight. Corner `b` has bits `(x << 2) | (y << 1) | z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub base: [i64; 3],
    pub entries: [Option<usize>; 8],
    pub weights: [f64; 8],
}

impl Stencil {
    pub fn missing_mass(&self) -> f64 {
        self.entries
            .iter()
            .zip(&self.weights)
            .filter(|(e, _)| e.is_none())
            .map(|(_, w)| w)
            .sum()
    }
}

/// Base corner and fractional offsets of a world point on a lattice of
/// cell-centered samples. Coordinates outside the outermost centers clamp.
pub fn lattice_position(p: [f64; 3], resolution: u32) -> ([i64; 3], [f64; 3]) {
    let r = resolution as f64;
    let hi_base = (resolution as i64 - 2).max(0);
    let mut base = [0i64; 3];
    let mut alpha = [0f64; 3];
    for d in 0..3 {
        let u = ((p[d] + 0.5) * r - 0.5).clamp(0.0, (r - 1.0).max(0.0));
        let b = (u.floor() as i64).clamp(0, hi_base);
        base[d] = b;
        alpha[d] = u - b as f64;
    }
    (base, alpha)
}

/// Trilinear weights of the eight corners for fractional offsets `alpha`.
pub fn corner_weights(alpha: [f64; 3]) -> [f64; 8] {
    let mut w = [0f64; 8];
    for (b, slot) in w.iter_mut().enumerate() {
        let mut weight = 1.0;
        for d in 0..3 {
            let bit = (b >> (2 - d)) & 1;
            weight *= if bit == 1 { alpha[d] } else { 1.0 - alpha[d] };
        }
        *slot = weight;
    }
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseAttributeGrid {
    resolution: u32,
    layout: ChannelLayout,
    coords: Vec<VoxelCoord>,
    values: Vec<f64>,
}

impl SparseAttributeGrid {
    pub fn new(resolution: u32, layout: ChannelLayout) -> Result<Self> {
        if resolution == 0 || !resolution.is_power_of_two() || resolution > 1 << 31 {
            return Err(Error::InvalidInput(format!(
                "resolution {resolution} is not a power of two in [1, 2^31]"
            )));
        }
        Ok(Self { resolution, layout, coords: Vec::new(), values: Vec::new() })
    }

    /// Build from unordered entries. Later duplicates replace earlier ones.
    pub fn from_entries<I>(resolution: u32, layout: ChannelLayout, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (VoxelCoord, Vec<f64>)>,
    {
        let mut grid = Self::new(resolution, layout)?;
        let mut items: Vec<(VoxelCoord, usize, Vec<f64>)> = Vec::new();
        for (seq, (c, v)) in entries.into_iter().enumerate() {
            grid.check(c, &v)?;
            items.push((c, seq, v));
        }
        items.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        items.dedup_by(|later, first| later.0 == first.0);
        let k = layout.channels();
        grid.coords.reserve(items.len());
        grid.values.reserve(items.len() * k);
        for (c, _, v) in items {
            grid.coords.push(c);
            grid.values.extend_from_slice(&v);
        }
        Ok(grid)
    }

    /// Build from coordinates already in strictly increasing order with a
    /// flat `M * k` value array.
    pub fn from_sorted(
        resolution: u32,
        layout: ChannelLayout,
        coords: Vec<VoxelCoord>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let mut grid = Self::new(resolution, layout)?;
        let k = layout.channels();
        if values.len() != coords.len() * k {
            return Err(Error::Layout(format!(
                "{} values for {} entries of {k} channels",
                values.len(),
                coords.len()
            )));
        }
        for (i, c) in coords.iter().enumerate() {
            if !c.in_bounds(resolution) {
                return Err(out_of_bounds(*c, resolution));
            }
            if i > 0 && coords[i - 1] >= *c {
                return Err(Error::InvalidInput(format!(
                    "coordinates not strictly increasing at entry {i}"
                )));
            }
            validate_vector(&values[i * k..(i + 1) * k], &layout)?;
        }
        grid.coords = coords;
        grid.values = values;
        Ok(grid)
    }

    /// Occupancy-only grid: every coordinate with an empty attribute vector.
    pub fn occupancy(resolution: u32, coords: impl IntoIterator<Item = VoxelCoord>) -> Result<Self> {
        let mut c: Vec<VoxelCoord> = coords.into_iter().collect();
        c.sort_unstable();
        c.dedup();
        Self::from_sorted(resolution, ChannelLayout::default(), c, Vec::new())
    }

    fn check(&self, c: VoxelCoord, a: &[f64]) -> Result<()> {
        validate_vector(a, &self.layout)?;
        if !c.in_bounds(self.resolution) {
            return Err(out_of_bounds(c, self.resolution));
        }
        Ok(())
    }

    pub fn insert(&mut self, c: VoxelCoord, a: &[f64]) -> Result<()> {
        self.check(c, a)?;
        let k = self.layout.channels();
        match self.coords.binary_search(&c) {
            Ok(i) => self.values[i * k..(i + 1) * k].copy_from_slice(a),
            Err(i) => {
                self.coords.insert(i, c);
                self.values.splice(i * k..i * k, a.iter().copied());
            }
        }
        Ok(())
    }

    pub fn get(&self, c: VoxelCoord) -> Option<&[f64]> {
        self.index_of(c).map(|i| self.value(i))
    }

    pub fn index_of(&self, c: VoxelCoord) -> Option<usize> {
        self.coords.binary_search(&c).ok()
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn layout(&self) -> ChannelLayout {
        self.layout
    }

    pub fn channels(&self) -> usize {
        self.layout.channels()
    }

    /// Number of stored voxels `M`.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &[f64] {
        let k = self.layout.channels();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn iter(&self) -> impl Iterator<Item = (VoxelCoord, &[f64])> + '_ {
        let k = self.layout.channels();
        self.coords
            .iter()
            .enumerate()
            .map(move |(i, c)| (*c, &self.values[i * k..(i + 1) * k]))
    }

    /// Copy of this grid restricted to the voxels where `keep` is true.
    pub fn retain_mask(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.len() {
            return Err(Error::Shape(format!(
                "mask of length {} for grid with {} entries",
                keep.len(),
                self.len()
            )));
        }
        let k = self.channels();
        let mut coords = Vec::new();
        let mut values = Vec::new();
        for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            coords.push(self.coords[i]);
            values.extend_from_slice(&self.values[i * k..(i + 1) * k]);
        }
        Ok(Self { resolution: self.resolution, layout: self.layout, coords, values })
    }

    /// Interpolation corners for a world point.
    pub fn stencil(&self, p: [f64; 3]) -> Stencil {
        let (base, alpha) = lattice_position(p, self.resolution);
        let weights = corner_weights(alpha);
        let mut entries = [None; 8];
        let r = self.resolution as i64;
        for (b, slot) in entries.iter_mut().enumerate() {
            let c = [
                base[0] + ((b >> 2) & 1) as i64,
                base[1] + ((b >> 1) & 1) as i64,
                base[2] + (b & 1) as i64,
            ];
            if c.iter().all(|&v| v < r) {
                *slot = self.index_of(VoxelCoord::new(c[0] as u32, c[1] as u32, c[2] as u32));
            }
        }
        Stencil { base, entries, weights }
    }

    /// Interpolate a single query point.
    pub fn trilinear_query(&self, p: &QueryPoint, opts: &QueryOptions) -> QueryResult {
        let stencil = self.stencil(p.coords());
        self.resolve(&stencil, opts)
    }

    /// Evaluate a precomputed stencil.
    pub fn resolve(&self, stencil: &Stencil, opts: &QueryOptions) -> QueryResult {
        let k = self.channels();
        let mut out = vec![0.0; k];
        let mut missing = 0.0;
        for b in 0..8 {
            let w = stencil.weights[b];
            match stencil.entries[b] {
                Some(i) => {
                    for (o, v) in out.iter_mut().zip(self.value(i)) {
                        *o += w * v;
                    }
                }
                None => {
                    missing += w;
                    if let (Some(fill), false) = (&opts.fill, opts.renormalize) {
                        for (o, v) in out.iter_mut().zip(fill) {
                            *o += w * v;
                        }
                    }
                }
            }
        }
        if opts.renormalize {
            let present = 1.0 - missing;
            if present > 0.0 {
                out.iter_mut().for_each(|v| *v /= present);
            }
        }
        QueryResult { values: out, missing_mass: missing }
    }

    /// Element-wise `trilinear_query`; the first out-of-bounds point is
    /// reported with its index.
    pub fn batch_query(&self, points: &[[f64; 3]], opts: &QueryOptions) -> Result<Vec<QueryResult>> {
        let checked: Vec<QueryPoint> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                QueryPoint::new(*p).map_err(|_| Error::PointOutOfBounds {
                    index: i,
                    reason: format!("{p:?} not inside [-0.5, 0.5]^3"),
                })
            })
            .collect::<Result<_>>()?;
        Ok(crate::par::map(&checked, |q| self.trilinear_query(q, opts)))
    }
}

fn out_of_bounds(c: VoxelCoord, resolution: u32) -> Error {
    Error::OutOfBounds { x: c.x, y: c.y, z: c.z, resolution }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn extra1() -> ChannelLayout {
        ChannelLayout::new(0, 0, 0, 1)
    }

    #[test]
    fn insert_then_get_round_trips() {
        let mut g = SparseAttributeGrid::new(8, ChannelLayout::color_only()).unwrap();
        let c = VoxelCoord::new(1, 2, 3);
        g.insert(c, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(g.get(c).unwrap(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn second_insert_replaces() {
        let mut g = SparseAttributeGrid::new(8, ChannelLayout::color_only()).unwrap();
        let c = VoxelCoord::new(1, 2, 3);
        g.insert(c, &[0.1, 0.2, 0.3]).unwrap();
        g.insert(c, &[0.4, 0.5, 0.6]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.get(c).unwrap(), &[0.4, 0.5, 0.6]);
    }

    #[test]
    fn insert_out_of_range_fails() {
        let mut g = SparseAttributeGrid::new(8, ChannelLayout::color_only()).unwrap();
        let err = g.insert(VoxelCoord::new(8, 0, 0), &[0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { x: 8, .. }));
    }

    #[test]
    fn insert_wrong_length_fails() {
        let mut g = SparseAttributeGrid::new(8, ChannelLayout::color_only()).unwrap();
        assert!(matches!(g.insert(VoxelCoord::new(0, 0, 0), &[0.0; 2]), Err(Error::Layout(_))));
        assert!(matches!(g.insert(VoxelCoord::new(0, 0, 0), &[1.5, 0.0, 0.0]), Err(Error::Layout(_))));
    }

    #[test]
    fn iteration_is_lexicographic() {
        let entries = vec![
            (VoxelCoord::new(1, 0, 0), vec![1.0]),
            (VoxelCoord::new(0, 1, 0), vec![2.0]),
            (VoxelCoord::new(0, 0, 1), vec![3.0]),
            (VoxelCoord::new(0, 0, 0), vec![4.0]),
            (VoxelCoord::new(0, 0, 1), vec![5.0]),
        ];
        let g = SparseAttributeGrid::from_entries(4, extra1(), entries).unwrap();
        let order: Vec<_> = g.iter().map(|(c, v)| (c.to_array(), v[0])).collect();
        assert_eq!(
            order,
            vec![([0, 0, 0], 4.0), ([0, 0, 1], 5.0), ([0, 1, 0], 2.0), ([1, 0, 0], 1.0)]
        );
    }

    #[test]
    fn from_sorted_rejects_duplicates() {
        let c = VoxelCoord::new(0, 0, 0);
        let err = SparseAttributeGrid::from_sorted(4, extra1(), vec![c, c], vec![0.0, 1.0]);
        assert!(err.is_err());
    }

    #[test]
    fn query_at_lattice_site_collapses() {
        let r = 4;
        let mut g = SparseAttributeGrid::new(r, extra1()).unwrap();
        for x in 0..r {
            for y in 0..r {
                for z in 0..r {
                    g.insert(VoxelCoord::new(x, y, z), &[(x * 100 + y * 10 + z) as f64]).unwrap();
                }
            }
        }
        let site = VoxelCoord::new(1, 2, 3);
        let q = QueryPoint::new(site.center(r)).unwrap();
        let res = g.trilinear_query(&q, &QueryOptions::default());
        assert_eq!(res.values, vec![123.0]);
        assert_eq!(res.missing_mass, 0.0);
    }

    #[test]
    fn cell_center_query_is_corner_mean() {
        let r = 2;
        let layout = ChannelLayout::new(0, 0, 0, 8);
        let mut g = SparseAttributeGrid::new(r, layout).unwrap();
        for b in 0..8u32 {
            let mut e = vec![0.0; 8];
            e[b as usize] = 1.0;
            g.insert(VoxelCoord::new(b >> 2 & 1, b >> 1 & 1, b & 1), &e).unwrap();
        }
        let res = g.trilinear_query(&QueryPoint::new([0.0; 3]).unwrap(), &QueryOptions::default());
        for v in res.values {
            assert!((v - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_corners_report_mass_and_fill() {
        let mut g = SparseAttributeGrid::new(2, extra1()).unwrap();
        g.insert(VoxelCoord::new(0, 0, 0), &[8.0]).unwrap();
        let q = QueryPoint::new([0.0; 3]).unwrap();
        let zero = g.trilinear_query(&q, &QueryOptions::default());
        assert_eq!(zero.values, vec![1.0]);
        assert!((zero.missing_mass - 0.875).abs() < 1e-15);

        let filled = g.trilinear_query(&q, &QueryOptions { fill: Some(vec![1.0]), renormalize: false });
        assert!((filled.values[0] - (1.0 + 0.875)).abs() < 1e-15);

        let renorm = g.trilinear_query(&q, &QueryOptions { fill: None, renormalize: true });
        assert!((renorm.values[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn query_point_bounds() {
        assert!(QueryPoint::new([0.5, -0.5, 0.0]).is_ok());
        assert!(QueryPoint::new([0.5001, 0.0, 0.0]).is_err());
        assert!(QueryPoint::new([f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn batch_reports_failing_index() {
        let g = SparseAttributeGrid::new(4, extra1()).unwrap();
        let err = g.batch_query(&[[0.0; 3], [0.0, 0.7, 0.0]], &QueryOptions::default()).unwrap_err();
        assert!(matches!(err, Error::PointOutOfBounds { index: 1, .. }));
    }

    #[test]
    fn boundary_points_clamp_to_outer_centers() {
        let r = 4;
        let entries = (0..r).flat_map(|x| {
            (0..r).flat_map(move |y| (0..r).map(move |z| (VoxelCoord::new(x, y, z), vec![x as f64])))
        });
        let g = SparseAttributeGrid::from_entries(r, extra1(), entries).unwrap();
        let lo = g.trilinear_query(&QueryPoint::new([-0.5, 0.0, 0.0]).unwrap(), &QueryOptions::default());
        let hi = g.trilinear_query(&QueryPoint::new([0.5, 0.0, 0.0]).unwrap(), &QueryOptions::default());
        assert_eq!(lo.values[0], 0.0);
        assert_eq!(hi.values[0], 3.0);
    }

    #[test]
    fn resolution_one_is_constant() {
        let mut g = SparseAttributeGrid::new(1, extra1()).unwrap();
        g.insert(VoxelCoord::new(0, 0, 0), &[2.5]).unwrap();
        let res = g.trilinear_query(&QueryPoint::new([0.3, -0.2, 0.1]).unwrap(), &QueryOptions::default());
        assert_eq!(res.values, vec![2.5]);
        assert_eq!(res.missing_mass, 0.0);
    }

    #[test]
    fn layout_span_ranges() {
        let l = ChannelLayout::new(3, 3, 2, 0);
        assert_eq!(l.range(Span::Semantic).unwrap(), 3..6);
        assert_eq!(l.range(Span::Pbr).unwrap(), 6..8);
        assert!(l.range(Span::Extra).is_err());
    }
}
