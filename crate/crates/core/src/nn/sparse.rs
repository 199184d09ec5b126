//! Sparse voxel token sets, kernel maps for sparse convolution and
//! block-local attention.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use super::layers::MultiHeadAttention;
use super::params::{ParamId, ParamStore};
use super::tape::{AttnGroups, KernelMap, Tape, TapPairs, Var};
use crate::error::{Error, Result};
use crate::grid::VoxelCoord;
use crate::pruning::{children, downsample_occupancy};

/// Features aligned with sorted voxel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTokenSet {
    pub resolution: u32,
    pub coords: Vec<VoxelCoord>,
    pub dim: usize,
    /// Row-major `coords.len() x dim`.
    pub features: Vec<f64>,
}

impl SparseTokenSet {
    pub fn new(resolution: u32, coords: Vec<VoxelCoord>, dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != coords.len() * dim {
            return Err(Error::Shape(format!("{} features for {} tokens of width {dim}", features.len(), coords.len())));
        }
        if coords.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("token coordinates must be strictly sorted".into()));
        }
        if let Some(c) = coords.iter().find(|c| !c.in_bounds(resolution)) {
            return Err(Error::OutOfBounds { x: c.x, y: c.y, z: c.z, resolution });
        }
        Ok(Self { resolution, coords, dim, features })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Kernel tap index of offset `d` in `{-1,0,1}^3`, x slowest.
pub fn tap_index(d: [i32; 3]) -> usize {
    ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize
}

pub fn tap_offset(k: usize) -> [i32; 3] {
    let k = k as i32;
    [k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1]
}

fn lookup(coords: &[VoxelCoord], c: VoxelCoord) -> Option<u32> {
    coords.binary_search(&c).ok().map(|i| i as u32)
}

/// Stride-1 map: each output keeps its input coordinate and reads the
/// occupied neighbours in the 3x3x3 footprint.
pub fn submanifold_map(coords: &[VoxelCoord], resolution: u32) -> KernelMap {
    let mut taps = vec![TapPairs::default(); 27];
    for (k, tap) in taps.iter_mut().enumerate() {
        let d = tap_offset(k);
        for (i, c) in coords.iter().enumerate() {
            if let Some(j) = c.offset(d, resolution).and_then(|n| lookup(coords, n)) {
                tap.out.push(i as u32);
                tap.inp.push(j);
            }
        }
    }
    KernelMap { n_in: coords.len(), n_out: coords.len(), taps }
}

/// Stride-2 map: outputs are the factor-2 downsample of the inputs and
/// output `o` reads inputs at `2o + d`.
pub fn downsample_map(coords: &[VoxelCoord], resolution: u32) -> Result<(Vec<VoxelCoord>, KernelMap)> {
    let out = downsample_occupancy(coords, 2, resolution)?;
    let mut taps = vec![TapPairs::default(); 27];
    for (k, tap) in taps.iter_mut().enumerate() {
        let d = tap_offset(k);
        for (o, c) in out.iter().enumerate() {
            let base = VoxelCoord::new(2 * c.x, 2 * c.y, 2 * c.z);
            if let Some(j) = base.offset(d, resolution).and_then(|n| lookup(coords, n)) {
                tap.out.push(o as u32);
                tap.inp.push(j);
            }
        }
    }
    let n_out = out.len();
    Ok((out, KernelMap { n_in: coords.len(), n_out, taps }))
}

/// Transposed x2 map: every parent emits its eight children; child
/// `2c + b` reads its parent through tap `b = (bx<<2)|(by<<1)|bz`.
pub fn upsample_map(parents: &[VoxelCoord]) -> (Vec<VoxelCoord>, KernelMap) {
    let kids = children(parents);
    let mut taps = vec![TapPairs::default(); 8];
    for (i, ch) in kids.iter().enumerate() {
        let b = ((ch.x & 1) << 2 | (ch.y & 1) << 1 | (ch.z & 1)) as usize;
        let p = lookup(parents, ch.parent(2)).expect("child of a listed parent");
        taps[b].out.push(i as u32);
        taps[b].inp.push(p);
    }
    let n_out = kids.len();
    (kids, KernelMap { n_in: parents.len(), n_out, taps })
}

/// Group tokens by the `window^3` block containing them.
pub fn window_groups(coords: &[VoxelCoord], window: u32) -> AttnGroups {
    let w = window.max(1);
    let mut blocks: BTreeMap<[u32; 3], Vec<u32>> = BTreeMap::new();
    for (i, c) in coords.iter().enumerate() {
        blocks.entry([c.x / w, c.y / w, c.z / w]).or_default().push(i as u32);
    }
    let queries: Vec<Vec<u32>> = blocks.into_values().collect();
    AttnGroups { keys: queries.clone(), queries }
}

/// Sparse convolution layer with `taps x d_in x d_out` weights and a bias.
#[derive(Clone, Copy, Debug)]
pub struct SparseConv {
    pub w: ParamId,
    pub b: ParamId,
    pub taps: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl SparseConv {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, taps: usize, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add_uniform(&format!("{name}.w"), &[taps, d_in, d_out], taps * d_in, rng);
        let b = store.add_uniform(&format!("{name}.b"), &[d_out], taps * d_in, rng);
        Self { w, b, taps, d_in, d_out }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, map: Rc<KernelMap>) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        let y = t.kernel_conv(x, w, map);
        t.add_row(y, b)
    }
}

/// Block-local self-attention over a token sequence laid out on `coords`.
pub fn windowed_attention(t: &mut Tape, attn: &MultiHeadAttention, x: Var, coords: &[VoxelCoord], window: u32) -> Var {
    attn.forward_grouped(t, x, x, Rc::new(window_groups(coords, window)))
}

/// Apply a `3x3x3xd_inxd_out` kernel (row-major, no bias) to a token set.
pub fn sparse_conv(tokens: &SparseTokenSet, kernel: &[f64], d_out: usize, stride: u32) -> Result<SparseTokenSet> {
    if kernel.len() != 27 * tokens.dim * d_out {
        return Err(Error::Shape(format!(
            "kernel has {} values, expected 3x3x3x{}x{d_out}",
            kernel.len(),
            tokens.dim
        )));
    }
    let (coords, map, res) = match stride {
        1 => (tokens.coords.clone(), submanifold_map(&tokens.coords, tokens.resolution), tokens.resolution),
        2 => {
            let (c, m) = downsample_map(&tokens.coords, tokens.resolution)?;
            (c, m, tokens.resolution / 2)
        }
        s => return Err(Error::InvalidInput(format!("unsupported stride {s}"))),
    };
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let x = t.constant(tokens.features.clone(), &[tokens.len(), tokens.dim]);
    let w = t.constant(kernel.to_vec(), &[27, tokens.dim, d_out]);
    let y = t.kernel_conv(x, w, Rc::new(map));
    SparseTokenSet::new(res, coords, d_out, t.value(y).to_vec())
}

/// Run block-local attention on a token set with the given weights.
pub fn windowed_sparse_attention(
    store: &ParamStore,
    attn: &MultiHeadAttention,
    tokens: &SparseTokenSet,
    window: u32,
) -> Result<SparseTokenSet> {
    if tokens.dim != attn.q.d_in {
        return Err(Error::Shape(format!("tokens have width {}, attention expects {}", tokens.dim, attn.q.d_in)));
    }
    let mut t = Tape::new(store);
    let x = t.constant(tokens.features.clone(), &[tokens.len(), tokens.dim]);
    let y = windowed_attention(&mut t, attn, x, &tokens.coords, window);
    SparseTokenSet::new(tokens.resolution, tokens.coords.clone(), attn.o.d_out, t.value(y).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vc(x: u32, y: u32, z: u32) -> VoxelCoord {
        VoxelCoord::new(x, y, z)
    }

    #[test]
    fn tap_index_round_trip() {
        for k in 0..27 {
            assert_eq!(tap_index(tap_offset(k)), k);
        }
        assert_eq!(tap_index([0, 0, 0]), 13);
    }

    #[test]
    fn identity_center_tap_is_unchanged() {
        let tokens = SparseTokenSet::new(8, vec![vc(3, 3, 3)], 2, vec![0.7, -1.5]).unwrap();
        let mut k = vec![0.0; 27 * 4];
        k[13 * 4] = 1.0;
        k[13 * 4 + 3] = 1.0;
        let out = sparse_conv(&tokens, &k, 2, 1).unwrap();
        assert_eq!(out, tokens);
    }

    #[test]
    fn all_ones_kernel_sums_neighbours() {
        // center plus three face neighbours; hand gather gives the sum of all 4
        let coords = vec![vc(2, 2, 2), vc(2, 2, 3), vc(2, 3, 2), vc(3, 2, 2)];
        let mut sorted = coords.clone();
        sorted.sort();
        let feats: Vec<f64> = sorted.iter().map(|c| (c.x * 100 + c.y * 10 + c.z) as f64).collect();
        let tokens = SparseTokenSet::new(8, sorted.clone(), 1, feats).unwrap();
        let out = sparse_conv(&tokens, &[1.0; 27], 1, 1).unwrap();
        let center = sorted.binary_search(&vc(2, 2, 2)).unwrap();
        assert_eq!(out.features[center], 222.0 + 223.0 + 232.0 + 322.0);
    }

    #[test]
    fn stride_two_coordinates_are_downsampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut coords: Vec<VoxelCoord> =
            (0..60).map(|_| vc(rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..16))).collect();
        coords.sort();
        coords.dedup();
        let n = coords.len();
        let tokens = SparseTokenSet::new(16, coords.clone(), 1, vec![1.0; n]).unwrap();
        let out = sparse_conv(&tokens, &[1.0; 27], 1, 2).unwrap();
        assert_eq!(out.coords, downsample_occupancy(&coords, 2, 16).unwrap());
        assert_eq!(out.resolution, 8);
        assert!(sparse_conv(&tokens, &[1.0; 26], 1, 2).is_err());
    }

    #[test]
    fn upsample_map_covers_children_once() {
        let parents = vec![vc(0, 0, 0), vc(1, 2, 3)];
        let (kids, map) = upsample_map(&parents);
        assert_eq!(kids.len(), 16);
        let total: usize = map.taps.iter().map(|t| t.out.len()).sum();
        assert_eq!(total, 16);
        for (b, tap) in map.taps.iter().enumerate() {
            for (&o, &i) in tap.out.iter().zip(&tap.inp) {
                let ch = kids[o as usize];
                let p = parents[i as usize];
                assert_eq!(ch, vc(2 * p.x + (b as u32 >> 2 & 1), 2 * p.y + (b as u32 >> 1 & 1), 2 * p.z + (b as u32 & 1)));
            }
        }
    }

    #[test]
    fn window_groups_partition_tokens() {
        let coords = vec![vc(0, 0, 0), vc(0, 0, 5), vc(3, 3, 3), vc(4, 0, 0)];
        let g = window_groups(&coords, 4);
        assert_eq!(g.queries, vec![vec![0, 2], vec![1], vec![3]]);
    }
}
