//! Condition tokens: the front image splatted into voxels and encoded by the
//! VAE (sparse branch), plus global image tokens from a feature extractor.

use crate::error::{Error, Result};
use crate::grid::{ChannelLayout, SparseAttributeGrid, VoxelCoord};
use crate::projection::project_image_to_grid;
use crate::render::ViewPositionMap;
use crate::uv::TextureImage;
use crate::vae::Vae;

/// Produces a fixed number of feature rows for an image.
pub trait GlobalExtractor {
    fn tokens(&self) -> usize;
    fn dim(&self) -> usize;
    /// Row-major `tokens() x dim()` features.
    fn extract(&self, img: &TextureImage) -> Vec<f64>;
}

/// Mean RGB over an `n x n` grid of image cells plus the cell center in
/// `[0, 1]^2`. Invalid pixels are skipped; empty cells are zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchMeanExtractor {
    pub cells: u32,
}

impl Default for PatchMeanExtractor {
    fn default() -> Self {
        Self { cells: 8 }
    }
}

impl GlobalExtractor for PatchMeanExtractor {
    fn tokens(&self) -> usize {
        (self.cells * self.cells) as usize
    }

    fn dim(&self) -> usize {
        5
    }

    fn extract(&self, img: &TextureImage) -> Vec<f64> {
        let n = self.cells as usize;
        let mut sums = vec![[0.0f64; 3]; n * n];
        let mut counts = vec![0usize; n * n];
        let (w, h) = (img.width as usize, img.height as usize);
        for j in 0..h {
            for i in 0..w {
                let idx = j * w + i;
                if !img.mask[idx] {
                    continue;
                }
                let cell = (j * n / h) * n + i * n / w;
                let t = img.texel(idx);
                for c in 0..3.min(t.len()) {
                    sums[cell][c] += t[c];
                }
                counts[cell] += 1;
            }
        }
        let mut out = Vec::with_capacity(n * n * 5);
        for cj in 0..n {
            for ci in 0..n {
                let cell = cj * n + ci;
                let k = counts[cell].max(1) as f64;
                out.extend(sums[cell].iter().map(|s| s / k));
                out.push((ci as f64 + 0.5) / n as f64);
                out.push((cj as f64 + 0.5) / n as f64);
            }
        }
        out
    }
}

/// Everything the denoiser attends to for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// Latent-grid coordinates of the sparse tokens (views concatenated).
    pub sparse_coords: Vec<VoxelCoord>,
    /// Posterior means, `sparse_coords.len() x latent_dim`.
    pub sparse: Vec<f64>,
    pub latent_dim: usize,
    /// Row-major `global_tokens x global_dim` extractor output.
    pub global: Vec<f64>,
    pub global_tokens: usize,
    pub global_dim: usize,
    pub drop_sparse: bool,
    pub drop_global: bool,
}

impl ConditionBundle {
    pub fn sparse_len(&self) -> usize {
        self.sparse_coords.len()
    }

    /// The same condition with both branches replaced by null tokens.
    pub fn dropped(&self) -> Self {
        Self { drop_sparse: true, drop_global: true, ..self.clone() }
    }

    /// Concatenate the sparse tokens of several views; global tokens come
    /// from the first view.
    pub fn concat(views: &[ConditionBundle]) -> Result<Self> {
        let first = views.first().ok_or(Error::EmptyInput("no condition views"))?;
        let mut out = first.clone();
        for v in &views[1..] {
            if v.latent_dim != first.latent_dim {
                return Err(Error::Shape("condition views disagree on latent width".into()));
            }
            out.sparse_coords.extend_from_slice(&v.sparse_coords);
            out.sparse.extend_from_slice(&v.sparse);
        }
        Ok(out)
    }
}

/// Sparse tokens from an already-projected color grid. Voxels outside
/// `occupancy` (when given) are discarded first so token coordinates stay
/// inside the asset's latent support.
pub fn sparse_tokens(
    vae: &Vae,
    cond: &SparseAttributeGrid,
    occupancy: Option<&[VoxelCoord]>,
) -> Result<(Vec<VoxelCoord>, Vec<f64>)> {
    let grid = match occupancy {
        Some(occ) => {
            let keep: Vec<bool> = cond.coords().iter().map(|c| occ.binary_search(c).is_ok()).collect();
            cond.retain_mask(&keep)?
        }
        None => cond.clone(),
    };
    if grid.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let lat = vae.encode(&grid)?;
    Ok((lat.coords, lat.mu))
}

/// Build the condition for a front view: project the image through its
/// view position map, encode with the VAE (posterior mean) and extract
/// global tokens.
pub fn make_condition(
    front: &TextureImage,
    vpm: &ViewPositionMap,
    occupancy: Option<&[VoxelCoord]>,
    vae: &Vae,
    extractor: &dyn GlobalExtractor,
) -> Result<ConditionBundle> {
    let projected = project_image_to_grid(front, vpm, vae.cfg.resolution)?;
    let projected = if vae.cfg.layout() == ChannelLayout::color_only() {
        projected
    } else {
        return Err(Error::Layout("conditioning VAE must be color-only".into()));
    };
    condition_from_grid(&projected, front, occupancy, vae, extractor)
}

pub fn condition_from_grid(
    projected: &SparseAttributeGrid,
    front: &TextureImage,
    occupancy: Option<&[VoxelCoord]>,
    vae: &Vae,
    extractor: &dyn GlobalExtractor,
) -> Result<ConditionBundle> {
    let (sparse_coords, sparse) = sparse_tokens(vae, projected, occupancy)?;
    Ok(ConditionBundle {
        sparse_coords,
        sparse,
        latent_dim: vae.cfg.latent_dim,
        global: extractor.extract(front),
        global_tokens: extractor.tokens(),
        global_dim: extractor.dim(),
        drop_sparse: false,
        drop_global: false,
    })
}
