//! Sinusoidal embeddings for voxel positions and flow time.

use crate::error::{Error, Result};
use crate::grid::VoxelCoord;

fn ladder(n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| 10000f64.powf(-(i as f64) / n as f64))
}

/// Per-axis `[sin(c w_0..), cos(c w_0..)]` blocks of width `d/3`, axes x, y, z.
pub fn position_embed(coords: &[VoxelCoord], d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 6 != 0 {
        return Err(Error::InvalidInput(format!("position embedding width {d} is not a positive multiple of 6")));
    }
    let f = d / 6;
    let freqs: Vec<f64> = ladder(f).collect();
    let mut out = Vec::with_capacity(coords.len() * d);
    for c in coords {
        for a in c.to_array() {
            let a = a as f64;
            out.extend(freqs.iter().map(|w| (a * w).sin()));
            out.extend(freqs.iter().map(|w| (a * w).cos()));
        }
    }
    Ok(out)
}

/// Embedding of a flow time `t` in `[0, 1]`, scaled by 1000 before the
/// frequency ladder. `d` must be even.
pub fn time_embed(t: f64, d: usize) -> Vec<f64> {
    assert!(d % 2 == 0, "time embedding width must be even");
    let s = t * 1000.0;
    let freqs: Vec<f64> = ladder(d / 2).collect();
    freqs.iter().map(|w| (s * w).sin()).chain(freqs.iter().map(|w| (s * w).cos())).collect()
}
