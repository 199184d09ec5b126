//! `TXGRID` binary format.
//!
//! ```text
//! magic      b"TXG1"
//! u32        resolution R
//! u32        channel count k
//! u32 x 4    span sizes (color, semantic, pbr, extra), summing to k
//! u64        entry count M
//! M records  u32 x, u32 y, u32 z, k x f32   (strictly increasing coordinates)
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use super::{ChannelLayout, SparseAttributeGrid, VoxelCoord};
use crate::binio::Cursor;
use crate::error::{format_err, Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"TXG1";

pub fn write_grid<W: Write>(mut w: W, grid: &SparseAttributeGrid) -> Result<()> {
    let layout = grid.layout();
    let k = grid.channels();
    let mut buf = Vec::with_capacity(32 + grid.len() * (12 + 4 * k));
    buf.extend_from_slice(GRID_MAGIC);
    buf.extend_from_slice(&grid.resolution().to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    for s in layout.spans() {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.extend_from_slice(&(grid.len() as u64).to_le_bytes());
    for (c, v) in grid.iter() {
        for x in c.to_array() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for &x in v {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_grid<R: Read>(mut r: R) -> Result<SparseAttributeGrid> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(4)? != GRID_MAGIC {
        return Err(format_err("TXGRID", "bad magic"));
    }
    let resolution = cur.u32()?;
    let k = cur.u32()?;
    let spans = [cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?];
    let layout = ChannelLayout::new(spans[0], spans[1], spans[2], spans[3]);
    if layout.channels() != k as usize {
        return Err(format_err("TXGRID", format!("span sizes {spans:?} do not sum to k = {k}")));
    }
    let m = cur.u64()?;
    let record = 12 + 4 * k as u64;
    let remaining = (bytes.len() - cur.pos) as u64;
    if m.checked_mul(record) != Some(remaining) {
        return Err(format_err(
            "TXGRID",
            format!("{m} records of {record} bytes do not match {remaining} payload bytes"),
        ));
    }
    let mut coords = Vec::with_capacity(m as usize);
    let mut values = Vec::with_capacity(m as usize * k as usize);
    for i in 0..m {
        let c = VoxelCoord::new(cur.u32()?, cur.u32()?, cur.u32()?);
        if let Some(prev) = coords.last() {
            if *prev >= c {
                let why = if *prev == c { "duplicate" } else { "unsorted" };
                return Err(format_err("TXGRID", format!("{why} coordinate at record {i}")));
            }
        }
        coords.push(c);
        for _ in 0..k {
            values.push(cur.f32()? as f64);
        }
    }
    SparseAttributeGrid::from_sorted(resolution, layout, coords, values).map_err(|e| match e {
        Error::Format { .. } => e,
        other => format_err("TXGRID", other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SparseAttributeGrid {
        let mut g = SparseAttributeGrid::new(16, ChannelLayout::new(3, 0, 0, 1)).unwrap();
        g.insert(VoxelCoord::new(3, 1, 2), &[0.25, 0.5, 0.75, -3.0]).unwrap();
        g.insert(VoxelCoord::new(0, 9, 15), &[0.1, 0.2, 0.3, 7.5]).unwrap();
        g
    }

    fn bytes(g: &SparseAttributeGrid) -> Vec<u8> {
        let mut out = Vec::new();
        write_grid(&mut out, g).unwrap();
        out
    }

    #[test]
    fn header_layout() {
        let b = bytes(&sample());
        assert_eq!(&b[..4], b"TXG1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 16);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(b[28..36].try_into().unwrap()), 2);
        assert_eq!(b.len(), 36 + 2 * (12 + 16));
        // first record is the lexicographically smaller coordinate
        assert_eq!(u32::from_le_bytes(b[40..44].try_into().unwrap()), 9);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let first = bytes(&sample());
        let back = read_grid(first.as_slice()).unwrap();
        assert_eq!(bytes(&back), first);
    }

    #[test]
    fn rejects_unsorted_and_duplicates() {
        let mut b = bytes(&sample());
        // swap the two records
        let rec = 12 + 16;
        let (a, c) = b[36..].split_at_mut(rec);
        a.swap_with_slice(c);
        assert!(read_grid(b.as_slice()).unwrap_err().to_string().contains("unsorted"));

        let mut d = bytes(&sample());
        let first: Vec<u8> = d[36..36 + 12].to_vec();
        d[36 + rec..36 + rec + 12].copy_from_slice(&first);
        assert!(read_grid(d.as_slice()).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn rejects_bad_headers() {
        let good = bytes(&sample());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(read_grid(bad_magic.as_slice()).is_err());

        let mut bad_k = good.clone();
        bad_k[8] = 5;
        assert!(read_grid(bad_k.as_slice()).is_err());

        assert!(read_grid(&good[..good.len() - 1]).is_err());
        assert!(read_grid(&good[..10]).is_err());
    }
}
