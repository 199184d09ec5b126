//! `TXPOS` position maps and 8-bit PNG textures.
//!
//! `TXPOS`: magic `b"TXPOS"`, little-endian `u32` width and height, then
//! `W * H` records of four little-endian `f32` (x, y, z, mask) where mask is
//! `1.0` for valid texels and `0.0` otherwise. Records start at the bottom
//! row (`v = 0`) and run left to right.
//!
//! PNG: RGBA, 8 bits per channel, alpha 255 on valid texels and 0 elsewhere.
//! PNG rows run top to bottom, so the first PNG row is texture row `H - 1`.

use std::io::{Read, Write};
use std::path::Path;

use image::{ImageBuffer, Rgba, RgbaImage};

use super::{PositionMap, TextureImage};
use crate::error::{format_err, Result};
use crate::binio::Cursor;

pub const POSMAP_MAGIC: &[u8; 5] = b"TXPOS";

pub fn write_posmap<W: Write>(mut w: W, map: &PositionMap) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + map.len() * 16);
    buf.extend_from_slice(POSMAP_MAGIC);
    buf.extend_from_slice(&map.width.to_le_bytes());
    buf.extend_from_slice(&map.height.to_le_bytes());
    for (p, m) in map.positions.iter().zip(&map.mask) {
        let rec = if *m { [p[0] as f32, p[1] as f32, p[2] as f32, 1.0] } else { [0.0; 4] };
        for v in rec {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_posmap<R: Read>(mut r: R) -> Result<PositionMap> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(5).map_err(|_| format_err("TXPOS", "truncated header"))? != POSMAP_MAGIC {
        return Err(format_err("TXPOS", "bad magic"));
    }
    let width = cur.u32()?;
    let height = cur.u32()?;
    let n = (width as u64) * (height as u64);
    let payload = (bytes.len() - cur.pos) as u64;
    if n.checked_mul(16) != Some(payload) {
        return Err(format_err("TXPOS", format!("{width}x{height} map needs {} payload bytes, found {payload}", n * 16)));
    }
    let mut map = PositionMap::empty(width, height);
    for idx in 0..n as usize {
        let rec = [cur.f32()?, cur.f32()?, cur.f32()?, cur.f32()?];
        match rec[3] {
            1.0 => {
                let p = [rec[0] as f64, rec[1] as f64, rec[2] as f64];
                if p.iter().any(|v| !(-0.5..=0.5).contains(v)) {
                    return Err(format_err("TXPOS", format!("texel {idx} position {p:?} outside unit cube")));
                }
                map.positions[idx] = p;
                map.mask[idx] = true;
            }
            0.0 => {}
            m => return Err(format_err("TXPOS", format!("texel {idx} has mask value {m}"))),
        }
    }
    debug_assert!(cur.at_end());
    Ok(map)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a texture as RGBA. One-channel images are written as gray, two
/// channel images fill red and green; extra channels beyond three are dropped.
pub fn texture_to_rgba(img: &TextureImage) -> RgbaImage {
    let (w, h) = (img.width, img.height);
    ImageBuffer::from_fn(w, h, |x, y| {
        let idx = ((h - 1 - y) * w + x) as usize;
        let t = img.texel(idx);
        let rgb = match t.len() {
            0 => [0, 0, 0],
            1 => [to_byte(t[0]); 3],
            2 => [to_byte(t[0]), to_byte(t[1]), 0],
            _ => [to_byte(t[0]), to_byte(t[1]), to_byte(t[2])],
        };
        let a = if img.mask[idx] { 255 } else { 0 };
        Rgba([rgb[0], rgb[1], rgb[2], a])
    })
}

pub fn write_png(path: impl AsRef<Path>, img: &TextureImage) -> Result<()> {
    texture_to_rgba(img).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Decode an RGB(A) image into a three-channel texture; texels with zero
/// alpha are invalid.
pub fn read_png(path: impl AsRef<Path>) -> Result<TextureImage> {
    let rgba = image::open(path)?.to_rgba8();
    Ok(rgba_to_texture(&rgba))
}

pub fn rgba_to_texture(rgba: &RgbaImage) -> TextureImage {
    let (w, h) = rgba.dimensions();
    let mut img = TextureImage::new(w, h, 3);
    for (x, y, px) in rgba.enumerate_pixels() {
        let idx = ((h - 1 - y) * w + x) as usize;
        for c in 0..3 {
            img.data[idx * 3 + c] = px.0[c] as f64 / 255.0;
        }
        img.mask[idx] = px.0[3] > 0;
    }
    img
}
