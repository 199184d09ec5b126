//! Part-id lists and region-mask sets on disk.
//!
//! A part list is plain text with one integer id per line in OBJ face
//! order. A mask set is a JSON sidecar naming, per view, a 16-bit grayscale
//! PNG of region ids (0 = background), the color image the features come
//! from, and the region ids the mask contains.

use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::merge::{RegionFeatures, RegionMaskSet, RegionView};
use super::PartSegmentation;
use crate::error::{format_err, Error, Result};
use crate::uv::read_png;

pub fn write_parts(seg: &PartSegmentation) -> String {
    let mut s = String::with_capacity(seg.faces() * 3);
    for p in &seg.face_parts {
        s.push_str(&p.to_string());
        s.push('\n');
    }
    s
}

/// Parse a part list; ids are relabeled to `0..P` in order of appearance.
/// Blank lines are ignored.
pub fn read_parts(text: &str) -> Result<PartSegmentation> {
    let mut ids = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id = line.parse::<u32>().map_err(|e| format_err("parts", format!("line {}: {e}", n + 1)))?;
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(format_err("parts", "no face ids"));
    }
    Ok(PartSegmentation::from_face_ids(&ids))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarView {
    pub labels: String,
    pub image: String,
    pub regions: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSidecar {
    pub views: Vec<SidecarView>,
}

/// Region ids with bottom-up rows, matching the texture convention.
fn read_label_png(path: &Path) -> Result<(u32, u32, Vec<u32>)> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let mut labels = vec![0u32; (w * h) as usize];
    for (x, y, px) in img.enumerate_pixels() {
        labels[((h - 1 - y) * w + x) as usize] = px.0[0] as u32;
    }
    Ok((w, h, labels))
}

pub fn write_label_png(path: impl AsRef<Path>, view: &RegionView) -> Result<()> {
    let (w, h) = (view.width, view.height);
    if let Some(l) = view.labels.iter().find(|l| **l > u16::MAX as u32) {
        return Err(Error::InvalidInput(format!("region id {l} does not fit a 16-bit mask")));
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w, h, |x, y| Luma([view.labels[((h - 1 - y) * w + x) as usize] as u16]));
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Load every view of a sidecar (paths relative to the sidecar's folder)
/// and compute region features with `extractor`.
pub fn read_mask_set(sidecar: impl AsRef<Path>, extractor: &dyn RegionFeatures) -> Result<(MaskSidecar, RegionMaskSet)> {
    let sidecar = sidecar.as_ref();
    let text = std::fs::read_to_string(sidecar)?;
    let meta: MaskSidecar = serde_json::from_str(&text).map_err(|e| format_err("mask sidecar", e.to_string()))?;
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let mut views = Vec::with_capacity(meta.views.len());
    for (i, v) in meta.views.iter().enumerate() {
        let (w, h, labels) = read_label_png(&dir.join(&v.labels))?;
        let img = read_png(dir.join(&v.image))?;
        if (img.width, img.height) != (w, h) {
            return Err(Error::Shape(format!("view {i}: mask is {w}x{h}, image is {}x{}", img.width, img.height)));
        }
        let mut present: Vec<u32> = labels.iter().copied().filter(|l| *l != 0).collect();
        present.sort_unstable();
        present.dedup();
        let mut listed = v.regions.clone();
        listed.sort_unstable();
        if present != listed {
            return Err(format_err("mask sidecar", format!("view {i}: listed regions {listed:?} but mask has {present:?}")));
        }
        views.push(RegionView::from_image(&img, labels, extractor)?);
    }
    Ok((meta, RegionMaskSet { views }))
}

/// Write merged masks next to a new sidecar; color images are referenced
/// by the paths given in `images`.
pub fn write_mask_set(dir: impl AsRef<Path>, masks: &RegionMaskSet, images: &[String]) -> Result<MaskSidecar> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut meta = MaskSidecar::default();
    for (i, view) in masks.views.iter().enumerate() {
        let name = format!("mask{i}.png");
        write_label_png(dir.join(&name), view)?;
        meta.views.push(SidecarView {
            labels: name,
            image: images.get(i).cloned().unwrap_or_default(),
            regions: (1..=view.regions() as u32).collect(),
        });
    }
    let json = serde_json::to_string_pretty(&meta).map_err(|e| format_err("mask sidecar", e.to_string()))?;
    std::fs::write(dir.join("masks.json"), json)?;
    Ok(meta)
}
