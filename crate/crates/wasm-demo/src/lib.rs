//! Browser bindings for the static demo page in `www/`.
//!
//! Every function returns plain byte or float buffers so the page can draw
//! them straight into a canvas.

use std::cell::RefCell;

use wasm_bindgen::prelude::*;

use attrgrid::assets::{cube_asset, sphere_asset, Asset};
use attrgrid::dit::{toy_flow_benchmark, ToyFlowConfig};
use attrgrid::grid::{QueryOptions, Span};
use attrgrid::uv::{bake_position_map, bake_texture, dilate_texture, texture_to_rgba};

thread_local! {
    static SPHERE: RefCell<Option<((u32, u32), Asset)>> = const { RefCell::new(None) };
}

fn err(e: attrgrid::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn with_sphere<T>(resolution: u32, variant: u32, f: impl FnOnce(&Asset) -> T) -> Result<T, attrgrid::Error> {
    SPHERE.with(|cell| {
        let mut slot = cell.borrow_mut();
        if slot.as_ref().map(|(k, _)| *k) != Some((resolution, variant)) {
            *slot = Some(((resolution, variant), sphere_asset(resolution, 0.35, variant)?));
        }
        Ok(f(&slot.as_ref().unwrap().1))
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Cut a colored sphere grid with the plane `z = const` and return a
/// `size × size` RGBA image covering `[-0.5, 0.5]²`, top row first.
/// Pixels whose stencil touches no voxel are transparent; with
/// `renormalize` off, partially supported pixels fade towards black.
pub fn slice_rgba(resolution: u32, variant: u32, z: f64, size: u32, renormalize: bool) -> Result<Vec<u8>, attrgrid::Error> {
    let opts = QueryOptions { renormalize, ..QueryOptions::default() };
    let z = z.clamp(-0.5, 0.5);
    with_sphere(resolution, variant, |asset| {
        let grid = &asset.grid;
        let mut out = Vec::with_capacity((size * size * 4) as usize);
        for row in 0..size {
            let y = 0.5 - (row as f64 + 0.5) / size as f64;
            for col in 0..size {
                let x = -0.5 + (col as f64 + 0.5) / size as f64;
                let st = grid.stencil([x, y, z]);
                if st.entries.iter().all(Option::is_none) {
                    out.extend([0, 0, 0, 0]);
                    continue;
                }
                let v = grid.resolve(&st, &opts).values;
                out.extend([to_byte(v[0]), to_byte(v[1]), to_byte(v[2]), 255]);
            }
        }
        out
    })
}

/// Bake the color grid of a UV-mapped cube into a `size × size` texture and
/// return it as RGBA, top row first. Texels outside every UV chart are
/// transparent unless `dilate` passes grow the charts over them.
pub fn bake_rgba(resolution: u32, variant: u32, size: u32, dilate: u32) -> Result<Vec<u8>, attrgrid::Error> {
    let asset = cube_asset(resolution, 0.6, variant)?;
    let (posmap, _) = bake_position_map(&asset.mesh, size, size)?;
    let opts = QueryOptions { renormalize: true, ..QueryOptions::default() };
    let tex = bake_texture(&asset.grid, &posmap, Span::Color, &opts)?;
    Ok(texture_to_rgba(&dilate_texture(&tex, dilate as usize)).into_raw())
}

/// Train the two-mode flow toy for `steps` iterations and sample `samples`
/// points. Layout: `[err0, err1, balance, loss, x0, y0, x1, y1, ...]`.
pub fn toy_flow(steps: u32, samples: u32, seed: u64) -> Result<Vec<f64>, attrgrid::Error> {
    let cfg = ToyFlowConfig {
        hidden: 32,
        batch: 128,
        steps: steps as usize,
        samples: samples as usize,
        seed,
        ..ToyFlowConfig::default()
    };
    let r = toy_flow_benchmark(&cfg)?;
    let mut out = vec![r.mean_errors[0], r.mean_errors[1], r.balance, r.final_loss];
    out.extend(r.samples.iter().flatten());
    Ok(out)
}

#[wasm_bindgen(js_name = sliceRgba)]
pub fn slice_rgba_js(resolution: u32, variant: u32, z: f64, size: u32, renormalize: bool) -> Result<Vec<u8>, JsError> {
    slice_rgba(resolution, variant, z, size, renormalize).map_err(err)
}

#[wasm_bindgen(js_name = bakeRgba)]
pub fn bake_rgba_js(resolution: u32, variant: u32, size: u32, dilate: u32) -> Result<Vec<u8>, JsError> {
    bake_rgba(resolution, variant, size, dilate).map_err(err)
}

#[wasm_bindgen(js_name = toyFlow)]
pub fn toy_flow_js(steps: u32, samples: u32, seed: u32) -> Result<Vec<f64>, JsError> {
    toy_flow(steps, samples, seed as u64).map_err(err)
}
