//! Fast invariant checks across the modules, printed as a table.

use rand::Rng;

use attrgrid::dit::euler_sample;
use attrgrid::grid::{read_grid, write_grid, ChannelLayout, QueryOptions, QueryPoint, SparseAttributeGrid, VoxelCoord};
use attrgrid::mesh::TriMesh;
use attrgrid::nn::{grad_check, ParamStore};
use attrgrid::render::{render_position_map, OrthoCamera};
use attrgrid::segment::{cluster_labels, merge_view, min_cost_assignment, miou, PartSegmentation, RegionView};
use attrgrid::uv::{read_posmap, write_posmap};
use attrgrid::{seeded_rng, Result};

type Check = fn() -> Result<bool>;

const CHECKS: &[(&str, Check)] = &[
    ("trilinear partition of unity", partition_of_unity),
    ("trilinear affine reproduction", affine_reproduction),
    ("trilinear lattice-site collapse", lattice_collapse),
    ("grid file round trip", grid_round_trip),
    ("position map file round trip", posmap_round_trip),
    ("checkpoint file round trip", checkpoint_round_trip),
    ("malformed headers rejected", malformed_headers),
    ("autodiff gradient check", autodiff),
    ("euler constant field exact", constant_field),
    ("guidance 1 equals conditional path", guidance_identity),
    ("region merge chain", merge_chain),
    ("cluster count monotone in eps", cluster_monotone),
    ("assignment matches brute force", assignment),
    ("mIoU identity and relabeling", miou_identity),
];

/// Run every check; true iff all pass.
pub fn run() -> bool {
    let mut ok = true;
    for (name, check) in CHECKS {
        let (status, note) = match check() {
            Ok(true) => ("pass", String::new()),
            Ok(false) => ("FAIL", String::new()),
            Err(e) => ("FAIL", format!("  ({e})")),
        };
        ok &= status == "pass";
        println!("{status}  {name}{note}");
    }
    println!("{}", if ok { "all checks passed" } else { "some checks failed" });
    ok
}

fn full_grid(res: u32, f: impl Fn([f64; 3]) -> f64) -> Result<SparseAttributeGrid> {
    let entries = (0..res).flat_map(|x| (0..res).flat_map(move |y| (0..res).map(move |z| VoxelCoord { x, y, z })));
    let layout = ChannelLayout::new(0, 0, 0, 1);
    SparseAttributeGrid::from_entries(res, layout, entries.map(|c| (c, vec![f(c.center(res))])))
}

fn partition_of_unity() -> Result<bool> {
    let g = full_grid(8, |_| 1.0)?;
    let mut r = seeded_rng(1);
    Ok((0..1000).all(|_| {
        let p: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.5..0.5));
        (g.stencil(p).weights.iter().sum::<f64>() - 1.0).abs() < 1e-12
    }))
}

fn affine_reproduction() -> Result<bool> {
    let f = |p: [f64; 3]| 0.3 + 1.2 * p[0] - 0.7 * p[1] + 2.0 * p[2];
    let g = full_grid(8, f)?;
    let mut r = seeded_rng(2);
    // Inside the hull of voxel centers of the [-0.5, 0.5]^3 domain.
    let (lo, hi) = (-0.5 + 0.5 / 8.0, 0.5 - 0.5 / 8.0);
    for _ in 0..1000 {
        let p: [f64; 3] = std::array::from_fn(|_| r.random_range(lo..hi));
        let v = g.trilinear_query(&QueryPoint::new(p)?, &QueryOptions::default()).values[0];
        if (v - f(p)).abs() > 1e-9 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn lattice_collapse() -> Result<bool> {
    let g = full_grid(8, |p| p[0] * 3.0 + p[1] * p[2])?;
    for (c, v) in g.iter() {
        let q = g.trilinear_query(&QueryPoint::new(c.center(8))?, &QueryOptions::default());
        if q.values[0] != v[0] {
            return Ok(false);
        }
    }
    Ok(true)
}

fn grid_round_trip() -> Result<bool> {
    let g = full_grid(4, |p| p[0] - p[2])?;
    let mut a = Vec::new();
    write_grid(&mut a, &g)?;
    let back = read_grid(a.as_slice())?;
    let mut b = Vec::new();
    write_grid(&mut b, &back)?;
    Ok(a == b)
}

fn posmap_round_trip() -> Result<bool> {
    let cam = OrthoCamera::from_view("+z", 16, 16)?;
    let map = render_position_map(&TriMesh::icosphere(0.3, 1), &cam)?;
    let mut a = Vec::new();
    write_posmap(&mut a, &map)?;
    let mut b = Vec::new();
    write_posmap(&mut b, &read_posmap(a.as_slice())?)?;
    Ok(a == b)
}

fn checkpoint_round_trip() -> Result<bool> {
    let mut s = ParamStore::new();
    s.add_uniform("w", &[3, 4], 3, &mut seeded_rng(3));
    s.add_zeros("b", &[4]);
    let mut a = Vec::new();
    s.write_checkpoint(&mut a)?;
    let mut b = Vec::new();
    ParamStore::read_checkpoint(a.as_slice())?.write_checkpoint(&mut b)?;
    Ok(a == b)
}

fn malformed_headers() -> Result<bool> {
    let bad: &[u8] = b"XXXX\0\0\0\0\0\0\0\0";
    Ok(read_grid(bad).is_err() && read_posmap(bad).is_err() && ParamStore::read_checkpoint(bad).is_err())
}

fn autodiff() -> Result<bool> {
    let mut s = ParamStore::new();
    let mut r = seeded_rng(4);
    let w = s.add_uniform("w", &[3, 2], 3, &mut r);
    let x = s.add_uniform("x", &[4, 3], 3, &mut r);
    let err = grad_check(&mut s, |t| {
        let (x, w) = (t.param(x), t.param(w));
        let h = t.matmul(x, w);
        let h = t.gelu(h);
        let h = t.layer_norm(h, 1e-5);
        let h = t.softmax(h);
        let h = t.square(h);
        t.sum(h)
    });
    Ok(err < 1e-4)
}

fn constant_field() -> Result<bool> {
    let x1 = [0.3, -1.7, 2.5];
    let c = [0.25, 1.5, -0.125];
    for steps in [1, 7, 15, 40] {
        let out = euler_sample(&x1, steps, 3.0, |_, _, _| Ok(c.to_vec()))?;
        if out.iter().zip(x1.iter().zip(&c)).any(|(o, (x, c))| *o != x - c) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn guidance_identity() -> Result<bool> {
    let field = |x: &[f64], t: f64, _: bool| -> Result<Vec<f64>> { Ok(x.iter().map(|v| v.sin() * t + 0.1).collect()) };
    let x1 = [0.4, -0.9];
    let guided = euler_sample(&x1, 15, 1.0, |x, t, cond| {
        if !cond {
            return Ok(vec![f64::NAN; x.len()]);
        }
        field(x, t, cond)
    })?;
    let plain = euler_sample(&x1, 15, 1.0, field)?;
    Ok(guided == plain)
}

fn merge_chain() -> Result<bool> {
    let v = RegionView::new(3, 1, vec![1, 2, 3], vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]])?;
    Ok(merge_view(&v, 0.9).labels == [1, 1, 2])
}

fn cluster_monotone() -> Result<bool> {
    let mut r = seeded_rng(5);
    let labels: Vec<[f64; 3]> = (0..50).map(|_| std::array::from_fn(|_| r.random())).collect();
    let mut last = usize::MAX;
    for eps in [0.02, 0.05, 0.1, 0.2, 0.4, 1.0, 2.0] {
        let parts = cluster_labels(&labels, eps)?.parts;
        if parts > last {
            return Ok(false);
        }
        last = parts;
    }
    Ok(last == 1)
}

fn assignment() -> Result<bool> {
    let mut r = seeded_rng(6);
    for _ in 0..20 {
        let cost: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let total = |a: &[usize]| a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
        let mut best = f64::INFINITY;
        for code in 0..256usize {
            let p: [usize; 4] = std::array::from_fn(|i| (code >> (2 * i)) & 3);
            if (0..4).all(|k| p.contains(&k)) {
                best = best.min(total(&p));
            }
        }
        if (total(&min_cost_assignment(&cost)) - best).abs() > 1e-12 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn miou_identity() -> Result<bool> {
    let areas = [1.0, 2.0, 0.5, 1.5, 1.0];
    let a = PartSegmentation::from_face_ids(&[0, 0, 1, 2, 2]);
    let b = PartSegmentation::from_face_ids(&[7, 7, 3, 9, 9]);
    let c = PartSegmentation::from_face_ids(&[0, 0, 0, 1, 1]);
    Ok(miou(&a, &b, &areas)? == 1.0 && miou(&a, &c, &areas)? == miou(&b, &c, &areas)?)
}
