use std::cell::Cell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::assets::sphere_asset;
use crate::grid::{QueryOptions, Span, VoxelCoord};
use crate::nn::{grad_check, Linear, MultiHeadAttention, ParamStore};
use crate::render::{render_position_map, render_view, OrthoCamera};
use crate::uv::TextureImage;
use crate::vae::{Vae, VaeConfig};

fn uniform(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn micro_cfg() -> DitConfig {
    DitConfig { latent_dim: 3, width: 12, heads: 2, blocks: 1, window: 2, ..DitConfig::default() }
}

fn micro_coords() -> Vec<VoxelCoord> {
    vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(0, 1, 0), VoxelCoord::new(2, 1, 3), VoxelCoord::new(3, 3, 3)]
}

fn micro_cond(r: &mut ChaCha8Rng, cfg: &DitConfig) -> ConditionBundle {
    let sparse_coords = vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(2, 1, 3)];
    ConditionBundle {
        sparse: uniform(r, sparse_coords.len() * cfg.latent_dim),
        sparse_coords,
        latent_dim: cfg.latent_dim,
        global: uniform(r, 6 * cfg.global_dim),
        global_tokens: 6,
        global_dim: cfg.global_dim,
        drop_sparse: false,
        drop_global: false,
    }
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let mut r = crate::seeded_rng(1);
    let x0 = uniform(&mut r, 40);
    let eps = uniform(&mut r, 40);
    assert_eq!(rf_interpolate(&x0, &eps, 0.0).unwrap(), x0);
    assert_eq!(rf_interpolate(&x0, &eps, 1.0).unwrap(), eps);
    let mid = rf_interpolate(&x0, &eps, 0.5).unwrap();
    for i in 0..40 {
        assert!((mid[i] - (x0[i] + eps[i]) / 2.0).abs() < 1e-15);
    }
    assert!(rf_interpolate(&x0, &eps[..39], 0.5).is_err());
    assert!(rf_interpolate(&x0, &eps, 1.5).is_err());
}

#[test]
fn velocity_target_examples() {
    let mut r = crate::seeded_rng(2);
    let x0 = uniform(&mut r, 30);
    let eps = uniform(&mut r, 30);
    assert!(rf_target(&x0, &x0).unwrap().iter().all(|v| *v == 0.0));
    let neg: Vec<f64> = x0.iter().map(|v| -v).collect();
    assert_eq!(rf_target(&x0, &vec![0.0; 30]).unwrap(), neg);
    let v = rf_target(&x0, &eps).unwrap();
    for i in 0..30 {
        assert_eq!(v[i], eps[i] - x0[i]);
    }
    assert!(rf_target(&x0, &eps[..3]).is_err());
}

#[test]
fn drop_rate_matches_probability() {
    let mut r = crate::seeded_rng(3);
    let hits = (0..10_000).filter(|_| draw_drop(&mut r, 0.1)).count();
    let rate = hits as f64 / 1e4;
    assert!((rate - 0.1).abs() <= 0.01, "rate {rate}");
    assert!((0..1000).all(|_| !draw_drop(&mut r, 0.0)));
    assert!((0..1000).all(|_| draw_drop(&mut r, 1.0)));
}

#[test]
fn constant_field_is_integrated_exactly() {
    let mut r = crate::seeded_rng(4);
    let x1 = uniform(&mut r, 25);
    let c: Vec<f64> = uniform(&mut r, 25).iter().map(|v| v * 3.7).collect();
    let expect: Vec<f64> = x1.iter().zip(&c).map(|(a, b)| a - b).collect();
    for steps in 1..=40 {
        for g in [1.0, 3.0] {
            let out = euler_sample(&x1, steps, g, |_, _, _| Ok(c.clone())).unwrap();
            assert_eq!(out, expect, "steps {steps} guidance {g}");
        }
    }
}

#[test]
fn linear_flow_recovers_data_in_one_step() {
    let mut r = crate::seeded_rng(5);
    let x0 = uniform(&mut r, 16);
    let x1 = uniform(&mut r, 16);
    let v = rf_target(&x0, &x1).unwrap();
    let out = euler_sample(&x1, 1, 1.0, |_, _, _| Ok(v.clone())).unwrap();
    for i in 0..16 {
        assert!((out[i] - x0[i]).abs() < 1e-6);
    }
}

#[test]
fn unit_guidance_never_queries_the_null_path() {
    let mut r = crate::seeded_rng(6);
    let x1 = uniform(&mut r, 8);
    let field = |x: &[f64], t: f64| x.iter().map(|v| v.sin() * t + 0.3).collect::<Vec<f64>>();
    let null_calls = Cell::new(0);
    let guided = euler_sample(&x1, 7, 1.0, |x, t, c| {
        if !c {
            null_calls.set(null_calls.get() + 1);
            return Ok(vec![f64::NAN; x.len()]);
        }
        Ok(field(x, t))
    })
    .unwrap();
    let cond_only = euler_sample(&x1, 7, 1.0, |x, t, _| Ok(field(x, t))).unwrap();
    assert_eq!(null_calls.get(), 0);
    assert_eq!(guided, cond_only);
    assert!(euler_sample(&x1, 0, 1.0, |x, t, _| Ok(field(x, t))).is_err());
}

#[test]
fn guidance_mixes_conditional_and_null() {
    let x1 = vec![0.0; 2];
    let out = euler_sample(&x1, 1, 3.0, |_, _, c| Ok(if c { vec![1.0, 2.0] } else { vec![0.5, 0.0] })).unwrap();
    // v = 0.5 + 3 (1 - 0.5) = 2, v = 0 + 3 * 2 = 6.
    assert_eq!(out, vec![-2.0, -6.0]);
}

#[test]
fn model_unit_guidance_matches_conditional_velocity() {
    let cfg = micro_cfg();
    let dit = Dit::new(cfg.clone(), 7).unwrap();
    let mut r = crate::seeded_rng(7);
    let cond = micro_cond(&mut r, &cfg);
    let coords = micro_coords();
    let a = sample(&dit, &coords, &cond, 5, 1.0, &mut crate::seeded_rng(70)).unwrap();
    let mut rng = crate::seeded_rng(70);
    let x1: Vec<f64> = (0..coords.len() * 3).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let b = euler_sample(&x1, 5, 1.0, |x, t, _| dit.velocity(x, &coords, t, &cond)).unwrap();
    assert_eq!(a, b);
    let c = sample(&dit, &coords, &cond, 5, 3.0, &mut crate::seeded_rng(71)).unwrap();
    let d = sample(&dit, &coords, &cond, 5, 3.0, &mut crate::seeded_rng(71)).unwrap();
    assert_eq!(c, d);
    assert_ne!(a, c);
}

#[test]
fn zero_output_projection_gives_zero_velocity() {
    let cfg = micro_cfg();
    let mut dit = Dit::new(cfg.clone(), 8).unwrap();
    dit.store.get_mut(dit.out.w).fill(0.0);
    dit.store.get_mut(dit.out.b).fill(0.0);
    let mut r = crate::seeded_rng(8);
    let cond = micro_cond(&mut r, &cfg);
    let coords = micro_coords();
    let v = dit.velocity(&uniform(&mut r, 12), &coords, 0.3, &cond).unwrap();
    assert!(v.iter().all(|x| *x == 0.0));
}

#[test]
fn null_path_is_well_defined() {
    let cfg = micro_cfg();
    let dit = Dit::new(cfg.clone(), 9).unwrap();
    let mut r = crate::seeded_rng(9);
    let cond = micro_cond(&mut r, &cfg);
    let coords = micro_coords();
    let x = uniform(&mut r, 12);
    let vn = dit.velocity(&x, &coords, 0.6, &cond.dropped()).unwrap();
    let vc = dit.velocity(&x, &coords, 0.6, &cond).unwrap();
    assert!(vn.iter().all(|v| v.is_finite()));
    assert_ne!(vn, vc);
    // Without any sparse tokens the sparse branch falls back to its null token.
    let empty = ConditionBundle { sparse_coords: vec![], sparse: vec![], ..cond.clone() };
    let half = ConditionBundle { drop_sparse: true, ..cond.clone() };
    assert_eq!(dit.velocity(&x, &coords, 0.6, &empty).unwrap(), dit.velocity(&x, &coords, 0.6, &half).unwrap());
    assert!(dit.velocity(&x[..9], &coords, 0.6, &cond).is_err());
}

fn dense_mha(s: &ParamStore, a: &MultiHeadAttention, x: &[f64], nq: usize, ctx: &[f64], nk: usize) -> Vec<f64> {
    let lin = |l: &Linear, inp: &[f64], n: usize| -> Vec<f64> {
        let (w, b) = (s.get(l.w), s.get(l.b));
        let mut out = vec![0.0; n * l.d_out];
        for i in 0..n {
            for j in 0..l.d_out {
                out[i * l.d_out + j] = b[j] + (0..l.d_in).map(|k| inp[i * l.d_in + k] * w[k * l.d_out + j]).sum::<f64>();
            }
        }
        out
    };
    let d = a.q.d_out;
    let hd = d / a.heads;
    let (q, k, v) = (lin(&a.q, x, nq), lin(&a.k, ctx, nk), lin(&a.v, ctx, nk));
    let mut heads = vec![0.0; nq * d];
    for h in 0..a.heads {
        for i in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|j| (0..hd).map(|c| q[i * d + h * hd + c] * k[j * d + h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..nk {
                for c in 0..hd {
                    heads[i * d + h * hd + c] += e[j] / z * v[j * d + h * hd + c];
                }
            }
        }
    }
    lin(&a.o, &heads, nq)
}

#[test]
fn hybrid_cross_attention_is_the_sum_of_its_branches() {
    let cfg = micro_cfg();
    let dit = Dit::new(cfg.clone(), 10).unwrap();
    let b = dit.blocks[0];
    let mut r = crate::seeded_rng(10);
    let (nq, ns, ng, d) = (5, 3, 7, cfg.width);
    let (h, s, g) = (uniform(&mut r, nq * d), uniform(&mut r, ns * d), uniform(&mut r, ng * d));

    let mut t = Tape::new(&dit.store);
    let (hv, sv, gv) = (t.constant(h.clone(), &[nq, d]), t.constant(s.clone(), &[ns, d]), t.constant(g.clone(), &[ng, d]));
    let out = b.hybrid_cross(&mut t, hv, sv, gv);
    let both = t.value(out).to_vec();

    let branch = |a: &MultiHeadAttention, ctx: &[f64], nk: usize| {
        let mut t = Tape::new(&dit.store);
        let hv = t.constant(h.clone(), &[nq, d]);
        let cv = t.constant(ctx.to_vec(), &[nk, d]);
        let o = a.forward(&mut t, hv, cv);
        t.value(o).to_vec()
    };
    let a = branch(&b.sparse_attn, &s, ns);
    let c = branch(&b.global_attn, &g, ng);
    let sum: Vec<f64> = a.iter().zip(&c).map(|(x, y)| x + y).collect();
    assert_eq!(both, sum);

    let oracle: Vec<f64> = dense_mha(&dit.store, &b.sparse_attn, &h, nq, &s, ns)
        .iter()
        .zip(dense_mha(&dit.store, &b.global_attn, &h, nq, &g, ng))
        .map(|(x, y)| x + y)
        .collect();
    for (x, y) in both.iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn forward_gradients_match_finite_differences() {
    let cfg = micro_cfg();
    let mut dit = Dit::new(cfg.clone(), 11).unwrap();
    let mut r = crate::seeded_rng(11);
    let cond = micro_cond(&mut r, &cfg);
    let coords = micro_coords();
    let x = uniform(&mut r, 12);
    let target = uniform(&mut r, 12);
    let model = dit.clone();
    let err = grad_check(&mut dit.store, |t| {
        let xv = t.constant(x.clone(), &[4, 3]);
        let v = model.forward(t, xv, &coords, 0.4, &cond).unwrap();
        let tv = t.constant(target.clone(), &[4, 3]);
        let d = t.sub(v, tv);
        let sq = t.square(d);
        t.mean(sq)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let cfg = DitConfig { lr: 3e-3, ..micro_cfg() };
    let mut r = crate::seeded_rng(12);
    let batch: Vec<DitSample> = (0..2)
        .map(|_| DitSample { coords: micro_coords(), x0: uniform(&mut r, 12), cond: micro_cond(&mut r, &cfg) })
        .collect();
    let run = || {
        let mut tr = DitTrainer::new(Dit::new(cfg.clone(), 12).unwrap(), 12);
        let before = eval_loss(&tr.model, &batch, 8, 1).unwrap();
        for _ in 0..150 {
            tr.train_step(&batch).unwrap();
        }
        (before, eval_loss(&tr.model, &batch, 8, 1).unwrap(), tr.model.store.clone())
    };
    let (before, after, store) = run();
    assert!(after < 0.8 * before, "{before} -> {after}");
    let (_, after2, store2) = run();
    assert_eq!(after, after2);
    for id in store.ids() {
        assert_eq!(store.get(id), store2.get(id));
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = DitConfig { use_sparse: false, ..micro_cfg() };
    let dit = Dit::new(cfg.clone(), 13).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dit.txckpt");
    dit.save(&path).unwrap();
    let back = Dit::load(&path).unwrap();
    assert_eq!(back.cfg.width, cfg.width);
    assert!(!back.cfg.use_sparse);
    for id in dit.store.ids() {
        let a: Vec<f32> = dit.store.get(id).iter().map(|v| *v as f32).collect();
        let b: Vec<f32> = back.store.get(id).iter().map(|v| *v as f32).collect();
        assert_eq!(a, b);
    }
}

fn small_vae() -> Vae {
    let cfg = VaeConfig { resolution: 16, widths: [4, 6, 8], heads: 2, blocks: 1, latent_dim: 4, ..VaeConfig::default() };
    Vae::new(cfg, 3).unwrap()
}

#[test]
fn condition_tokens_live_on_the_latent_support() {
    let vae = small_vae();
    let asset = sphere_asset(16, 0.3, 1).unwrap();
    let cam = OrthoCamera::from_view("+z", 32, 32).unwrap();
    let vpm = render_position_map(&asset.mesh, &cam).unwrap();
    let front = render_view(&asset.grid, &vpm, Span::Color, &QueryOptions::default()).unwrap();
    let ex = PatchMeanExtractor::default();
    let cond = make_condition(&front, &vpm, Some(asset.grid.coords()), &vae, &ex).unwrap();
    let latent = vae.encode(&asset.grid).unwrap();
    assert!(cond.sparse_len() > 0);
    assert!(cond.sparse_coords.iter().all(|c| latent.coords.binary_search(c).is_ok()));
    assert_eq!(cond.sparse.len(), cond.sparse_len() * 4);
    assert_eq!((cond.global_tokens, cond.global_dim, cond.global.len()), (64, 5, 320));

    let two = ConditionBundle::concat(&[cond.clone(), cond.clone()]).unwrap();
    let n = cond.sparse_len();
    assert_eq!(&two.sparse_coords[..n], &two.sparse_coords[n..]);
    assert_eq!(&two.sparse[..n * 4], &two.sparse[n * 4..]);
    assert_eq!(two.global, cond.global);

    let blank = TextureImage::new(32, 32, 3);
    let empty = make_condition(&blank, &vpm, None, &vae, &ex).unwrap();
    assert_eq!(empty.sparse_len(), 0);
    assert_eq!(empty.global.len(), 320);
}

#[test]
fn patch_extractor_cells() {
    let mut img = TextureImage::new(16, 16, 3);
    for j in 0..16 {
        for i in 0..16 {
            let idx = j * 16 + i;
            img.mask[idx] = i < 8;
            img.texel_mut(idx).copy_from_slice(&[1.0, 0.5, 0.25]);
        }
    }
    let f = PatchMeanExtractor { cells: 2 }.extract(&img);
    assert_eq!(f, vec![1.0, 0.5, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.75, 0.25, 1.0, 0.5, 0.25, 0.25, 0.75, 0.0, 0.0, 0.0, 0.75, 0.75]);
}

#[test]
fn toy_flow_negative_control_fails() {
    let rep = toy_flow_benchmark(&ToyFlowConfig { steps: 0, ..ToyFlowConfig::default() }).unwrap();
    assert!(!rep.within(0.1), "{rep:?}");
}

#[test]
fn config_rejects_bad_values() {
    assert!(DitConfig { width: 10, heads: 4, ..DitConfig::default() }.validate().is_err());
    assert!(DitConfig { drop_prob: 1.5, ..DitConfig::default() }.validate().is_err());
    assert!(DitConfig::from_toml("nope = 1").is_err());
    let c = DitConfig::from_toml("use_sparse = false\nsteps = 10").unwrap();
    assert!(!c.use_sparse);
    assert_eq!(c.steps, 10);
}
