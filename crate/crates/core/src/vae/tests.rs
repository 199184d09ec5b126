use rand::Rng;

use super::*;
use crate::assets::sphere_asset;
use crate::nn::grad_check;
use crate::pruning::{children, downsample_occupancy};
use crate::uv::TextureImage;

fn micro_cfg() -> VaeConfig {
    VaeConfig {
        resolution: 8,
        widths: [4, 6, 8],
        heads: 2,
        blocks: 1,
        latent_dim: 4,
        view_size: 12,
        ..VaeConfig::default()
    }
}

fn small_cfg() -> VaeConfig {
    VaeConfig { resolution: 16, widths: [8, 12, 16], heads: 2, blocks: 1, latent_dim: 8, view_size: 24, ..VaeConfig::default() }
}

#[test]
fn encoder_coordinate_contract() {
    let asset = sphere_asset(16, 0.3, 0).unwrap();
    let vae = Vae::new(small_cfg(), 1).unwrap();
    let lat = vae.encode(&asset.grid).unwrap();
    assert_eq!(lat.coords, downsample_occupancy(asset.grid.coords(), 8, 16).unwrap());
    assert_eq!(lat.resolution, 2);
    assert_eq!(lat.mu.len(), lat.len() * 8);
    // same occupancy, different attributes
    let other = sphere_asset(16, 0.3, 3).unwrap();
    let lat2 = vae.encode(&other.grid).unwrap();
    assert_eq!(lat.coords, lat2.coords);
    assert_ne!(lat.mu, lat2.mu);
    // determinism
    let again = Vae::new(small_cfg(), 1).unwrap().encode(&asset.grid).unwrap();
    assert_eq!(again, lat);
}

#[test]
fn encode_rejects_empty_and_mismatched() {
    let vae = Vae::new(small_cfg(), 1).unwrap();
    let empty = SparseAttributeGrid::new(16, ChannelLayout::color_only()).unwrap();
    assert!(matches!(vae.encode(&empty), Err(Error::EmptyInput(_))));
    let asset = sphere_asset(32, 0.3, 0).unwrap();
    assert!(vae.encode(&asset.grid).is_err());
}

#[test]
fn reparameterize_statistics() {
    let lat = LatentGrid {
        resolution: 1,
        coords: vec![VoxelCoord::new(0, 0, 0)],
        dim: 2,
        mu: vec![0.5, -1.0],
        logvar: vec![-1000.0, 0.8],
    };
    let mut rng = crate::seeded_rng(3);
    let mut xs = Vec::new();
    for _ in 0..10_000 {
        let z = reparameterize(&lat, &mut rng);
        assert!((z[0] - 0.5).abs() < 1e-5);
        xs.push(z[1]);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
    let want = (0.8f64 / 2.0).exp();
    assert!((sd - want).abs() / want < 0.05, "{sd} vs {want}");
    let a = reparameterize(&lat, &mut crate::seeded_rng(9));
    let b = reparameterize(&lat, &mut crate::seeded_rng(9));
    assert_eq!(a, b);
}

#[test]
fn kl_examples() {
    let mut lat = LatentGrid { resolution: 1, coords: vec![VoxelCoord::new(0, 0, 0)], dim: 3, mu: vec![0.0; 3], logvar: vec![0.0; 3] };
    assert_eq!(kl_loss(&lat), 0.0);
    lat.mu = vec![1.0; 3];
    assert_eq!(kl_loss(&lat), 0.5);
    lat.mu = vec![0.3, -1.2, 2.0];
    lat.logvar = vec![-0.5, 0.7, 0.1];
    let direct: f64 = [(0.3, -0.5), (-1.2, 0.7), (2.0, 0.1)]
        .iter()
        .map(|&(m, l): &(f64, f64)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum::<f64>()
        / 3.0;
    assert!((kl_loss(&lat) - direct).abs() < 1e-15);
}

#[test]
fn teacher_forced_decode_matches_occupancy() {
    let asset = sphere_asset(16, 0.3, 0).unwrap();
    let vae = Vae::new(small_cfg(), 2).unwrap();
    let lat = vae.encode(&asset.grid).unwrap();
    let pyr = OccupancyPyramid::build(asset.grid.coords(), 16, STAGES).unwrap();
    let dec = vae.decode(&lat.mu, &lat.coords, Some(&pyr)).unwrap();
    assert_eq!(dec.grid.coords(), asset.grid.coords());
    assert_eq!(dec.grid.channels(), 3);
    let plan = vae.decoder_plan(&pyr).unwrap();
    for (s, st) in plan.stages.iter().enumerate() {
        assert_eq!(dec.candidates[s], st.candidates);
    }
    let free = vae.decode(&lat.mu, &lat.coords, None).unwrap();
    // free-running shape audit: each stage's kept set is inside the previous stage's children
    let mut prev = lat.coords.clone();
    for (s, cands) in free.candidates.iter().enumerate() {
        assert_eq!(cands, &children(&prev));
        let kept: Vec<VoxelCoord> =
            cands.iter().zip(&free.logits[s]).filter(|(_, l)| **l >= 0.0).map(|(c, _)| *c).collect();
        prev = kept;
    }
    assert_eq!(free.grid.coords(), prev.as_slice());
    assert!(vae.decode(&lat.mu[1..], &lat.coords, Some(&pyr)).is_err());
}

#[test]
fn saturated_logits_reproduce_teacher_forcing() {
    let asset = sphere_asset(16, 0.3, 0).unwrap();
    let mut vae = Vae::new(small_cfg(), 2).unwrap();
    let lat = vae.encode(&asset.grid).unwrap();
    let pyr = OccupancyPyramid::build(asset.grid.coords(), 16, STAGES).unwrap();
    let forced = vae.decode(&lat.mu, &lat.coords, Some(&pyr)).unwrap();
    // on a full cube every candidate is kept, so a prune head saturated to
    // "keep" must reproduce the forced decode
    let full: Vec<VoxelCoord> = (0..16 * 16 * 16).map(|i| VoxelCoord::new(i / 256, (i / 16) % 16, i % 16)).collect();
    let cube = SparseAttributeGrid::from_entries(16, ChannelLayout::color_only(), full.iter().map(|&c| (c, vec![0.5; 3]))).unwrap();
    let lat = vae.encode(&cube).unwrap();
    let pyr_full = OccupancyPyramid::build(&full, 16, STAGES).unwrap();
    for st in vae.dec.stages.clone() {
        vae.store.get_mut(st.prune.w).iter_mut().for_each(|v| *v = 0.0);
        vae.store.get_mut(st.prune.b)[0] = 40.0;
    }
    let a = vae.decode(&lat.mu, &lat.coords, Some(&pyr_full)).unwrap();
    let b = vae.decode(&lat.mu, &lat.coords, None).unwrap();
    assert_eq!(a.grid, b.grid);
    assert!(!forced.grid.is_empty());
}

fn image(values: &[f64], mask: &[bool]) -> TextureImage {
    let mut img = TextureImage::new(mask.len() as u32, 1, 1);
    img.data = values.to_vec();
    img.mask = mask.to_vec();
    img
}

#[test]
fn loss_examples() {
    let lat0 = LatentGrid { resolution: 1, coords: vec![VoxelCoord::new(0, 0, 0)], dim: 2, mu: vec![0.0; 2], logvar: vec![0.0; 2] };
    let gt = vec![image(&[0.2, 0.4, 0.9], &[true, true, false])];
    let w = LossWeights::default();
    let perfect = vae_loss(&gt, &gt, &[60.0, -60.0], &[1.0, 0.0], &lat0, &w).unwrap();
    assert!(perfect.total < 1e-20);
    let shifted = vec![image(&[0.45, 0.65, 0.0], &[true, true, false])];
    let t = vae_loss(&shifted, &gt, &[60.0], &[1.0], &lat0, &w).unwrap();
    assert!((t.l1 - 0.25).abs() < 1e-15);
    assert!(vae_loss(&shifted, &[], &[], &[], &lat0, &w).is_err());
    // random micro case against a plain recomputation with the unsimplified BCE
    let lat = LatentGrid { resolution: 1, coords: vec![VoxelCoord::new(0, 0, 0)], dim: 2, mu: vec![0.4, -0.2], logvar: vec![0.3, -0.6] };
    let a = vec![image(&[0.1, 0.7], &[true, true])];
    let b = vec![image(&[0.3, 0.2], &[true, false])];
    let w = LossWeights { l1: 2.0, prune: 0.5, kl: 0.1, ..LossWeights::default() };
    let t = vae_loss(&a, &b, &[0.7, -1.1], &[1.0, 0.0], &lat, &w).unwrap();
    let p = |s: f64| 1.0 / (1.0 + (-s).exp());
    let bce = -((p(0.7)).ln() + (1.0 - p(-1.1)).ln()) / 2.0;
    let kl = (0.5 * (0.16 + 0.3f64.exp() - 1.0 - 0.3) + 0.5 * (0.04 + (-0.6f64).exp() - 1.0 + 0.6)) / 2.0;
    let want = 2.0 * 0.2 + 0.5 * bce + 0.1 * kl;
    assert!((t.total - want).abs() < 1e-14, "{} vs {want}", t.total);
}

#[test]
fn tape_loss_matches_numeric_loss() {
    let asset = sphere_asset(16, 0.3, 1).unwrap();
    let vae = Vae::new(small_cfg(), 4).unwrap();
    let plan = AssetPlan::new(&vae, &asset.grid, Some(&asset.mesh)).unwrap();
    let mut t = crate::nn::Tape::new(&vae.store);
    let g = loss_graph(&vae, &mut t, &plan, None, LossKind::Render).unwrap();
    // rebuild renders through the public grid path
    let lat = vae.encode(&asset.grid).unwrap();
    let dec = vae.decode(&lat.mu, &lat.coords, Some(&plan.decoder.pyramid)).unwrap();
    let mut recon = Vec::new();
    let mut gt = Vec::new();
    for cam in crate::render::OrthoCamera::canonical_views(24, 24) {
        let vpm = crate::render::render_position_map(&asset.mesh, &cam).unwrap();
        let o = crate::grid::QueryOptions::default();
        recon.push(crate::render::render_view(&dec.grid, &vpm, Span::Color, &o).unwrap());
        gt.push(crate::render::render_view(&asset.grid, &vpm, Span::Color, &o).unwrap());
    }
    let logits: Vec<f64> = dec.logits.concat();
    let terms = vae_loss(&recon, &gt, &logits, &plan.labels, &lat, &LossWeights::default()).unwrap();
    assert!((terms.total - t.scalar(g.total)).abs() < 1e-12, "{} vs {}", terms.total, t.scalar(g.total));
}

#[test]
fn micro_vae_gradient_check() {
    let asset = sphere_asset(8, 0.3, 0).unwrap();
    let mut vae = Vae::new(VaeConfig { logvar_init: -1.0, ..micro_cfg() }, 5).unwrap();
    let plan = AssetPlan::new(&vae, &asset.grid, Some(&asset.mesh)).unwrap();
    let mut rng = crate::seeded_rng(1);
    let eps: Vec<f64> = (0..plan.latent_len() * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cfg = vae.cfg.clone();
    let shadow = vae.clone();
    let rel = grad_check(&mut vae.store, |t| {
        // the closure sees the store being perturbed through the tape
        loss_graph(&shadow, t, &plan, Some(&eps), cfg.loss).unwrap().total
    });
    assert!(rel < 1e-4, "micro VAE relative gradient error {rel}");
}

#[test]
fn zero_gradient_step_only_decays() {
    let vae = Vae::new(small_cfg(), 1).unwrap();
    let before = vae.store.clone();
    let mut tr = VaeTrainer::new(vae, 0);
    let zeros: Vec<Vec<f64>> = before.ids().map(|id| vec![0.0; before.get(id).len()]).collect();
    tr.opt.step(&mut tr.vae.store, &zeros);
    let lw = tr.vae.cfg.lr * tr.vae.cfg.weight_decay;
    for id in before.ids() {
        for (a, b) in tr.vae.store.get(id).iter().zip(before.get(id)) {
            assert_eq!(*a, b - lw * b);
        }
    }
}

#[test]
fn identical_runs_identical_params() {
    let asset = sphere_asset(16, 0.3, 0).unwrap();
    let run = || {
        let vae = Vae::new(small_cfg(), 7).unwrap();
        let plan = AssetPlan::new(&vae, &asset.grid, Some(&asset.mesh)).unwrap();
        let mut tr = VaeTrainer::new(vae, 7);
        for _ in 0..3 {
            tr.train_step(&plan).unwrap();
        }
        tr.vae.store
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_decreases_over_fifty_steps() {
    let asset = sphere_asset(16, 0.3, 0).unwrap();
    let mut improved = 0;
    for seed in 0..10 {
        let vae = Vae::new(VaeConfig { lr: 1e-3, ..small_cfg() }, seed).unwrap();
        let plan = AssetPlan::new(&vae, &asset.grid, Some(&asset.mesh)).unwrap();
        let mut tr = VaeTrainer::new(vae, seed);
        let first = tr.train_step(&plan).unwrap().total;
        let mut last = first;
        for _ in 1..50 {
            last = tr.train_step(&plan).unwrap().total;
        }
        improved += usize::from(last < first);
    }
    assert!(improved >= 9, "{improved}/10 runs improved");
}

#[test]
fn checkpoint_round_trip() {
    let vae = Vae::new(small_cfg(), 3).unwrap();
    let mut bytes = Vec::new();
    vae.checkpoint_store().write_checkpoint(&mut bytes).unwrap();
    let back = Vae::from_store(&ParamStore::read_checkpoint(bytes.as_slice()).unwrap()).unwrap();
    let mut again = Vec::new();
    back.checkpoint_store().write_checkpoint(&mut again).unwrap();
    assert_eq!(bytes, again);
    assert_eq!(back.cfg.widths, vae.cfg.widths);
}
