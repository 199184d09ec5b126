//! Flow-matching training with condition dropout, and the sparse-condition
//! ablation on a handful of procedural assets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{make_condition, ConditionBundle, Dit, DitConfig, PatchMeanExtractor};
use crate::assets::{sphere_asset, Asset};
use crate::error::{Error, Result};
use crate::grid::{QueryOptions, Span, VoxelCoord};
use crate::nn::{AdamW, Tape, Var};
use crate::render::{render_position_map, render_view, OrthoCamera};
use crate::vae::{AssetPlan, Vae, VaeConfig, VaeTrainer};

/// One training example: clean latent tokens and their condition.
#[derive(Clone, Debug, PartialEq)]
pub struct DitSample {
    pub coords: Vec<VoxelCoord>,
    pub x0: Vec<f64>,
    pub cond: ConditionBundle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DitLossRecord {
    pub step: usize,
    pub loss: f64,
    /// Samples in the batch whose condition was replaced by null tokens.
    pub dropped: usize,
}

/// Bernoulli draw deciding whether a sample trains unconditionally.
pub fn draw_drop<R: Rng>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Per-sample `mean((f(x_t, t) - (eps - x0))^2)` on the tape.
fn sample_loss(model: &Dit, t: &mut Tape, s: &DitSample, time: f64, eps: &[f64], cond: &ConditionBundle) -> Result<Var> {
    let dl = model.cfg.latent_dim;
    let n = s.coords.len();
    if s.x0.len() != n * dl {
        return Err(Error::Shape(format!("latent has {} values, expected {n} x {dl}", s.x0.len())));
    }
    let xt = super::rf_interpolate(&s.x0, eps, time)?;
    let v = super::rf_target(&s.x0, eps)?;
    let xt = t.constant(xt, &[n, dl]);
    let pred = model.forward(t, xt, &s.coords, time, cond)?;
    let v = t.constant(v, &[n, dl]);
    let d = t.sub(pred, v);
    let sq = t.square(d);
    Ok(t.mean(sq))
}

pub struct DitTrainer {
    pub model: Dit,
    pub opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl DitTrainer {
    pub fn new(model: Dit, seed: u64) -> Self {
        let opt = AdamW::new(&model.store, model.cfg.lr, model.cfg.weight_decay);
        Self { model, opt, rng: crate::seeded_rng(seed ^ 0xd17_0001), step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One AdamW step on the batch-mean flow-matching loss. Each sample
    /// draws its own `t ~ U[0, 1)`, noise, and condition dropout.
    pub fn train_step(&mut self, batch: &[DitSample]) -> Result<DitLossRecord> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch"));
        }
        let dl = self.model.cfg.latent_dim;
        let p = self.model.cfg.drop_prob;
        let mut dropped = 0;
        let (loss, grads) = {
            let mut t = Tape::new(&self.model.store);
            let mut terms = Vec::with_capacity(batch.len());
            for s in batch {
                let time: f64 = self.rng.random();
                let eps: Vec<f64> = (0..s.coords.len() * dl).map(|_| self.rng.sample(StandardNormal)).collect();
                let cond = if draw_drop(&mut self.rng, p) {
                    dropped += 1;
                    s.cond.dropped()
                } else {
                    s.cond.clone()
                };
                terms.push(sample_loss(&self.model, &mut t, s, time, &eps, &cond)?);
            }
            let mut sum = terms[0];
            for &v in &terms[1..] {
                sum = t.add(sum, v);
            }
            let loss = t.scale(sum, 1.0 / batch.len() as f64);
            let value = t.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite { step: self.step, detail: "flow-matching loss".into() });
            }
            (value, t.backward(loss).into_params(&t))
        };
        self.opt.step(&mut self.model.store, &grads);
        let rec = DitLossRecord { step: self.step, loss, dropped };
        self.step += 1;
        Ok(rec)
    }
}

/// Conditional flow-matching loss averaged over `draws` fixed `(t, eps)`
/// pairs per sample (stratified `t`), without condition dropout.
pub fn eval_loss(model: &Dit, batch: &[DitSample], draws: usize, seed: u64) -> Result<f64> {
    let mut rng = crate::seeded_rng(seed);
    let dl = model.cfg.latent_dim;
    let mut total = 0.0;
    for s in batch {
        for k in 0..draws {
            let time = (k as f64 + rng.random::<f64>()) / draws as f64;
            let eps: Vec<f64> = (0..s.coords.len() * dl).map(|_| rng.sample(StandardNormal)).collect();
            let mut t = Tape::new(&model.store);
            let l = sample_loss(model, &mut t, s, time, &eps, &s.cond)?;
            total += t.scalar(l);
        }
    }
    Ok(total / (batch.len() * draws).max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub assets: u32,
    pub resolution: u32,
    pub radius: f64,
    pub image_size: u32,
    /// Small color VAE fitted to the assets before encoding them.
    pub vae: VaeConfig,
    pub vae_steps: usize,
    pub dit: DitConfig,
    pub steps: usize,
    pub eval_draws: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            assets: 5,
            resolution: 32,
            radius: 0.17,
            image_size: 64,
            vae: VaeConfig {
                widths: [16, 32, 48],
                blocks: 1,
                latent_dim: 8,
                lr: 1e-3,
                view_size: 32,
                ..VaeConfig::default()
            },
            vae_steps: 300,
            dit: DitConfig { latent_dim: 8, width: 48, lr: 1e-3, drop_prob: 0.1, ..DitConfig::default() },
            steps: 400,
            eval_draws: 16,
        }
    }
}

/// Final losses of the paired runs for one seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationOutcome {
    pub with_sparse: f64,
    pub without_sparse: f64,
}

/// Sphere assets with distinct color fields. A small color VAE is fitted to
/// them (round robin, `vae_steps` in total) so its latents carry the color
/// differences. Targets are the posterior means of the full grids and
/// conditions come from the `+z` render projected back into the grid; both
/// are divided by the RMS of the targets so the flow sees unit-scale data.
pub fn ablation_assets(cfg: &AblationConfig, seed: u64) -> Result<Vec<DitSample>> {
    if cfg.vae.latent_dim != cfg.dit.latent_dim {
        return Err(Error::Config("VAE and DiT latent widths differ".into()));
    }
    let vae_cfg = VaeConfig { resolution: cfg.resolution, ..cfg.vae.clone() };
    let assets = (0..cfg.assets).map(|v| sphere_asset(cfg.resolution, cfg.radius, v)).collect::<Result<Vec<_>>>()?;
    let mut trainer = VaeTrainer::new(Vae::new(vae_cfg, seed)?, seed);
    let plans = assets
        .iter()
        .map(|a| AssetPlan::new(&trainer.vae, &a.grid, Some(&a.mesh)))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..cfg.vae_steps {
        trainer.train_step(&plans[i % plans.len()])?;
    }
    let mut samples = dit_samples(&trainer.vae, &assets, cfg.image_size)?;
    let (sq, n) = samples.iter().fold((0.0, 0usize), |(a, n), s| (a + s.x0.iter().map(|v| v * v).sum::<f64>(), n + s.x0.len()));
    let scale = 1.0 / (sq / n.max(1) as f64).sqrt().max(1e-12);
    for s in &mut samples {
        s.x0.iter_mut().chain(s.cond.sparse.iter_mut()).for_each(|v| *v *= scale);
    }
    Ok(samples)
}

/// Training pairs for colored assets: targets are the VAE posterior means
/// of the full grids, conditions come from the `+z` render projected back
/// into the grid.
pub fn dit_samples(vae: &Vae, assets: &[Asset], image_size: u32) -> Result<Vec<DitSample>> {
    let cam = OrthoCamera::from_view("+z", image_size, image_size)?;
    let extractor = PatchMeanExtractor::default();
    assets
        .iter()
        .map(|asset| {
            let lat = vae.encode(&asset.grid)?;
            let vpm = render_position_map(&asset.mesh, &cam)?;
            let front = render_view(&asset.grid, &vpm, Span::Color, &QueryOptions::default())?;
            let cond = make_condition(&front, &vpm, Some(asset.grid.coords()), vae, &extractor)?;
            Ok(DitSample { coords: lat.coords, x0: lat.mu, cond })
        })
        .collect()
}

/// Train the DiT with and without the sparse branch on the same assets and
/// report the final conditional loss of each.
pub fn sparse_condition_ablation(cfg: &AblationConfig, seed: u64) -> Result<AblationOutcome> {
    let data = ablation_assets(cfg, seed)?;
    let run = |use_sparse: bool| -> Result<f64> {
        let dcfg = DitConfig { use_sparse, ..cfg.dit.clone() };
        let mut tr = DitTrainer::new(Dit::new(dcfg, seed)?, seed);
        for _ in 0..cfg.steps {
            tr.train_step(&data)?;
        }
        eval_loss(&tr.model, &data, cfg.eval_draws, seed ^ 0xe7a1)
    };
    Ok(AblationOutcome { with_sparse: run(true)?, without_sparse: run(false)? })
}
