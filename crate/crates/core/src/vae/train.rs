//! Losses, per-asset training plans and the AdamW training loop.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DecodeVars, DecoderPlan, EncoderPlan, LatentGrid, LossKind, Vae};
use crate::error::{Error, Result};
use crate::grid::SparseAttributeGrid;
use crate::mesh::TriMesh;
use crate::nn::{AdamW, SparseRows, Tape, Var};
use crate::pruning::OccupancyPyramid;
use crate::render::{render_position_map, OrthoCamera, PixelStencil};
use crate::uv::TextureImage;

/// Weights of the composite objective. The perceptual and adversarial slots
/// exist but must stay at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub prune: f64,
    pub kl: f64,
    pub lpips: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, prune: 1.0, kl: 1e-6, lpips: 0.0, adv: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l1: f64,
    pub prune: f64,
    pub kl: f64,
    pub lpips: f64,
    pub adv: f64,
    pub total: f64,
}

/// Mean over tokens and dimensions of `0.5 (mu^2 + e^lv - 1 - lv)`.
pub fn kl_loss(lat: &LatentGrid) -> f64 {
    if lat.mu.is_empty() {
        return 0.0;
    }
    let s: f64 = lat.mu.iter().zip(&lat.logvar).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum();
    s / lat.mu.len() as f64
}

/// Mean absolute difference over texels valid in both images of each view
/// and over all channels, pooled across views.
pub fn masked_l1(recon: &[TextureImage], gt: &[TextureImage]) -> Result<f64> {
    if recon.len() != gt.len() {
        return Err(Error::Shape(format!("{} reconstructed views for {} ground-truth views", recon.len(), gt.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, (a, b)) in recon.iter().zip(gt).enumerate() {
        if a.width != b.width || a.height != b.height || a.channels != b.channels {
            return Err(Error::Shape(format!("view {v} renders differ in size or channel count")));
        }
        for idx in 0..a.mask.len() {
            if a.mask[idx] && b.mask[idx] {
                for (x, y) in a.texel(idx).iter().zip(b.texel(idx)) {
                    sum += (x - y).abs();
                }
                count += a.channels;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean squared error between two grids on the same coordinates.
pub fn cube_mse(pred: &SparseAttributeGrid, gt: &SparseAttributeGrid) -> Result<f64> {
    if pred.coords() != gt.coords() || pred.channels() != gt.channels() {
        return Err(Error::Shape("grids differ in occupancy or channel count".into()));
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.values().iter().zip(gt.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / gt.values().len() as f64)
}

/// Composite objective from its ingredients.
pub fn vae_loss(
    recon: &[TextureImage],
    gt: &[TextureImage],
    logits: &[f64],
    labels: &[f64],
    lat: &LatentGrid,
    w: &LossWeights,
) -> Result<LossTerms> {
    let l1 = masked_l1(recon, gt)?;
    let prune = crate::pruning::prune_bce(logits, labels)?;
    let kl = kl_loss(lat);
    let total = w.l1 * l1 + w.prune * prune + w.kl * kl + w.lpips * 0.0 + w.adv * 0.0;
    Ok(LossTerms { l1, prune, kl, lpips: 0.0, adv: 0.0, total })
}

/// Render supervision for one view: stencil from grid entries to valid
/// pixels plus the ground-truth pixel values.
#[derive(Clone, Debug)]
pub struct ViewTarget {
    pub stencil: Rc<SparseRows>,
    pub target: Vec<f64>,
}

/// Everything needed to train on one asset, computed once.
#[derive(Clone, Debug)]
pub struct AssetPlan {
    pub grid: SparseAttributeGrid,
    pub input: Vec<f64>,
    pub encoder: EncoderPlan,
    pub decoder: DecoderPlan,
    pub views: Vec<ViewTarget>,
    pub labels: Rc<Vec<f64>>,
}

impl AssetPlan {
    /// `mesh` provides the view position maps for render supervision; without
    /// it only the cube loss is available.
    pub fn new(vae: &Vae, grid: &SparseAttributeGrid, mesh: Option<&TriMesh>) -> Result<Self> {
        vae.check_grid(grid)?;
        let encoder = vae.encoder_plan(grid.coords())?;
        let pyramid = OccupancyPyramid::build(grid.coords(), grid.resolution(), super::STAGES)?;
        let decoder = vae.decoder_plan(&pyramid)?;
        let k = grid.channels();
        let mut views = Vec::new();
        if let Some(mesh) = mesh {
            let size = vae.cfg.view_size;
            for cam in OrthoCamera::canonical_views(size, size) {
                let vpm = render_position_map(mesh, &cam)?;
                let ps = PixelStencil::build(grid, &vpm);
                let target = ps.apply(grid.values(), k);
                let stencil = SparseRows { rows: ps.pixels.len(), cols: grid.len(), triplets: ps.taps };
                views.push(ViewTarget { stencil: Rc::new(stencil), target });
            }
        }
        let labels: Vec<f64> = decoder.stages.iter().flat_map(|s| s.labels.iter().copied()).collect();
        Ok(Self { input: Vae::encoder_input(grid), grid: grid.clone(), encoder, decoder, views, labels: Rc::new(labels) })
    }

    pub fn latent_len(&self) -> usize {
        self.encoder.levels[super::STAGES].len()
    }

    pub fn pixel_count(&self) -> usize {
        self.views.iter().map(|v| v.stencil.rows).sum()
    }
}

/// Tape handles of one loss evaluation.
pub struct LossGraph {
    pub total: Var,
    pub l1: Option<Var>,
    pub mse: Option<Var>,
    pub prune: Var,
    pub kl: Var,
    pub mu: Var,
    pub decoded: DecodeVars,
}

/// Build the training objective on `t`. `eps` is the reparameterization
/// noise; `None` decodes the posterior mean.
pub fn loss_graph(vae: &Vae, t: &mut Tape, plan: &AssetPlan, eps: Option<&[f64]>, kind: LossKind) -> Result<LossGraph> {
    let cfg = &vae.cfg;
    let k = cfg.channels();
    let x = t.constant(plan.input.clone(), &[plan.grid.len(), k + 1]);
    let (mu, lv) = vae.encode_vars(t, x, &plan.encoder);
    let z = match eps {
        Some(e) => {
            let n = plan.latent_len();
            let e = t.constant(e.to_vec(), &[n, cfg.latent_dim]);
            let half = t.scale(lv, 0.5);
            let std = t.exp(half);
            let noise = t.mul(std, e);
            t.add(mu, noise)
        }
        None => mu,
    };
    let decoded = vae.decode_forced(t, z, &plan.decoder);
    // KL: mean of 0.5 (mu^2 + e^lv - 1 - lv)
    let m2 = t.square(mu);
    let elv = t.exp(lv);
    let a = t.add(m2, elv);
    let a = t.sub(a, lv);
    let a = t.add_scalar(a, -1.0);
    let a = t.mean(a);
    let kl = t.scale(a, 0.5);
    let all_logits = t.concat_rows(&decoded.logits);
    let prune = t.bce_with_logits(all_logits, plan.labels.clone());
    let (recon, l1, mse) = match kind {
        LossKind::Render => {
            if plan.views.is_empty() {
                return Err(Error::InvalidInput("render loss needs view targets; build the plan with a mesh".into()));
            }
            let mut preds = Vec::with_capacity(plan.views.len());
            let mut target = Vec::with_capacity(plan.pixel_count() * k);
            for v in &plan.views {
                preds.push(t.spmm(v.stencil.clone(), decoded.out));
                target.extend_from_slice(&v.target);
            }
            let p = t.concat_rows(&preds);
            let rows = t.dims(p).0;
            let g = t.constant(target, &[rows, k]);
            let d = t.sub(p, g);
            let d = t.abs(d);
            let l1 = t.mean(d);
            (t.scale(l1, cfg.lambda_l1), Some(l1), None)
        }
        LossKind::CubeMse => {
            let g = t.constant(plan.grid.values().to_vec(), &[plan.grid.len(), k]);
            let d = t.sub(decoded.out, g);
            let d = t.square(d);
            let mse = t.mean(d);
            (t.scale(mse, cfg.lambda_l1), None, Some(mse))
        }
    };
    let p = t.scale(prune, cfg.lambda_prune);
    let total = t.add(recon, p);
    let kw = t.scale(kl, cfg.lambda_kl);
    let total = t.add(total, kw);
    Ok(LossGraph { total, l1, mse, prune, kl, mu, decoded })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    /// Render L1 or cube MSE, depending on the objective.
    pub recon: f64,
    pub prune: f64,
    pub kl: f64,
}

/// Teacher-forced evaluation with `z = mu`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Masked render L1 (NaN without view targets).
    pub render_l1: f64,
    pub cube_mse: f64,
    /// Fraction of candidates over all stages whose keep decision
    /// (`logit >= 0`) matches the label.
    pub prune_accuracy: f64,
}

pub struct VaeTrainer {
    pub vae: Vae,
    pub opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl VaeTrainer {
    pub fn new(vae: Vae, seed: u64) -> Self {
        let opt = AdamW::new(&vae.store, vae.cfg.lr, vae.cfg.weight_decay);
        Self { vae, opt, rng: crate::seeded_rng(seed ^ 0x5eed_0001), step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One AdamW step on `plan`'s objective.
    pub fn train_step(&mut self, plan: &AssetPlan) -> Result<LossRecord> {
        let n = plan.latent_len() * self.vae.cfg.latent_dim;
        let eps: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
        let (rec, grads) = {
            let mut t = Tape::new(&self.vae.store);
            let g = loss_graph(&self.vae, &mut t, plan, Some(&eps), self.vae.cfg.loss)?;
            let total = t.scalar(g.total);
            let recon = g.l1.or(g.mse).map(|v| t.scalar(v)).unwrap_or(0.0);
            let rec = LossRecord { step: self.step, total, recon, prune: t.scalar(g.prune), kl: t.scalar(g.kl) };
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    detail: format!("recon {} prune {} kl {}", rec.recon, rec.prune, rec.kl),
                });
            }
            let grads = t.backward(g.total);
            (rec, grads.into_params(&t))
        };
        self.opt.step(&mut self.vae.store, &grads);
        self.step += 1;
        Ok(rec)
    }

    pub fn evaluate(&self, plan: &AssetPlan) -> Result<EvalReport> {
        evaluate(&self.vae, plan)
    }
}

pub fn evaluate(vae: &Vae, plan: &AssetPlan) -> Result<EvalReport> {
    let mut t = Tape::new(&vae.store);
    let kind = if plan.views.is_empty() { LossKind::CubeMse } else { LossKind::Render };
    let g = loss_graph(vae, &mut t, plan, None, kind)?;
    let k = vae.cfg.channels();
    let out = t.value(g.decoded.out);
    let render_l1 = match g.l1 {
        Some(v) => t.scalar(v),
        None => f64::NAN,
    };
    let mse = out.iter().zip(plan.grid.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (plan.grid.len() * k) as f64;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut offset = 0;
    for l in &g.decoded.logits {
        for (j, &s) in t.value(*l).iter().enumerate() {
            let keep = s >= 0.0;
            correct += usize::from(keep == (plan.labels[offset + j] == 1.0));
            total += 1;
        }
        offset += t.value(*l).len();
    }
    Ok(EvalReport { render_l1, cube_mse: mse, prune_accuracy: correct as f64 / total.max(1) as f64 })
}
