//! Sparse attribute VAE: stride-2 sparse-conv encoder with a transformer
//! bottleneck, and a transformer + transposed-conv decoder that prunes after
//! every upsampling stage.

mod config;
mod train;

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

pub use config::{LossKind, VaeConfig};
pub use train::{
    cube_mse, evaluate, kl_loss, loss_graph, masked_l1, vae_loss, AssetPlan, EvalReport, LossGraph, LossRecord,
    LossTerms, LossWeights, VaeTrainer, ViewTarget,
};

use crate::error::{Error, Result};
use crate::grid::{ChannelLayout, SparseAttributeGrid, Span, VoxelCoord};
use crate::nn::{
    downsample_map, position_embed, submanifold_map, upsample_map, window_groups, AttnGroups,
    FeedForward, KernelMap, LayerNorm, Linear, MultiHeadAttention, ParamStore, SparseConv, Tape, Var,
};
use crate::pruning::OccupancyPyramid;

/// Number of factor-2 stages between the input grid and the latent grid.
pub const STAGES: usize = 3;

/// Per-token Gaussian posterior on the coarse latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub resolution: u32,
    pub coords: Vec<VoxelCoord>,
    pub dim: usize,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Sinusoidal position embedding zero-padded up to width `d`.
pub fn padded_position_embed(coords: &[VoxelCoord], d: usize) -> Vec<f64> {
    let core = d / 6 * 6;
    if core == 0 {
        return vec![0.0; coords.len() * d];
    }
    let pe = position_embed(coords, core).expect("width is a multiple of 6");
    if core == d {
        return pe;
    }
    let mut out = Vec::with_capacity(coords.len() * d);
    for row in pe.chunks(core) {
        out.extend_from_slice(row);
        out.extend(std::iter::repeat_n(0.0, d - core));
    }
    out
}

/// `z = mu + exp(logvar / 2) * eps` with `logvar` clamped below at -30.
pub fn reparameterize<R: Rng>(lat: &LatentGrid, rng: &mut R) -> Vec<f64> {
    lat.mu
        .iter()
        .zip(&lat.logvar)
        .map(|(m, lv)| {
            let e: f64 = rng.sample(StandardNormal);
            m + (lv.max(-30.0) / 2.0).exp() * e
        })
        .collect()
}

/// Pre-norm transformer block with block-local self-attention.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, 2 * d, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, groups: &Rc<AttnGroups>) -> Var {
        let h = self.ln1.forward(t, x);
        let a = self.attn.forward_grouped(t, h, h, groups.clone());
        let x = t.add(x, a);
        let h = self.ln2.forward(t, x);
        let f = self.ff.forward(t, h);
        t.add(x, f)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: SparseConv,
    down: Vec<SparseConv>,
    blocks: Vec<Block>,
    ln: LayerNorm,
    head: Linear,
}

#[derive(Clone, Copy, Debug)]
struct DecoderStage {
    up: SparseConv,
    prune: Linear,
    conv: SparseConv,
}

#[derive(Clone, Debug)]
struct Decoder {
    lin_in: Linear,
    blocks: Vec<Block>,
    ln: LayerNorm,
    stages: Vec<DecoderStage>,
    out: Linear,
}

/// Maps and groups the encoder needs for one input occupancy.
#[derive(Clone, Debug)]
pub struct EncoderPlan {
    pub levels: Vec<Vec<VoxelCoord>>,
    conv_in: Rc<KernelMap>,
    down: Vec<Rc<KernelMap>>,
    groups: Rc<AttnGroups>,
    pe: Vec<f64>,
}

/// Teacher-forcing data for one decoder stage.
#[derive(Clone, Debug)]
pub struct StagePlan {
    pub candidates: Vec<VoxelCoord>,
    pub labels: Rc<Vec<f64>>,
    up: Rc<KernelMap>,
    keep: Rc<Vec<u32>>,
    sub: Rc<KernelMap>,
}

/// Teacher-forced decoder plan derived from a ground-truth pyramid.
#[derive(Clone, Debug)]
pub struct DecoderPlan {
    pub pyramid: OccupancyPyramid,
    pub stages: Vec<StagePlan>,
    groups: Rc<AttnGroups>,
    pe: Vec<f64>,
}

/// Tape handles produced by a decoder pass.
pub struct DecodeVars {
    /// Final attributes, `coords.len() x k`.
    pub out: Var,
    pub coords: Vec<VoxelCoord>,
    /// Per-stage prune logits (`candidates x 1`).
    pub logits: Vec<Var>,
    pub candidates: Vec<Vec<VoxelCoord>>,
}

/// Decoded grid plus the per-stage logits and candidates.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub grid: SparseAttributeGrid,
    pub logits: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<VoxelCoord>>,
}

#[derive(Clone, Debug)]
pub struct Vae {
    pub cfg: VaeConfig,
    pub store: ParamStore,
    enc: Encoder,
    dec: Decoder,
}

impl Vae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::seeded_rng(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let k = cfg.channels();
        let [w0, w1, w2] = cfg.widths;
        let d = w2;
        let heads = cfg.heads;
        let enc = Encoder {
            conv_in: SparseConv::new(s, "enc.conv_in", 27, k + 1, w0, rng),
            down: vec![
                SparseConv::new(s, "enc.down0", 27, w0, w1, rng),
                SparseConv::new(s, "enc.down1", 27, w1, w2, rng),
                SparseConv::new(s, "enc.down2", 27, w2, w2, rng),
            ],
            blocks: (0..cfg.blocks).map(|i| Block::new(s, &format!("enc.block{i}"), d, heads, rng)).collect(),
            ln: LayerNorm::new(s, "enc.ln", d),
            head: Linear::new(s, "enc.head", d, 2 * cfg.latent_dim, rng),
        };
        let dl = cfg.latent_dim;
        for v in &mut s.get_mut(enc.head.b)[dl..] {
            *v = cfg.logvar_init;
        }
        let stage_widths = [(w2, w2), (w2, w1), (w1, w0)];
        let dec = Decoder {
            lin_in: Linear::new(s, "dec.lin_in", cfg.latent_dim, d, rng),
            blocks: (0..cfg.blocks).map(|i| Block::new(s, &format!("dec.block{i}"), d, heads, rng)).collect(),
            ln: LayerNorm::new(s, "dec.ln", d),
            stages: stage_widths
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| DecoderStage {
                    up: SparseConv::new(s, &format!("dec.up{i}"), 8, a, b, rng),
                    prune: Linear::new(s, &format!("dec.prune{i}"), b, 1, rng),
                    conv: SparseConv::new(s, &format!("dec.conv{i}"), 27, b, b, rng),
                })
                .collect(),
            out: Linear::new(s, "dec.out", w0, k, rng),
        };
        Ok(Self { cfg, store, enc, dec })
    }

    pub fn layout(&self) -> ChannelLayout {
        self.cfg.layout()
    }

    pub fn latent_resolution(&self) -> u32 {
        self.cfg.resolution >> STAGES
    }

    fn check_grid(&self, grid: &SparseAttributeGrid) -> Result<()> {
        if grid.is_empty() {
            return Err(Error::EmptyInput("grid has no voxels"));
        }
        if grid.resolution() != self.cfg.resolution {
            return Err(Error::InvalidInput(format!(
                "grid resolution {} does not match model resolution {}",
                grid.resolution(),
                self.cfg.resolution
            )));
        }
        if grid.channels() != self.cfg.channels() {
            return Err(Error::Layout(format!(
                "grid has {} channels, model expects {}",
                grid.channels(),
                self.cfg.channels()
            )));
        }
        Ok(())
    }

    pub fn encoder_plan(&self, coords: &[VoxelCoord]) -> Result<EncoderPlan> {
        let mut levels = vec![coords.to_vec()];
        let mut down = Vec::with_capacity(STAGES);
        let mut res = self.cfg.resolution;
        for _ in 0..STAGES {
            let (next, map) = downsample_map(levels.last().unwrap(), res)?;
            res /= 2;
            levels.push(next);
            down.push(Rc::new(map));
        }
        let latent = levels.last().unwrap();
        Ok(EncoderPlan {
            conv_in: Rc::new(submanifold_map(coords, self.cfg.resolution)),
            down,
            groups: Rc::new(window_groups(latent, self.cfg.window)),
            pe: padded_position_embed(latent, self.cfg.widths[2]),
            levels,
        })
    }

    pub fn decoder_plan(&self, pyramid: &OccupancyPyramid) -> Result<DecoderPlan> {
        if pyramid.levels.len() != STAGES + 1 || pyramid.resolution != self.cfg.resolution {
            return Err(Error::InvalidInput("pyramid does not match the model's stage count and resolution".into()));
        }
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let parent = &pyramid.levels[STAGES - s];
            let target = &pyramid.levels[STAGES - s - 1];
            let (candidates, up) = upsample_map(parent);
            let labels = crate::pruning::prune_targets(&candidates, target);
            let keep: Vec<u32> = target
                .iter()
                .map(|c| {
                    candidates
                        .binary_search(c)
                        .map(|i| i as u32)
                        .map_err(|_| Error::InvalidInput("pyramid level is not covered by its parent's children".into()))
                })
                .collect::<Result<_>>()?;
            let res = pyramid.level_resolution(STAGES - s - 1);
            stages.push(StagePlan {
                sub: Rc::new(submanifold_map(target, res)),
                candidates,
                labels: Rc::new(labels),
                up: Rc::new(up),
                keep: Rc::new(keep),
            });
        }
        let latent = pyramid.coarsest();
        Ok(DecoderPlan {
            groups: Rc::new(window_groups(latent, self.cfg.window)),
            pe: padded_position_embed(latent, self.cfg.widths[2]),
            pyramid: pyramid.clone(),
            stages,
        })
    }

    /// Encoder input rows: attributes followed by a constant 1.
    pub fn encoder_input(grid: &SparseAttributeGrid) -> Vec<f64> {
        let k = grid.channels();
        let mut x = Vec::with_capacity(grid.len() * (k + 1));
        for i in 0..grid.len() {
            x.extend_from_slice(grid.value(i));
            x.push(1.0);
        }
        x
    }

    /// Encoder pass on the tape; returns `(mu, logvar)`.
    pub fn encode_vars(&self, t: &mut Tape, input: Var, plan: &EncoderPlan) -> (Var, Var) {
        let mut h = self.enc.conv_in.forward(t, input, plan.conv_in.clone());
        h = t.gelu(h);
        for (conv, map) in self.enc.down.iter().zip(&plan.down) {
            h = conv.forward(t, h, map.clone());
            h = t.gelu(h);
        }
        let n = plan.levels[STAGES].len();
        let pe = t.constant(plan.pe.clone(), &[n, self.cfg.widths[2]]);
        h = t.add(h, pe);
        for b in &self.enc.blocks {
            h = b.forward(t, h, &plan.groups);
        }
        h = self.enc.ln.forward(t, h);
        let o = self.enc.head.forward(t, h);
        let dl = self.cfg.latent_dim;
        let mu = t.slice_cols(o, 0, dl);
        let lv = t.slice_cols(o, dl, dl);
        (mu, lv)
    }

    pub fn encode(&self, grid: &SparseAttributeGrid) -> Result<LatentGrid> {
        self.check_grid(grid)?;
        let plan = self.encoder_plan(grid.coords())?;
        let mut t = Tape::new(&self.store);
        let x = t.constant(Self::encoder_input(grid), &[grid.len(), self.cfg.channels() + 1]);
        let (mu, lv) = self.encode_vars(&mut t, x, &plan);
        Ok(LatentGrid {
            resolution: self.latent_resolution(),
            coords: plan.levels[STAGES].clone(),
            dim: self.cfg.latent_dim,
            mu: t.value(mu).to_vec(),
            logvar: t.value(lv).to_vec(),
        })
    }

    fn decode_trunk(&self, t: &mut Tape, z: Var, pe: &[f64], groups: &Rc<AttnGroups>) -> Var {
        let n = t.dims(z).0;
        let mut h = self.dec.lin_in.forward(t, z);
        let pe = t.constant(pe.to_vec(), &[n, self.cfg.widths[2]]);
        h = t.add(h, pe);
        for b in &self.dec.blocks {
            h = b.forward(t, h, groups);
        }
        self.dec.ln.forward(t, h)
    }

    fn stage_upsample(&self, t: &mut Tape, s: usize, h: Var, up: Rc<KernelMap>) -> (Var, Var) {
        let st = &self.dec.stages[s];
        let u = st.up.forward(t, h, up);
        let u = t.gelu(u);
        let logits = st.prune.forward(t, u);
        (u, logits)
    }

    fn stage_refine(&self, t: &mut Tape, s: usize, h: Var, sub: Rc<KernelMap>) -> Var {
        let c = self.dec.stages[s].conv.forward(t, h, sub);
        let c = t.gelu(c);
        t.add(h, c)
    }

    fn output_head(&self, t: &mut Tape, h: Var) -> Var {
        let o = self.dec.out.forward(t, h);
        let layout = self.layout();
        let color = layout.range(Span::Color).unwrap_or(0..0);
        let k = layout.channels();
        if color.is_empty() {
            return o;
        }
        if color.len() == k {
            return t.sigmoid(o);
        }
        let mut parts = Vec::new();
        if color.start > 0 {
            parts.push(t.slice_cols(o, 0, color.start));
        }
        let c = t.slice_cols(o, color.start, color.len());
        parts.push(t.sigmoid(c));
        if color.end < k {
            parts.push(t.slice_cols(o, color.end, k - color.end));
        }
        t.concat_cols(&parts)
    }

    /// Teacher-forced decoder pass: every stage keeps exactly the
    /// ground-truth voxels of the plan.
    pub fn decode_forced(&self, t: &mut Tape, z: Var, plan: &DecoderPlan) -> DecodeVars {
        let mut h = self.decode_trunk(t, z, &plan.pe, &plan.groups);
        let mut logits = Vec::with_capacity(STAGES);
        for (s, st) in plan.stages.iter().enumerate() {
            let (u, l) = self.stage_upsample(t, s, h, st.up.clone());
            logits.push(l);
            h = t.gather_rows(u, st.keep.clone());
            h = self.stage_refine(t, s, h, st.sub.clone());
        }
        let out = self.output_head(t, h);
        DecodeVars {
            out,
            coords: plan.pyramid.levels[0].clone(),
            logits,
            candidates: plan.stages.iter().map(|s| s.candidates.clone()).collect(),
        }
    }

    /// Free-running decoder pass keeping candidates with logit >= 0.
    pub fn decode_free(&self, t: &mut Tape, z: Var, latent: &[VoxelCoord]) -> DecodeVars {
        let pe = padded_position_embed(latent, self.cfg.widths[2]);
        let groups = Rc::new(window_groups(latent, self.cfg.window));
        let mut h = self.decode_trunk(t, z, &pe, &groups);
        let mut coords = latent.to_vec();
        let mut res = self.latent_resolution();
        let mut logits = Vec::with_capacity(STAGES);
        let mut candidates = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let (cands, up) = upsample_map(&coords);
            res *= 2;
            let (u, l) = self.stage_upsample(t, s, h, Rc::new(up));
            let keep: Vec<u32> = (0..cands.len() as u32).filter(|&i| t.value(l)[i as usize] >= 0.0).collect();
            coords = keep.iter().map(|&i| cands[i as usize]).collect();
            logits.push(l);
            candidates.push(cands);
            h = t.gather_rows(u, Rc::new(keep));
            let sub = Rc::new(submanifold_map(&coords, res));
            h = self.stage_refine(t, s, h, sub);
        }
        let out = self.output_head(t, h);
        DecodeVars { out, coords, logits, candidates }
    }

    fn finish(&self, t: &Tape, vars: DecodeVars) -> Result<Decoded> {
        let k = self.cfg.channels();
        let values = t.value(vars.out);
        let layout = self.layout();
        let color = layout.range(Span::Color)?;
        // sigmoid output can round to exactly 0/1 but never leaves [0, 1]
        let mut vals = values.to_vec();
        for row in vals.chunks_mut(k) {
            for v in &mut row[color.clone()] {
                *v = v.clamp(0.0, 1.0);
            }
        }
        let grid = SparseAttributeGrid::from_sorted(self.cfg.resolution, layout, vars.coords, vals)?;
        Ok(Decoded {
            grid,
            logits: vars.logits.iter().map(|&l| t.value(l).to_vec()).collect(),
            candidates: vars.candidates,
        })
    }

    /// Decode latent tokens `z` (`latent.len() x latent_dim`). With a
    /// pyramid the decoder is teacher-forced to its occupancy; without one
    /// it prunes by its own logits.
    pub fn decode(&self, z: &[f64], latent: &[VoxelCoord], pyramid: Option<&OccupancyPyramid>) -> Result<Decoded> {
        if z.len() != latent.len() * self.cfg.latent_dim {
            return Err(Error::Shape(format!("{} latent values for {} tokens", z.len(), latent.len())));
        }
        let mut t = Tape::new(&self.store);
        let zv = t.constant(z.to_vec(), &[latent.len(), self.cfg.latent_dim]);
        let vars = match pyramid {
            Some(p) => {
                if p.coarsest() != latent {
                    return Err(Error::InvalidInput("latent coordinates differ from the pyramid's coarsest level".into()));
                }
                let plan = self.decoder_plan(p)?;
                self.decode_forced(&mut t, zv, &plan)
            }
            None => self.decode_free(&mut t, zv, latent),
        };
        self.finish(&t, vars)
    }

    /// Store with the architecture recorded as extra `cfg.*` blobs.
    pub fn checkpoint_store(&self) -> ParamStore {
        let mut s = self.store.clone();
        self.cfg.write_blobs(&mut s);
        s
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.checkpoint_store().write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn from_store(ck: &ParamStore) -> Result<Self> {
        let cfg = VaeConfig::from_blobs(ck)?;
        let mut vae = Vae::new(cfg, 0)?;
        vae.store.load_from(ck)?;
        Ok(vae)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_store(&ParamStore::read_checkpoint(std::io::BufReader::new(f))?)
    }
}

#[cfg(test)]
mod tests;
