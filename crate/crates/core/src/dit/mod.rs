//! Image-conditioned rectified-flow transformer over sparse latent tokens.
//!
//! Convention: `x_0` is data and `x_1` is Gaussian noise, so the path is
//! `x_t = (1 - t) x_0 + t eps` and the model regresses `v = eps - x_0`.

mod condition;
mod flow;
mod train;

use std::rc::Rc;

use rand::Rng;
use serde::Deserialize;

pub use condition::{
    condition_from_grid, make_condition, sparse_tokens, ConditionBundle, GlobalExtractor, PatchMeanExtractor,
};
pub use flow::{
    euler_sample, rf_interpolate, rf_target, sample, toy_flow_benchmark, ToyFlowConfig, ToyFlowReport,
};
pub use train::{
    ablation_assets, dit_samples, draw_drop, eval_loss, sparse_condition_ablation, AblationConfig, AblationOutcome, DitLossRecord,
    DitSample, DitTrainer,
};

use crate::error::{Error, Result};
use crate::grid::VoxelCoord;
use crate::nn::{
    time_embed, window_groups, AttnGroups, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore,
    Tape, Var,
};
use crate::vae::padded_position_embed;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Self-attention window on the latent grid.
    pub window: u32,
    /// Feature width of the global extractor.
    pub global_dim: usize,
    /// Attend to the projected sparse condition (off for the ablation).
    pub use_sparse: bool,
    pub use_global: bool,
    pub drop_prob: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub seed: u64,
    pub sample_steps: usize,
    pub guidance: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            width: 64,
            heads: 4,
            blocks: 2,
            window: 2,
            global_dim: 5,
            use_sparse: true,
            use_global: true,
            drop_prob: 0.1,
            lr: 1e-4,
            weight_decay: 0.01,
            steps: 2000,
            seed: 0,
            sample_steps: 15,
            guidance: 3.0,
        }
    }
}

const ARCH_KEYS: [&str; 8] =
    ["latent_dim", "width", "heads", "blocks", "window", "global_dim", "use_sparse", "use_global"];

impl DitConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 || self.width == 0 || self.heads == 0 || self.global_dim == 0 {
            return bad("latent_dim, width, heads and global_dim must be positive".into());
        }
        if self.width % 2 != 0 || self.width % self.heads != 0 {
            return bad(format!("width {} must be even and divisible by {} heads", self.width, self.heads));
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return bad(format!("drop_prob {} outside [0, 1]", self.drop_prob));
        }
        Ok(())
    }

    fn arch_values(&self) -> [usize; 8] {
        [
            self.latent_dim,
            self.width,
            self.heads,
            self.blocks,
            self.window as usize,
            self.global_dim,
            self.use_sparse as usize,
            self.use_global as usize,
        ]
    }

    fn write_blobs(&self, s: &mut ParamStore) {
        for (k, v) in ARCH_KEYS.iter().zip(self.arch_values()) {
            s.add_values(&format!("cfg.dit.{k}"), &[1], vec![v as f64]);
        }
    }

    fn from_blobs(s: &ParamStore) -> Result<Self> {
        let mut v = [0usize; 8];
        for (slot, k) in v.iter_mut().zip(ARCH_KEYS) {
            let name = format!("cfg.dit.{k}");
            let id = s.find(&name).ok_or(Error::MissingParam(name))?;
            *slot = s.get(id).first().copied().unwrap_or(0.0) as usize;
        }
        Ok(Self {
            latent_dim: v[0],
            width: v[1],
            heads: v[2],
            blocks: v[3],
            window: v[4] as u32,
            global_dim: v[5],
            use_sparse: v[6] != 0,
            use_global: v[7] != 0,
            ..Self::default()
        })
    }
}

/// Pre-norm block: windowed self-attention, then the sum of the sparse and
/// global cross-attention branches, then a feedforward.
#[derive(Clone, Copy, Debug)]
pub struct DitBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_c: LayerNorm,
    pub sparse_attn: MultiHeadAttention,
    pub global_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl DitBlock {
    fn new<R: Rng>(s: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(s, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(s, &format!("{name}.attn"), d, d, heads, rng),
            ln_c: LayerNorm::new(s, &format!("{name}.ln_c"), d),
            sparse_attn: MultiHeadAttention::new(s, &format!("{name}.xattn_sparse"), d, d, heads, rng),
            global_attn: MultiHeadAttention::new(s, &format!("{name}.xattn_global"), d, d, heads, rng),
            ln2: LayerNorm::new(s, &format!("{name}.ln2"), d),
            ff: FeedForward::new(s, &format!("{name}.ff"), d, 2 * d, rng),
        }
    }

    /// `CrossAttn(h, sparse) + CrossAttn(h, global)`; the branches share
    /// nothing but their queries.
    pub fn hybrid_cross(&self, t: &mut Tape, h: Var, sparse: Var, global: Var) -> Var {
        let a = self.sparse_attn.forward(t, h, sparse);
        let b = self.global_attn.forward(t, h, global);
        t.add(a, b)
    }

    pub fn forward(&self, t: &mut Tape, x: Var, groups: &Rc<AttnGroups>, sparse: Var, global: Var) -> Var {
        let h = self.ln1.forward(t, x);
        let a = self.attn.forward_grouped(t, h, h, groups.clone());
        let x = t.add(x, a);
        let h = self.ln_c.forward(t, x);
        let c = self.hybrid_cross(t, h, sparse, global);
        let x = t.add(x, c);
        let h = self.ln2.forward(t, x);
        let f = self.ff.forward(t, h);
        t.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct Dit {
    pub cfg: DitConfig,
    pub store: ParamStore,
    pub x_in: Linear,
    pub t_proj: Linear,
    pub sparse_in: Linear,
    pub global_in: Linear,
    pub null_sparse: ParamId,
    pub null_global: ParamId,
    pub blocks: Vec<DitBlock>,
    pub ln_out: LayerNorm,
    pub out: Linear,
}

impl Dit {
    pub fn new(cfg: DitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::seeded_rng(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (d, dl) = (cfg.width, cfg.latent_dim);
        let x_in = Linear::new(s, "dit.x_in", dl, d, rng);
        let t_proj = Linear::new(s, "dit.t_proj", d, d, rng);
        let sparse_in = Linear::new(s, "dit.sparse_in", dl, d, rng);
        let global_in = Linear::new(s, "dit.global_in", cfg.global_dim, d, rng);
        let null_sparse = s.add_uniform("dit.null_sparse", &[1, d], d, rng);
        let null_global = s.add_uniform("dit.null_global", &[1, d], d, rng);
        let blocks = (0..cfg.blocks).map(|i| DitBlock::new(s, &format!("dit.block{i}"), d, cfg.heads, rng)).collect();
        let ln_out = LayerNorm::new(s, "dit.ln_out", d);
        let out = Linear::new(s, "dit.out", d, dl, rng);
        Ok(Self { cfg, store, x_in, t_proj, sparse_in, global_in, null_sparse, null_global, blocks, ln_out, out })
    }

    /// Context rows for the sparse branch: projected posterior means plus
    /// their position embedding, or the null token.
    pub fn sparse_context(&self, t: &mut Tape, cond: &ConditionBundle) -> Result<Var> {
        if !self.cfg.use_sparse || cond.drop_sparse || cond.sparse_len() == 0 {
            return Ok(t.param(self.null_sparse));
        }
        let (n, dl) = (cond.sparse_len(), self.cfg.latent_dim);
        if cond.latent_dim != dl || cond.sparse.len() != n * dl {
            return Err(Error::Shape(format!("sparse condition is not {n} x {dl}")));
        }
        let s = t.constant(cond.sparse.clone(), &[n, dl]);
        let h = self.sparse_in.forward(t, s);
        let pe = t.constant(padded_position_embed(&cond.sparse_coords, self.cfg.width), &[n, self.cfg.width]);
        Ok(t.add(h, pe))
    }

    pub fn global_context(&self, t: &mut Tape, cond: &ConditionBundle) -> Result<Var> {
        if !self.cfg.use_global || cond.drop_global || cond.global_tokens == 0 {
            return Ok(t.param(self.null_global));
        }
        let (n, g) = (cond.global_tokens, self.cfg.global_dim);
        if cond.global_dim != g || cond.global.len() != n * g {
            return Err(Error::Shape(format!("global condition is not {n} x {g}")));
        }
        let x = t.constant(cond.global.clone(), &[n, g]);
        Ok(self.global_in.forward(t, x))
    }

    /// Predicted velocity for the tokens `x` (`coords.len() x latent_dim`).
    pub fn forward(
        &self,
        t: &mut Tape,
        x: Var,
        coords: &[VoxelCoord],
        time: f64,
        cond: &ConditionBundle,
    ) -> Result<Var> {
        let (n, dl, d) = (coords.len(), self.cfg.latent_dim, self.cfg.width);
        if t.shape(x) != [n, dl] {
            return Err(Error::Shape(format!("tokens {:?} but expected [{n}, {dl}]", t.shape(x))));
        }
        if n == 0 {
            return Err(Error::EmptyInput("no latent tokens"));
        }
        let sparse = self.sparse_context(t, cond)?;
        let global = self.global_context(t, cond)?;
        let h = self.x_in.forward(t, x);
        let pe = t.constant(padded_position_embed(coords, d), &[n, d]);
        let h = t.add(h, pe);
        let te = t.constant(time_embed(time, d), &[1, d]);
        let te = self.t_proj.forward(t, te);
        let mut h = t.add_row(h, te);
        let groups = Rc::new(window_groups(coords, self.cfg.window));
        for b in &self.blocks {
            h = b.forward(t, h, &groups, sparse, global);
        }
        let h = self.ln_out.forward(t, h);
        Ok(self.out.forward(t, h))
    }

    /// Numeric velocity evaluation.
    pub fn velocity(&self, x: &[f64], coords: &[VoxelCoord], time: f64, cond: &ConditionBundle) -> Result<Vec<f64>> {
        let (n, dl) = (coords.len(), self.cfg.latent_dim);
        if x.len() != n * dl {
            return Err(Error::Shape(format!("{} latent values for {n} tokens of width {dl}", x.len())));
        }
        let mut t = Tape::new(&self.store);
        let xv = t.constant(x.to_vec(), &[n, dl]);
        let v = self.forward(&mut t, xv, coords, time, cond)?;
        Ok(t.value(v).to_vec())
    }

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
        let cfg = DitConfig::from_blobs(ck)?;
        let mut dit = Dit::new(cfg, 0)?;
        dit.store.load_from(ck)?;
        Ok(dit)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_store(&ParamStore::read_checkpoint(std::io::BufReader::new(f))?)
    }
}

#[cfg(test)]
mod tests;
