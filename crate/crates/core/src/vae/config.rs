use serde::Deserialize;

use crate::error::{Error, Result};
use crate::grid::ChannelLayout;
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Masked L1 on rendered views plus prune BCE and KL.
    Render,
    /// MSE over stored voxel vectors plus prune BCE and KL.
    CubeMse,
}

/// Architecture, loss weights and training schedule.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub resolution: u32,
    /// Channel spans: color, semantic, pbr, extra.
    pub spans: [u32; 4],
    pub widths: [usize; 3],
    pub heads: usize,
    pub blocks: usize,
    pub latent_dim: usize,
    pub window: u32,
    /// Initial bias of the log-variance head.
    pub logvar_init: f64,
    pub loss: LossKind,
    pub lambda_l1: f64,
    pub lambda_prune: f64,
    pub lambda_kl: f64,
    /// Present for completeness; only 0 is supported.
    pub lambda_lpips: f64,
    /// Present for completeness; only 0 is supported.
    pub lambda_adv: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub seed: u64,
    pub view_size: u32,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            spans: [3, 0, 0, 0],
            widths: [32, 64, 128],
            heads: 4,
            blocks: 2,
            latent_dim: 16,
            window: 4,
            logvar_init: 0.0,
            loss: LossKind::Render,
            lambda_l1: 1.0,
            lambda_prune: 1.0,
            lambda_kl: 1e-6,
            lambda_lpips: 0.0,
            lambda_adv: 0.0,
            lr: 1e-4,
            weight_decay: 0.01,
            steps: 2000,
            seed: 0,
            view_size: 64,
        }
    }
}

const ARCH_KEYS: [&str; 7] = ["resolution", "spans", "widths", "heads", "blocks", "latent_dim", "window"];

impl VaeConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn layout(&self) -> ChannelLayout {
        let [c, s, p, e] = self.spans;
        ChannelLayout::new(c, s, p, e)
    }

    pub fn channels(&self) -> usize {
        self.layout().channels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return bad(format!("resolution {} must be a power of two >= 8", self.resolution));
        }
        if self.channels() == 0 {
            return bad("at least one channel is required".into());
        }
        if self.widths.contains(&0) || self.latent_dim == 0 || self.heads == 0 {
            return bad("widths, latent_dim and heads must be positive".into());
        }
        if self.widths[2] % self.heads != 0 {
            return bad(format!("width {} is not divisible by {} heads", self.widths[2], self.heads));
        }
        if self.lambda_lpips != 0.0 || self.lambda_adv != 0.0 {
            return bad("perceptual and adversarial terms are not implemented; keep their weights at 0".into());
        }
        Ok(())
    }

    pub(crate) fn write_blobs(&self, s: &mut ParamStore) {
        let vals: [Vec<f64>; 7] = [
            vec![self.resolution as f64],
            self.spans.iter().map(|&v| v as f64).collect(),
            self.widths.iter().map(|&v| v as f64).collect(),
            vec![self.heads as f64],
            vec![self.blocks as f64],
            vec![self.latent_dim as f64],
            vec![self.window as f64],
        ];
        for (k, v) in ARCH_KEYS.iter().zip(vals) {
            let n = v.len();
            s.add_values(&format!("cfg.vae.{k}"), &[n], v);
        }
    }

    pub(crate) fn from_blobs(s: &ParamStore) -> Result<Self> {
        let get = |k: &str| -> Result<Vec<usize>> {
            let id = s.find(&format!("cfg.vae.{k}")).ok_or_else(|| Error::MissingParam(format!("cfg.vae.{k}")))?;
            Ok(s.get(id).iter().map(|&v| v as usize).collect())
        };
        let arr3 = |v: Vec<usize>, k: &str| -> Result<[usize; 3]> {
            v.try_into().map_err(|_| Error::Config(format!("checkpoint field {k} has the wrong length")))
        };
        let spans = get("spans")?;
        if spans.len() != 4 {
            return Err(Error::Config("checkpoint spans must have 4 entries".into()));
        }
        let one = |k: &str| -> Result<usize> {
            get(k)?.first().copied().ok_or_else(|| Error::Config(format!("checkpoint field {k} is empty")))
        };
        Ok(Self {
            resolution: one("resolution")? as u32,
            spans: [spans[0] as u32, spans[1] as u32, spans[2] as u32, spans[3] as u32],
            widths: arr3(get("widths")?, "widths")?,
            heads: one("heads")?,
            blocks: one("blocks")?,
            latent_dim: one("latent_dim")?,
            window: one("window")? as u32,
            ..Self::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_overrides_defaults() {
        let c = VaeConfig::from_toml("steps = 50\nloss = \"cube-mse\"\nwidths = [8, 8, 12]\n").unwrap();
        assert_eq!(c.steps, 50);
        assert_eq!(c.loss, LossKind::CubeMse);
        assert_eq!(c.widths, [8, 8, 12]);
        assert_eq!(c.lr, 1e-4);
        assert!(VaeConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn rejects_nonzero_perceptual_weight() {
        let c = VaeConfig { lambda_lpips: 0.1, ..VaeConfig::default() };
        assert!(c.validate().is_err());
    }
}
