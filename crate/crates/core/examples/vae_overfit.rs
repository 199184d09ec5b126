//! Overfit the VAE on one procedural sphere and report render L1 and prune
//! accuracy. Usage: `vae_overfit [seed] [steps] [logvar_init]`.

use std::time::Instant;

use attrgrid::assets::sphere_asset;
use attrgrid::vae::{AssetPlan, Vae, VaeConfig, VaeTrainer};

fn main() -> attrgrid::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let logvar_init: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let asset = sphere_asset(32, 0.17, 0)?;
    println!("asset voxels: {}", asset.grid.len());
    let cfg = VaeConfig { logvar_init, ..VaeConfig::default() };
    let vae = Vae::new(cfg, seed)?;
    println!("parameters: {}", vae.store.num_values());
    let plan = AssetPlan::new(&vae, &asset.grid, Some(&asset.mesh))?;
    println!("latent tokens: {}, pixels: {}, candidates: {}", plan.latent_len(), plan.pixel_count(), plan.labels.len());
    let mut tr = VaeTrainer::new(vae, seed);
    let start = Instant::now();
    for s in 0..steps {
        let rec = tr.train_step(&plan)?;
        if s % 100 == 0 || s + 1 == steps {
            let ev = tr.evaluate(&plan)?;
            println!(
                "step {s:5} loss {:.4} l1 {:.4} bce {:.4} kl {:.2} | eval l1 {:.4} acc {:.4} ({:.1}s)",
                rec.total,
                rec.recon,
                rec.prune,
                rec.kl,
                ev.render_l1,
                ev.prune_accuracy,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
