//! Paired DiT runs with and without the sparse condition, one line per seed.
use std::time::Instant;

use attrgrid::dit::{sparse_condition_ablation, toy_flow_benchmark, AblationConfig, ToyFlowConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(400);
    let t0 = Instant::now();
    let toy = toy_flow_benchmark(&ToyFlowConfig::default()).unwrap();
    println!("toy {toy:?} ({:.1}s)", t0.elapsed().as_secs_f64());
    let cfg = AblationConfig { steps, ..AblationConfig::default() };
    for seed in 0..5 {
        let t0 = Instant::now();
        let o = sparse_condition_ablation(&cfg, seed).unwrap();
        println!("seed {seed}: with {:.5} without {:.5} ({:.1}s)", o.with_sparse, o.without_sparse, t0.elapsed().as_secs_f64());
    }
}
