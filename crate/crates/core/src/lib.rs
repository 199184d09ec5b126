pub mod assets;
pub mod dit;
pub mod error;
pub mod grid;
pub mod mesh;
pub mod nn;
pub mod projection;
pub mod pruning;
pub mod render;
pub mod segment;
pub mod uv;
pub mod vae;

mod binio;
mod par;

pub use error::{Error, Result};

/// The crate's seeded generator: ChaCha with 8 rounds, a counter-based
/// 64-bit-seeded stream, reproducible across platforms.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
