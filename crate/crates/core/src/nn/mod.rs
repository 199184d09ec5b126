//! Small reverse-mode autodiff engine and the network primitives built on it.

pub mod embed;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod sparse;
pub mod tape;


pub use embed::{position_embed, time_embed};
pub use gradcheck::grad_check;
pub use layers::{cross_attention, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use optim::AdamW;
pub use params::{ParamId, ParamStore, CHECKPOINT_MAGIC};
pub use sparse::{
    downsample_map, sparse_conv, submanifold_map, upsample_map, window_groups, windowed_attention,
    windowed_sparse_attention, SparseConv, SparseTokenSet,
};
pub use tape::{AttnGroups, Gradients, KernelMap, SparseRows, Tape, TapPairs, Unary, Var};
