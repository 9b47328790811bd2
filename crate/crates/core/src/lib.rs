//! Hybrid full/sparse attention at desk scale.
//!
//! Block-sparse layouts ([`sparsity`]), exact tiled attention kernels
//! ([`attention`]), a toy hybrid decoder with hand-written backward pass
//! ([`model`]), a block-granular KV cache ([`kvcache`]) and closed-form cost
//! accounting ([`costmodel`]).

pub mod attention;
pub mod costmodel;
pub mod error;
pub mod gradcheck;
pub mod kvcache;
pub mod model;
pub mod numerics;
pub mod sparsity;

pub use error::{Error, Result};
pub use numerics::{Matrix, RopeConfig, StreamStat};
pub use sparsity::{build_layout, is_allowed, retained_token_count, BlockLayout, Pattern, PatternSpec};
pub use costmodel::{layer_costs, predicted_speedup, validate_against_kernel, CostConfig, CostReport, FlopsConvention};
pub use kvcache::{decode_step, prefill, CacheConfig, KVCacheState};
pub use model::{build_layer_map, HybridModel, LayerMap, ModelConfig, Placement};
