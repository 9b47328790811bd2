//! Toy pre-norm decoder with a per-layer attention pattern.
//!
//! Layers listed as full in the [`LayerMap`] use causal attention; the rest
//! use the sparse pattern. Everything (forward, backward, Adam and the
//! checkpoint format) is hand-written on top of [`crate::numerics`].

mod adam;
mod checkpoint;
mod layer_map;
mod params;
mod transformer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layer_map::{build_layer_map, LayerMap, Placement};
pub use params::{LayerParams, Parameters};
pub use transformer::{
    backward, cross_entropy, forward, forward_trace, loss_and_grads, loss_and_grads_masked,
    ForwardTrace, LayerTrace,
};

pub(crate) use transformer::{gelu, rms_norm_row};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::RopeConfig;
use crate::sparsity::DEFAULT_BLOCK_SIZE;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub block_size: usize,
    pub rope: RopeConfig,
    pub seed: u64,
    /// Reuse the embedding matrix as the output projection.
    pub tied_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 4,
            head_dim: 16,
            ffn_mult: 4,
            vocab_size: 64,
            block_size: DEFAULT_BLOCK_SIZE,
            rope: RopeConfig {
                head_dim: 16,
                base: RopeConfig::DEFAULT_BASE,
            },
            seed: 0,
            tied_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.head_dim == 0 || self.ffn_mult == 0 {
            return bad("n_heads, head_dim and ffn_mult must be positive".into());
        }
        if self.vocab_size == 0 || self.block_size == 0 {
            return bad("vocab_size and block_size must be positive".into());
        }
        if self.rope.head_dim != self.head_dim {
            return bad(format!(
                "rope head_dim {} differs from head_dim {}",
                self.rope.head_dim, self.head_dim
            ));
        }
        self.rope.validate()
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden();
        let f = self.ffn_hidden();
        let per_layer = 2 * h + 4 * h * h + 2 * h * f;
        let unembed = if self.tied_embeddings { 0 } else { h * self.vocab_size };
        self.vocab_size * h + self.n_layers * per_layer + h + unembed
    }
}

/// Model weights together with the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl HybridModel {
    /// Scaled-normal initialization (std 0.02, residual output projections
    /// shrunk by `1/√(2·n_layers)`), deterministic in `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Parameters::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }
}
