//! Closed-form cost accounting for hybrid full/sparse attention stacks.
//!
//! Conventions:
//! - a multiply-add is 2 FLOPs;
//! - per layer and head, the Q/K/V/O projections cost `2·4·N·D²` and the
//!   attention core costs `4·pairs·D` (`QKᵀ` plus `PV`), where `pairs`
//!   counts visible (query, key) pairs;
//! - training is 3× the forward pass (backward = 2× forward); prefill is
//!   one forward pass;
//! - KV bytes are `retained tokens · 2 · n_heads · D · bytes_per_element`.
//!
//! Under [`FlopsConvention::TokenExact`] `pairs` is the exact causal count;
//! under [`FlopsConvention::Tile`] every visited tile counts `block_size²`
//! pairs, padding and masked diagonal entries included, which is what the
//! blocked kernel actually computes.
//!
//! Ratios compare against the same stack with every layer full.

use std::fmt;

use crate::error::{Error, Result};
use crate::sparsity::{retained_token_count, PatternSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FlopsConvention {
    #[default]
    TokenExact,
    Tile,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostConfig {
    pub n_tokens: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub l_full: usize,
    pub l_sparse: usize,
    /// Pattern of the sparse layers.
    pub spec: PatternSpec,
    pub convention: FlopsConvention,
    pub bytes_per_element: usize,
    /// Share of baseline FLOPs spent outside attention layers (FFN etc.),
    /// which sparsity leaves unchanged.
    pub ffn_share: f64,
}

impl CostConfig {
    pub fn new(
        n_tokens: usize,
        head_dim: usize,
        n_heads: usize,
        l_full: usize,
        l_sparse: usize,
        spec: PatternSpec,
    ) -> Self {
        Self {
            n_tokens,
            head_dim,
            n_heads,
            l_full,
            l_sparse,
            spec,
            convention: FlopsConvention::TokenExact,
            bytes_per_element: 2,
            ffn_share: 0.0,
        }
    }

    /// 32 layers, 32 heads of dimension 128, AttnSink{1,32} with 64-token
    /// blocks at 128K tokens, `l_full` of the layers full.
    pub fn llama2_7b(l_full: usize) -> Self {
        Self::new(131_072, 128, 32, l_full, 32 - l_full, PatternSpec::attn_sink(1, 32, 64))
    }

    pub fn n_layers(&self) -> usize {
        self.l_full + self.l_sparse
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_tokens == 0 || self.head_dim == 0 || self.n_heads == 0 {
            return bad("n_tokens, head_dim and n_heads must be positive".into());
        }
        if self.n_layers() == 0 {
            return bad("at least one layer is required".into());
        }
        if !(0.0..1.0).contains(&self.ffn_share) {
            return bad(format!("ffn_share must be in [0, 1), got {}", self.ffn_share));
        }
        Ok(())
    }
}

/// Per-stack totals for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub train_flops_full: f64,
    pub train_flops_sparse: f64,
    pub kv_bytes_full: u64,
    pub kv_bytes_sparse: u64,
    pub prefill_flops_full: f64,
    pub prefill_flops_sparse: f64,
    /// Tokens one sparse layer keeps at length N.
    pub retained_tokens_sparse: usize,
    pub ratios: CostRatios,
    pub asymptotic_fraction: f64,
}

impl CostReport {
    pub fn kv_bytes(&self) -> u64 {
        self.kv_bytes_full + self.kv_bytes_sparse
    }

    pub fn kv_reduction(&self) -> f64 {
        1.0 - self.ratios.kv
    }
}

/// Hybrid cost over all-full cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostRatios {
    pub train: f64,
    pub kv: f64,
    pub prefill: f64,
}

/// FLOPs/bytes-based upper bounds on speedup, not wall-clock predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Speedups {
    pub training: f64,
    pub prefill: f64,
    pub decode: f64,
}

impl fmt::Display for Speedups {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "train {:.3}x / prefill {:.3}x / decode {:.3}x (upper bound)",
            self.training, self.prefill, self.decode
        )
    }
}

/// Exact number of causal (query, key) pairs the pattern allows.
pub fn visible_pairs(spec: &PatternSpec, n_tokens: usize) -> u64 {
    let bs = spec.block_size;
    (0..spec.n_blocks(n_tokens))
        .map(|r| {
            let m = (n_tokens - r * bs).min(bs) as u64;
            m * (spec.row_len(r) as u64 - 1) * bs as u64 + m * (m + 1) / 2
        })
        .sum()
}

/// Tiles the blocked kernel visits per head, from the row lengths alone.
pub fn predicted_tiles(spec: &PatternSpec, n_tokens: usize) -> u64 {
    (0..spec.n_blocks(n_tokens)).map(|r| spec.row_len(r) as u64).sum()
}

fn pairs(spec: &PatternSpec, n: usize, conv: FlopsConvention) -> f64 {
    match conv {
        FlopsConvention::TokenExact => visible_pairs(spec, n) as f64,
        FlopsConvention::Tile => (predicted_tiles(spec, n) * (spec.block_size * spec.block_size) as u64) as f64,
    }
}

/// Forward FLOPs of one attention layer (all heads).
fn forward_flops(cfg: &CostConfig, spec: &PatternSpec) -> f64 {
    let (n, d, h) = (cfg.n_tokens as f64, cfg.head_dim as f64, cfg.n_heads as f64);
    h * (8.0 * n * d * d + 4.0 * pairs(spec, cfg.n_tokens, cfg.convention) * d)
}

fn kv_bytes_layer(cfg: &CostConfig, spec: &PatternSpec) -> u64 {
    (retained_token_count(spec, cfg.n_tokens) * 2 * cfg.n_heads * cfg.head_dim * cfg.bytes_per_element) as u64
}

pub fn layer_costs(cfg: &CostConfig) -> Result<CostReport> {
    cfg.validate()?;
    let full = PatternSpec::full(cfg.spec.block_size);
    let (lf, ls) = (cfg.l_full as f64, cfg.l_sparse as f64);
    let fwd_full = forward_flops(cfg, &full);
    let fwd_sparse = forward_flops(cfg, &cfg.spec);
    let kv_full = kv_bytes_layer(cfg, &full);
    let kv_sparse = kv_bytes_layer(cfg, &cfg.spec);
    let n_layers = cfg.n_layers() as f64;

    let report = CostReport {
        train_flops_full: 3.0 * lf * fwd_full,
        train_flops_sparse: 3.0 * ls * fwd_sparse,
        kv_bytes_full: cfg.l_full as u64 * kv_full,
        kv_bytes_sparse: cfg.l_sparse as u64 * kv_sparse,
        prefill_flops_full: lf * fwd_full,
        prefill_flops_sparse: ls * fwd_sparse,
        retained_tokens_sparse: retained_token_count(&cfg.spec, cfg.n_tokens),
        ratios: CostRatios {
            train: (lf * fwd_full + ls * fwd_sparse) / (n_layers * fwd_full),
            kv: (cfg.l_full as u64 * kv_full + cfg.l_sparse as u64 * kv_sparse) as f64
                / (n_layers * kv_full as f64),
            prefill: (lf * fwd_full + ls * fwd_sparse) / (n_layers * fwd_full),
        },
        asymptotic_fraction: lf / n_layers,
    };
    Ok(report)
}

/// Amdahl-style bounds: FLOP-bound phases only speed up their attention
/// share, decode is bound by KV bytes read.
pub fn predicted_speedup(cfg: &CostConfig) -> Result<Speedups> {
    let r = layer_costs(cfg)?.ratios;
    let amdahl = |ratio: f64| 1.0 / (cfg.ffn_share + (1.0 - cfg.ffn_share) * ratio);
    Ok(Speedups {
        training: amdahl(r.train),
        prefill: amdahl(r.prefill),
        decode: 1.0 / r.kv,
    })
}

/// Predicted against measured score FLOPs of one sparse layer and head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelCheck {
    pub predicted_tiles: u64,
    pub measured_tiles: u64,
    /// `tiles · block_size² · D · 2` for the `QKᵀ` product.
    pub predicted_score_flops: u64,
    pub measured_score_flops: u64,
}

/// Compares the closed-form tile count for `cfg.spec` at `cfg.n_tokens`
/// with the tiles a kernel run reported. Any difference is an error.
pub fn validate_against_kernel(cfg: &CostConfig, measured_tiles: u64) -> Result<KernelCheck> {
    cfg.spec.validate()?;
    let predicted = predicted_tiles(&cfg.spec, cfg.n_tokens);
    let per_tile = (cfg.spec.block_size * cfg.spec.block_size * cfg.head_dim * 2) as u64;
    if predicted != measured_tiles {
        return Err(Error::CostMismatch {
            predicted,
            measured: measured_tiles,
        });
    }
    Ok(KernelCheck {
        predicted_tiles: predicted,
        measured_tiles,
        predicted_score_flops: predicted * per_tile,
        measured_score_flops: measured_tiles * per_tile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{blocked_forward, AttnInput};
    use crate::numerics::Matrix;
    use crate::sparsity::{build_layout, is_allowed};
    use proptest::prelude::*;

    #[test]
    fn all_full_ratios_are_one() {
        let cfg = CostConfig::llama2_7b(32);
        let r = layer_costs(&cfg).unwrap();
        assert_eq!(r.ratios, CostRatios { train: 1.0, kv: 1.0, prefill: 1.0 });
        assert_eq!(r.kv_bytes_sparse, 0);
        let s = predicted_speedup(&cfg).unwrap();
        assert_eq!((s.training, s.prefill, s.decode), (1.0, 1.0, 1.0));
    }

    #[test]
    fn llama_geometry_kv() {
        let r = layer_costs(&CostConfig::llama2_7b(12)).unwrap();
        assert_eq!(r.retained_tokens_sparse, 2112);
        let expected = (12.0 * 131_072.0 + 20.0 * 2112.0) / (32.0 * 131_072.0);
        assert!((r.ratios.kv - expected).abs() < 1e-15);
        assert!((r.kv_reduction() - 0.615).abs() < 1e-3);
        assert_eq!(layer_costs(&CostConfig::llama2_7b(32)).unwrap().kv_bytes(), 68_719_476_736);
        let five = layer_costs(&CostConfig::llama2_7b(5)).unwrap();
        assert!((five.ratios.kv - 0.170).abs() < 1e-3);
    }

    #[test]
    fn llama_geometry_speedup_bounds() {
        let s = predicted_speedup(&CostConfig::llama2_7b(12)).unwrap();
        assert!((s.decode - 1.0 / 0.38507).abs() < 1e-3);
        // dense projections keep the FLOP bound a little below the KV bound
        assert!((s.prefill - 2.519).abs() < 1e-3, "{s}");
        assert!(s.prefill < s.decode && s.prefill < 1.0 / 0.375);
        let mut cfg = CostConfig::llama2_7b(12);
        cfg.ffn_share = 0.5;
        let damped = predicted_speedup(&cfg).unwrap();
        assert!(damped.training < s.training && damped.training > 1.0);
        assert_eq!(damped.decode, s.decode);
    }

    #[test]
    fn train_ratio_approaches_full_fraction() {
        let mut cfg = CostConfig::llama2_7b(12);
        cfg.n_tokens = 1 << 20;
        let r = layer_costs(&cfg).unwrap();
        assert_eq!(r.asymptotic_fraction, 0.375);
        assert!((r.ratios.train - 0.375).abs() / 0.375 < 0.02, "{}", r.ratios.train);
        let mut prev = 1.0;
        for log_n in 12..=20 {
            cfg.n_tokens = 1 << log_n;
            let t = layer_costs(&cfg).unwrap().ratios.train;
            assert!(t < prev && t > 0.375);
            prev = t;
        }
    }

    #[test]
    fn kernel_tile_examples() {
        assert_eq!(predicted_tiles(&PatternSpec::full(16), 256), 136);
        assert_eq!(predicted_tiles(&PatternSpec::attn_sink(1, 2, 16), 64), 9);
        let ok = validate_against_kernel(&CostConfig::new(256, 8, 1, 0, 1, PatternSpec::full(16)), 136).unwrap();
        assert_eq!(ok.predicted_score_flops, 136 * 256 * 8 * 2);
        let cfg = CostConfig::new(64, 8, 1, 0, 1, PatternSpec::attn_sink(1, 2, 16));
        assert!(matches!(
            validate_against_kernel(&cfg, 10),
            Err(Error::CostMismatch { predicted: 9, measured: 10 })
        ));
    }

    #[test]
    fn kernel_tiles_match_closed_form() {
        for spec in [
            PatternSpec::full(16),
            PatternSpec::attn_sink(1, 2, 16),
            PatternSpec::attn_sink(2, 3, 8),
            PatternSpec::block_stride(4, 8),
            PatternSpec::block_stride(3, 16),
        ] {
            for n in [1, 15, 64, 100, 256] {
                let q = Matrix::from_fn(n, 4, |r, c| ((r * 7 + c) % 5) as f64 * 0.1);
                let layout = build_layout(&spec, spec.n_blocks(n));
                let (_, saved) = blocked_forward(&AttnInput::new(&q, &q, &q, &layout)).unwrap();
                let cfg = CostConfig::new(n, 4, 1, 0, 1, spec);
                validate_against_kernel(&cfg, saved.tiles_visited).unwrap();
            }
        }
    }

    #[test]
    fn visible_pairs_matches_brute_force() {
        for spec in [PatternSpec::full(4), PatternSpec::attn_sink(1, 2, 4), PatternSpec::block_stride(3, 4)] {
            for n in 1..60 {
                let brute = (0..n)
                    .flat_map(|q| (0..n).map(move |k| (q, k)))
                    .filter(|&(q, k)| is_allowed(&spec, q, k))
                    .count() as u64;
                assert_eq!(visible_pairs(&spec, n), brute);
            }
        }
    }

    #[test]
    fn tile_convention_counts_padding() {
        let mut cfg = CostConfig::new(100, 8, 2, 1, 1, PatternSpec::attn_sink(1, 2, 16));
        let exact = layer_costs(&cfg).unwrap();
        cfg.convention = FlopsConvention::Tile;
        let tiled = layer_costs(&cfg).unwrap();
        assert!(tiled.prefill_flops_sparse > exact.prefill_flops_sparse);
        assert_eq!(tiled.kv_bytes(), exact.kv_bytes());
    }

    fn spec_strategy() -> impl Strategy<Value = PatternSpec> {
        prop_oneof![
            (1usize..4, 1usize..8).prop_map(|(s, w)| PatternSpec::attn_sink(s, w, 8)),
            (1usize..8).prop_map(|k| PatternSpec::block_stride(k, 8)),
        ]
    }

    proptest! {
        #[test]
        fn more_full_layers_never_cost_less(spec in spec_strategy(), n in 1usize..2000, lf in 0usize..8, ls in 1usize..8) {
            let a = layer_costs(&CostConfig::new(n, 8, 2, lf, ls, spec)).unwrap();
            let b = layer_costs(&CostConfig::new(n, 8, 2, lf + 1, ls - 1, spec)).unwrap();
            prop_assert!(b.kv_bytes() >= a.kv_bytes());
            prop_assert!(b.train_flops_full + b.train_flops_sparse >= a.train_flops_full + a.train_flops_sparse);
            prop_assert!(b.ratios.prefill >= a.ratios.prefill);
            let c = layer_costs(&CostConfig::new(n, 8, 2, lf + 1, ls, spec)).unwrap();
            prop_assert!(c.prefill_flops_full + c.prefill_flops_sparse >= a.prefill_flops_full + a.prefill_flops_sparse);
            prop_assert!(c.kv_bytes() >= a.kv_bytes());
        }

        #[test]
        fn denser_patterns_never_cost_less(n in 1usize..3000, s in 1usize..4, w in 1usize..10, k in 2usize..10) {
            let cost = |spec| layer_costs(&CostConfig::new(n, 8, 1, 0, 1, spec)).unwrap();
            let (a, b) = (cost(PatternSpec::attn_sink(s, w, 8)), cost(PatternSpec::attn_sink(s, w + 1, 8)));
            prop_assert!(b.train_flops_sparse >= a.train_flops_sparse && b.kv_bytes() >= a.kv_bytes());
            let (a, b) = (cost(PatternSpec::attn_sink(s, w, 8)), cost(PatternSpec::attn_sink(s + 1, w, 8)));
            prop_assert!(b.train_flops_sparse >= a.train_flops_sparse && b.kv_bytes() >= a.kv_bytes());
            // stride k - 1 keeps a superset only when k - 1 divides k, i.e. k = 2
            let (a, b) = (cost(PatternSpec::block_stride(k, 8)), cost(PatternSpec::block_stride(1, 8)));
            prop_assert!(b.train_flops_sparse >= a.train_flops_sparse && b.kv_bytes() >= a.kv_bytes());
            let (a, b) = (cost(PatternSpec::block_stride(2 * k, 8)), cost(PatternSpec::block_stride(k, 8)));
            prop_assert!(b.train_flops_sparse >= a.train_flops_sparse && b.kv_bytes() >= a.kv_bytes());
        }
    }
}
