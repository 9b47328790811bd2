use std::fmt;
use std::str::FromStr;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::sparsity::PatternSpec;

/// Where the full-attention layers sit in the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    Top,
    Middle,
    Bottom,
    Interleave,
}

impl Placement {
    pub const ALL: [Placement; 4] = [
        Placement::Top,
        Placement::Middle,
        Placement::Bottom,
        Placement::Interleave,
    ];

    /// Indices of the `n_full` full layers out of `n_layers`.
    pub fn full_layers(self, n_layers: usize, n_full: usize) -> Vec<usize> {
        let n_full = n_full.min(n_layers);
        match self {
            Placement::Bottom => (0..n_full).collect(),
            Placement::Top => (n_layers - n_full..n_layers).collect(),
            Placement::Middle => {
                let start = (n_layers - n_full) / 2;
                (start..start + n_full).collect()
            }
            Placement::Interleave => {
                // alternate sparse/full around the middle: S F S F ... F S
                let span = 2 * n_full + 1;
                if span <= n_layers {
                    let start = (n_layers - span) / 2;
                    (0..n_full).map(|i| start + 1 + 2 * i).collect()
                } else {
                    (1..=n_full).map(|i| i * n_layers / (n_full + 1)).collect()
                }
            }
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Top => "top",
            Placement::Middle => "middle",
            Placement::Bottom => "bottom",
            Placement::Interleave => "interleave",
        })
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "top" => Ok(Placement::Top),
            "middle" => Ok(Placement::Middle),
            "bottom" => Ok(Placement::Bottom),
            "interleave" => Ok(Placement::Interleave),
            other => Err(Error::InvalidConfig(format!("unknown placement `{other}`"))),
        }
    }
}

/// Per-layer attention pattern assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMap {
    specs: Vec<PatternSpec>,
    pub placement: Placement,
    pub full_fraction: f64,
}

/// Assigns `⌈full_fraction · n_layers⌉` full layers at `placement`; every
/// other layer gets `sparse`.
pub fn build_layer_map(
    cfg: &ModelConfig,
    sparse: PatternSpec,
    placement: Placement,
    full_fraction: f64,
) -> Result<LayerMap> {
    if !(full_fraction > 0.0 && full_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "full_fraction must be in (0, 1], got {full_fraction}"
        )));
    }
    let exact = full_fraction * cfg.n_layers as f64;
    if exact < 1.0 - 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "full_fraction {full_fraction} of {} layers leaves no full layer",
            cfg.n_layers
        )));
    }
    // tolerate 1/3 · 6 = 2.0000000000000004
    let n_full = (exact - 1e-9).ceil() as usize;
    let mut map = LayerMap::with_full_count(cfg, sparse, placement, n_full)?;
    map.full_fraction = full_fraction;
    Ok(map)
}

impl LayerMap {
    /// Map with an explicit number of full layers (zero allowed).
    pub fn with_full_count(
        cfg: &ModelConfig,
        sparse: PatternSpec,
        placement: Placement,
        n_full: usize,
    ) -> Result<Self> {
        sparse.validate()?;
        if sparse.block_size != cfg.block_size {
            return Err(Error::InvalidConfig(format!(
                "pattern block size {} differs from model block size {}",
                sparse.block_size, cfg.block_size
            )));
        }
        if n_full > cfg.n_layers {
            return Err(Error::InvalidConfig(format!(
                "{n_full} full layers requested for a {}-layer model",
                cfg.n_layers
            )));
        }
        let full = PatternSpec::full(cfg.block_size);
        let mut specs = vec![sparse; cfg.n_layers];
        for l in placement.full_layers(cfg.n_layers, n_full) {
            specs[l] = full;
        }
        Ok(Self {
            specs,
            placement,
            full_fraction: n_full as f64 / cfg.n_layers as f64,
        })
    }

    /// Every layer full: the baseline transformer.
    pub fn all_full(cfg: &ModelConfig) -> Self {
        Self {
            specs: vec![PatternSpec::full(cfg.block_size); cfg.n_layers],
            placement: Placement::Middle,
            full_fraction: 1.0,
        }
    }

    pub fn from_specs(specs: Vec<PatternSpec>, placement: Placement) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidConfig("layer map needs at least one layer".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        let full = specs.iter().filter(|s| s.is_full()).count();
        Ok(Self {
            full_fraction: full as f64 / specs.len() as f64,
            specs,
            placement,
        })
    }

    pub fn specs(&self) -> &[PatternSpec] {
        &self.specs
    }

    pub fn spec(&self, layer: usize) -> &PatternSpec {
        &self.specs[layer]
    }

    pub fn n_layers(&self) -> usize {
        self.specs.len()
    }

    pub fn full_layers(&self) -> Vec<usize> {
        (0..self.specs.len()).filter(|&l| self.specs[l].is_full()).collect()
    }

    pub fn n_full(&self) -> usize {
        self.specs.iter().filter(|s| s.is_full()).count()
    }

    /// Same map with every sparse layer replaced by `sparse`.
    pub fn with_sparse(&self, sparse: PatternSpec) -> Self {
        let specs = self
            .specs
            .iter()
            .map(|s| if s.is_full() { *s } else { sparse })
            .collect();
        Self {
            specs,
            placement: self.placement,
            full_fraction: self.full_fraction,
        }
    }

    pub(crate) fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.specs.len() != cfg.n_layers {
            return Err(Error::shape("layer map", cfg.n_layers, self.specs.len()));
        }
        if let Some(s) = self.specs.iter().find(|s| s.block_size != cfg.block_size) {
            return Err(Error::InvalidConfig(format!(
                "layer pattern block size {} differs from model block size {}",
                s.block_size, cfg.block_size
            )));
        }
        Ok(())
    }
}
