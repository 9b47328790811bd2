//! Block-granular KV cache for autoregressive decoding.
//!
//! Each layer keeps exactly the key blocks its pattern lets the newest
//! position see. Full layers keep everything, block-stride layers keep the
//! stride multiples plus the block being filled, and attention-sink layers
//! keep the sink blocks plus a rolling buffer of `window_blocks` slots where
//! block `b` lives in slot `b mod window_blocks`.
//!
//! Eviction happens only when the first token of a new block arrives, so an
//! incomplete block is always resident in full.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{forward_trace, gelu, rms_norm_row, HybridModel, LayerMap, ModelConfig};
use crate::numerics::{dot, gemm, merge_into, rope_apply, Matrix, StreamStat};
use crate::sparsity::{retained_token_count, Pattern, PatternSpec};

/// Static description of a cache: model geometry, layer patterns, capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheConfig {
    pub model: ModelConfig,
    pub map: LayerMap,
    pub max_seq_len: usize,
    /// Bytes per stored element for accounting; 2 models a BF16 cache.
    pub bytes_per_element: usize,
}

impl CacheConfig {
    pub const DEFAULT_BYTES_PER_ELEMENT: usize = 2;

    pub fn new(model: ModelConfig, map: LayerMap, max_seq_len: usize) -> Result<Self> {
        let cfg = Self {
            model,
            map,
            max_seq_len,
            bytes_per_element: Self::DEFAULT_BYTES_PER_ELEMENT,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.map.check(&self.model)?;
        if self.max_seq_len == 0 || !self.max_seq_len.is_multiple_of(self.model.block_size) {
            return Err(Error::InvalidConfig(format!(
                "max_seq_len {} must be a positive multiple of block size {}",
                self.max_seq_len, self.model.block_size
            )));
        }
        if self.bytes_per_element == 0 {
            return Err(Error::InvalidConfig("bytes_per_element must be positive".into()));
        }
        Ok(())
    }

    /// Bytes for one cached token in one layer (K and V, all heads).
    pub fn bytes_per_token(&self) -> u64 {
        2 * (self.model.n_heads * self.model.head_dim * self.bytes_per_element) as u64
    }

    /// Closed-form cache size after `n_tokens` tokens, without building a cache.
    pub fn bytes_at(&self, n_tokens: usize) -> u64 {
        self.map
            .specs()
            .iter()
            .map(|s| retained_token_count(s, n_tokens) as u64)
            .sum::<u64>()
            * self.bytes_per_token()
    }

    /// `bytes_at(n)` relative to the same geometry with every layer full.
    pub fn retained_fraction_at(&self, n_tokens: usize) -> f64 {
        let full = (self.map.n_layers() * n_tokens) as f64;
        let kept: usize = self
            .map
            .specs()
            .iter()
            .map(|s| retained_token_count(s, n_tokens))
            .sum();
        kept as f64 / full
    }
}

/// Keys and values of one block for every head. Rows past `len` are unused.
#[derive(Clone, Debug)]
pub struct CachedBlock {
    pub index: usize,
    pub len: usize,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl CachedBlock {
    fn new(index: usize, n_heads: usize, block_size: usize, head_dim: usize) -> Self {
        Self {
            index,
            len: 0,
            k: vec![Matrix::zeros(block_size, head_dim); n_heads],
            v: vec![Matrix::zeros(block_size, head_dim); n_heads],
        }
    }
}

/// A block dropped from a layer, recorded when the token that caused it
/// arrived.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Eviction {
    pub layer: usize,
    pub block: usize,
    /// Position of the token whose arrival triggered the eviction.
    pub at_token: usize,
}

#[derive(Clone, Debug)]
enum LayerStore {
    /// Blocks in index order.
    Full(Vec<CachedBlock>),
    /// Completed stride multiples, then possibly the block being filled.
    Stride {
        stride: usize,
        blocks: Vec<CachedBlock>,
    },
    Sink {
        sink_blocks: usize,
        sinks: Vec<CachedBlock>,
        ring: Vec<Option<CachedBlock>>,
        /// Slot holding the newest window block.
        cursor: usize,
    },
}

impl LayerStore {
    fn new(spec: &PatternSpec) -> Self {
        match spec.pattern {
            Pattern::Full => LayerStore::Full(Vec::new()),
            Pattern::BlockStride { stride_blocks } => LayerStore::Stride {
                stride: stride_blocks,
                blocks: Vec::new(),
            },
            Pattern::AttnSink {
                sink_blocks,
                window_blocks,
            } => LayerStore::Sink {
                sink_blocks,
                sinks: Vec::new(),
                ring: vec![None; window_blocks],
                cursor: 0,
            },
        }
    }

    /// Starts block `index`, returning any block that falls out of the row.
    fn open_block(&mut self, block: CachedBlock) -> Option<usize> {
        match self {
            LayerStore::Full(blocks) => {
                blocks.push(block);
                None
            }
            LayerStore::Stride { stride, blocks } => {
                let evicted = match blocks.last() {
                    Some(prev) if prev.index % *stride != 0 => blocks.pop().map(|b| b.index),
                    _ => None,
                };
                blocks.push(block);
                evicted
            }
            LayerStore::Sink {
                sink_blocks,
                sinks,
                ring,
                cursor,
            } => {
                if block.index < *sink_blocks {
                    sinks.push(block);
                    return None;
                }
                let slot = block.index % ring.len();
                *cursor = slot;
                ring[slot].replace(block).map(|old| old.index)
            }
        }
    }

    fn newest_mut(&mut self) -> Option<&mut CachedBlock> {
        match self {
            LayerStore::Full(blocks) | LayerStore::Stride { blocks, .. } => blocks.last_mut(),
            LayerStore::Sink {
                sinks, ring, cursor, ..
            } => match ring[*cursor].as_mut() {
                Some(b) => Some(b),
                None => sinks.last_mut(),
            },
        }
    }

    /// Resident blocks in index order.
    fn blocks(&self) -> Vec<&CachedBlock> {
        match self {
            LayerStore::Full(blocks) | LayerStore::Stride { blocks, .. } => blocks.iter().collect(),
            LayerStore::Sink { sinks, ring, .. } => {
                let mut out: Vec<&CachedBlock> = sinks.iter().chain(ring.iter().flatten()).collect();
                out.sort_by_key(|b| b.index);
                out
            }
        }
    }
}

/// Per-sequence cache state. One writer at a time.
#[derive(Clone, Debug)]
pub struct KVCacheState {
    config: CacheConfig,
    layers: Vec<LayerStore>,
    tokens_seen: usize,
    evictions: Vec<Eviction>,
}

impl KVCacheState {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        let layers = config.map.specs().iter().map(LayerStore::new).collect();
        Ok(Self {
            config,
            layers,
            tokens_seen: 0,
            evictions: Vec::new(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    pub fn is_empty(&self) -> bool {
        self.tokens_seen == 0
    }

    /// Every eviction so far, in the order it happened.
    pub fn evictions(&self) -> &[Eviction] {
        &self.evictions
    }

    pub fn retained_blocks(&self, layer: usize) -> Vec<usize> {
        self.layers[layer].blocks().iter().map(|b| b.index).collect()
    }

    pub fn retained_tokens(&self, layer: usize) -> usize {
        self.layers[layer].blocks().iter().map(|b| b.len).sum()
    }

    /// Bytes the resident keys and values would occupy at
    /// `config.bytes_per_element`.
    pub fn cache_bytes(&self) -> u64 {
        let tokens: usize = (0..self.layers.len()).map(|l| self.retained_tokens(l)).sum();
        tokens as u64 * self.config.bytes_per_token()
    }

    /// One line per layer: pattern, retained block indices and token count.
    pub fn dump(&self) -> String {
        let mut out = format!("tokens_seen={}\n", self.tokens_seen);
        for (l, spec) in self.config.map.specs().iter().enumerate() {
            let blocks: Vec<String> = self.retained_blocks(l).iter().map(|b| b.to_string()).collect();
            let _ = writeln!(
                out,
                "layer {l:>3} {:<12} tokens={:<8} blocks=[{}]",
                spec.pattern.to_string(),
                self.retained_tokens(l),
                blocks.join(",")
            );
        }
        out
    }

    fn check_model(&self, model: &HybridModel, map: &LayerMap) -> Result<()> {
        if model.config != self.config.model || *map != self.config.map {
            return Err(Error::InvalidConfig(
                "model or layer map differs from the cache configuration".into(),
            ));
        }
        Ok(())
    }

    fn reserve(&self, extra: usize) -> Result<()> {
        let requested = self.tokens_seen + extra;
        if requested > self.config.max_seq_len {
            return Err(Error::CacheOverflow {
                requested,
                capacity: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Makes room for the token at position `self.tokens_seen` in every layer.
    fn advance(&mut self) {
        let pos = self.tokens_seen;
        let bs = self.config.model.block_size;
        if pos.is_multiple_of(bs) {
            let (h, d) = (self.config.model.n_heads, self.config.model.head_dim);
            for (l, store) in self.layers.iter_mut().enumerate() {
                if let Some(block) = store.open_block(CachedBlock::new(pos / bs, h, bs, d)) {
                    self.evictions.push(Eviction {
                        layer: l,
                        block,
                        at_token: pos,
                    });
                }
            }
        }
    }
}

fn head_rows(m: &Matrix, r: usize, head: usize, d: usize) -> &[f64] {
    &m.row(r)[head * d..(head + 1) * d]
}

/// Runs the prompt through the full model and fills an empty cache with the
/// blocks each layer's last row can see. Returns the last position's logits.
pub fn prefill(
    model: &HybridModel,
    map: &LayerMap,
    tokens: &[usize],
    cache: &mut KVCacheState,
) -> Result<Vec<f64>> {
    cache.check_model(model, map)?;
    if !cache.is_empty() {
        return Err(Error::InvalidConfig("prefill needs an empty cache".into()));
    }
    cache.reserve(tokens.len())?;
    let trace = forward_trace(model, map, tokens)?;
    let bs = model.config.block_size;
    let last_block = (tokens.len() - 1) / bs;
    for (l, lt) in trace.layers.iter().enumerate() {
        let store = &mut cache.layers[l];
        for b in map.spec(l).row_blocks(last_block) {
            let end = ((b + 1) * bs).min(tokens.len());
            let mut block = CachedBlock::new(b, model.config.n_heads, bs, model.config.head_dim);
            for (h, head) in lt.heads.iter().enumerate() {
                for (i, pos) in (b * bs..end).enumerate() {
                    block.k[h].row_mut(i).copy_from_slice(head.k.row(pos));
                    block.v[h].row_mut(i).copy_from_slice(head.v.row(pos));
                }
            }
            block.len = end - b * bs;
            // prompt blocks outside the final row are never stored
            store.open_block(block);
        }
    }
    cache.tokens_seen = tokens.len();
    Ok(trace.logits.row(tokens.len() - 1).to_vec())
}

/// Appends one token and returns its logits, attending only to the cache.
pub fn decode_step(
    model: &HybridModel,
    map: &LayerMap,
    token: usize,
    cache: &mut KVCacheState,
) -> Result<Vec<f64>> {
    cache.check_model(model, map)?;
    let cfg = &model.config;
    if token >= cfg.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "token id {token} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    cache.reserve(1)?;
    cache.advance();
    let pos = cache.tokens_seen;
    let p = &model.params;
    let (hidden, d) = (cfg.hidden(), cfg.head_dim);
    let scale = 1.0 / (d as f64).sqrt();

    let mut x = Matrix::from_vec(1, hidden, p.embed.row(token).to_vec())?;
    let mut normed = Matrix::zeros(1, hidden);
    for (l, lp) in p.layers.iter().enumerate() {
        rms_norm_row(x.row(0), lp.attn_norm.row(0), normed.row_mut(0));
        let q_all = normed.matmul(&lp.wq);
        let k_all = normed.matmul(&lp.wk);
        let v_all = normed.matmul(&lp.wv);
        let mut concat = Matrix::zeros(1, hidden);
        let store = &mut cache.layers[l];
        let newest = store.newest_mut().expect("advance opened a block");
        let slot = newest.len;
        let mut queries = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let q = rope_apply(&q_all.slice_cols(h * d, (h + 1) * d), &[pos as f64], &cfg.rope)?;
            let k = rope_apply(&k_all.slice_cols(h * d, (h + 1) * d), &[pos as f64], &cfg.rope)?;
            newest.k[h].row_mut(slot).copy_from_slice(k.row(0));
            newest.v[h].row_mut(slot).copy_from_slice(head_rows(&v_all, 0, h, d));
            queries.push(q);
        }
        newest.len += 1;

        let blocks = store.blocks();
        let mut chunk_out = vec![0.0; d];
        for (h, q) in queries.iter().enumerate() {
            let mut stat = StreamStat::EMPTY;
            let mut acc = vec![0.0; d];
            for block in &blocks {
                let logits: Vec<f64> = (0..block.len)
                    .map(|i| scale * dot(q.row(0), block.k[h].row(i)))
                    .collect();
                let values: Vec<&[f64]> = (0..block.len).map(|i| block.v[h].row(i)).collect();
                let s = StreamStat::from_chunk(&logits, &values, &mut chunk_out);
                merge_into(&mut stat, &mut acc, s, &chunk_out);
            }
            concat.row_mut(0)[h * d..(h + 1) * d].copy_from_slice(&acc);
        }
        gemm(1.0, &concat, false, &lp.wo, false, 1.0, &mut x);

        rms_norm_row(x.row(0), lp.ffn_norm.row(0), normed.row_mut(0));
        let mut act = normed.matmul(&lp.w_in);
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        gemm(1.0, &act, false, &lp.w_out, false, 1.0, &mut x);
    }
    rms_norm_row(x.row(0), p.final_norm.row(0), normed.row_mut(0));
    let logits = match &p.unembed {
        Some(u) => normed.matmul(u),
        None => normed.matmul_nt(&p.embed),
    };
    cache.tokens_seen += 1;
    Ok(logits.into_vec())
}
