//! Static block-sparse attention patterns and their CSR block layouts.
//!
//! A [`PatternSpec`] names which key blocks a query block may read. It is
//! compiled by [`build_layout`] into a [`BlockLayout`], the compressed sparse
//! row structure the tiled kernels iterate. Layouts depend only on the
//! pattern and the number of blocks, never on token content, and every row
//! contains its own diagonal block so each token can attend to itself.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pattern {
    /// Causal attention over every earlier block.
    Full,
    /// The first `sink_blocks` blocks plus the `window_blocks` most recent
    /// blocks, counting the query's own block.
    AttnSink {
        sink_blocks: usize,
        window_blocks: usize,
    },
    /// Every block whose index is a multiple of `stride_blocks`, plus the
    /// query's own block.
    BlockStride { stride_blocks: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatternSpec {
    pub pattern: Pattern,
    pub block_size: usize,
}

impl PatternSpec {
    pub fn new(pattern: Pattern, block_size: usize) -> Result<Self> {
        let spec = Self {
            pattern,
            block_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn full(block_size: usize) -> Self {
        Self {
            pattern: Pattern::Full,
            block_size,
        }
    }

    pub fn attn_sink(sink_blocks: usize, window_blocks: usize, block_size: usize) -> Self {
        Self {
            pattern: Pattern::AttnSink {
                sink_blocks,
                window_blocks,
            },
            block_size,
        }
    }

    pub fn block_stride(stride_blocks: usize, block_size: usize) -> Self {
        Self {
            pattern: Pattern::BlockStride { stride_blocks },
            block_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("{what} must be at least 1")));
        if self.block_size == 0 {
            return bad("block_size");
        }
        match self.pattern {
            Pattern::Full => Ok(()),
            Pattern::AttnSink {
                sink_blocks,
                window_blocks,
            } => {
                if sink_blocks == 0 {
                    bad("sink_blocks")
                } else if window_blocks == 0 {
                    bad("window_blocks")
                } else {
                    Ok(())
                }
            }
            Pattern::BlockStride { stride_blocks } => {
                if stride_blocks == 0 {
                    bad("stride_blocks")
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn is_full(&self) -> bool {
        self.pattern == Pattern::Full
    }

    pub fn n_blocks(&self, n_tokens: usize) -> usize {
        n_tokens.div_ceil(self.block_size)
    }

    /// Whether key block `kb` is visible from query block `qb`.
    pub fn block_allowed(&self, qb: usize, kb: usize) -> bool {
        if kb > qb {
            return false;
        }
        match self.pattern {
            Pattern::Full => true,
            Pattern::AttnSink {
                sink_blocks,
                window_blocks,
            } => kb < sink_blocks || kb + window_blocks > qb,
            Pattern::BlockStride { stride_blocks } => kb.is_multiple_of(stride_blocks) || kb == qb,
        }
    }

    /// Sorted key blocks visible from query block `qb`.
    pub fn row_blocks(&self, qb: usize) -> Vec<usize> {
        match self.pattern {
            Pattern::Full => (0..=qb).collect(),
            Pattern::AttnSink {
                sink_blocks,
                window_blocks,
            } => {
                let window_start = (qb + 1).saturating_sub(window_blocks);
                let sink_end = sink_blocks.min(window_start);
                (0..sink_end).chain(window_start..=qb).collect()
            }
            Pattern::BlockStride { stride_blocks } => {
                let mut row: Vec<usize> = (0..=qb).step_by(stride_blocks).collect();
                if !qb.is_multiple_of(stride_blocks) {
                    row.push(qb);
                }
                row
            }
        }
    }

    /// Number of key blocks visible from query block `qb`, without building
    /// the row.
    pub fn row_len(&self, qb: usize) -> usize {
        match self.pattern {
            Pattern::Full => qb + 1,
            Pattern::AttnSink {
                sink_blocks,
                window_blocks,
            } => {
                let window_start = (qb + 1).saturating_sub(window_blocks);
                sink_blocks.min(window_start) + (qb + 1 - window_start)
            }
            Pattern::BlockStride { stride_blocks } => {
                qb / stride_blocks + 1 + usize::from(!qb.is_multiple_of(stride_blocks))
            }
        }
    }
}

impl fmt::Display for PatternSpec {
    /// Formats the pattern in the `full`, `sink:S,W`, `stride:K` syntax
    /// accepted by [`FromStr`]; the block size is not part of the text.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.pattern)
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Pattern::Full => write!(f, "full"),
            Pattern::AttnSink {
                sink_blocks,
                window_blocks,
            } => write!(f, "sink:{sink_blocks},{window_blocks}"),
            Pattern::BlockStride { stride_blocks } => write!(f, "stride:{stride_blocks}"),
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidConfig(format!("unrecognised pattern `{s}`"));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        if s.eq_ignore_ascii_case("full") {
            return Ok(Pattern::Full);
        }
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let pattern = match kind.trim() {
            "sink" => {
                let (sink, window) = args.split_once(',').ok_or_else(bad)?;
                Pattern::AttnSink {
                    sink_blocks: num(sink)?,
                    window_blocks: num(window)?,
                }
            }
            "stride" => Pattern::BlockStride {
                stride_blocks: num(args)?,
            },
            _ => return Err(bad()),
        };
        PatternSpec::new(pattern, 1)?;
        Ok(pattern)
    }
}

/// CSR block mask over a causal `n_blocks × n_blocks` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    n_blocks: usize,
    block_size: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

/// Compiles `spec` into the block layout for a sequence of `n_blocks` blocks.
pub fn build_layout(spec: &PatternSpec, n_blocks: usize) -> BlockLayout {
    let mut row_offsets = Vec::with_capacity(n_blocks + 1);
    let mut col_indices = Vec::new();
    row_offsets.push(0);
    for qb in 0..n_blocks {
        col_indices.extend(spec.row_blocks(qb));
        row_offsets.push(col_indices.len());
    }
    BlockLayout {
        n_blocks,
        block_size: spec.block_size,
        row_offsets,
        col_indices,
    }
}

/// Token-level visibility: `k_pos` is causal and its block is in the row of
/// `q_pos`'s block.
pub fn is_allowed(spec: &PatternSpec, q_pos: usize, k_pos: usize) -> bool {
    k_pos <= q_pos && spec.block_allowed(q_pos / spec.block_size, k_pos / spec.block_size)
}

/// Distinct key tokens visible to the final query of a `seq_len`-token
/// sequence, i.e. the decode-time KV budget of one layer.
pub fn retained_token_count(spec: &PatternSpec, seq_len: usize) -> usize {
    if seq_len == 0 {
        return 0;
    }
    let bs = spec.block_size;
    let last = (seq_len - 1) / bs;
    match spec.pattern {
        Pattern::Full => seq_len,
        _ => {
            // Only the last block can be partial and it is always in the row.
            let tail = seq_len - last * bs;
            (spec.row_len(last) - 1) * bs + tail
        }
    }
}

impl BlockLayout {
    /// Builds a layout from explicit rows, checking CSR well-formedness,
    /// block causality and diagonal presence.
    pub fn from_rows(block_size: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        let layout = Self::from_rows_unchecked(block_size, rows);
        layout.validate()?;
        Ok(layout)
    }

    /// Builds a layout without validation. Used to inject faults when testing
    /// the equivalence harness.
    pub fn from_rows_unchecked(block_size: usize, rows: Vec<Vec<usize>>) -> Self {
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        let n_blocks = rows.len();
        for row in rows {
            col_indices.extend(row);
            row_offsets.push(col_indices.len());
        }
        Self {
            n_blocks,
            block_size,
            row_offsets,
            col_indices,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.row_offsets.len() != self.n_blocks + 1 || self.row_offsets[0] != 0 {
            return fail("row_offsets must have n_blocks + 1 entries starting at 0".into());
        }
        if *self.row_offsets.last().unwrap() != self.col_indices.len() {
            return fail("row_offsets must end at nnz".into());
        }
        for r in 0..self.n_blocks {
            if self.row_offsets[r] > self.row_offsets[r + 1] {
                return fail(format!("row_offsets decrease at row {r}"));
            }
            let row = self.row(r);
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("row {r} is not strictly ascending"));
            }
            if row.last().is_some_and(|&c| c > r) {
                return fail(format!("row {r} references a future block"));
            }
            if row.last() != Some(&r) {
                return fail(format!("row {r} is missing its diagonal block"));
            }
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    /// Number of stored (query block, key block) tiles.
    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    #[inline]
    pub fn row(&self, qb: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[qb]..self.row_offsets[qb + 1]]
    }

    pub fn contains(&self, qb: usize, kb: usize) -> bool {
        qb < self.n_blocks && self.row(qb).binary_search(&kb).is_ok()
    }

    /// Token-level mask entry implied by the layout.
    pub fn allows(&self, q_pos: usize, k_pos: usize) -> bool {
        k_pos <= q_pos && self.contains(q_pos / self.block_size, k_pos / self.block_size)
    }

    /// Query blocks reading each key block, ascending. This is the column
    /// view (CSC) of the same mask.
    pub fn columns(&self) -> Vec<Vec<usize>> {
        let mut cols = vec![Vec::new(); self.n_blocks];
        for qb in 0..self.n_blocks {
            for &kb in self.row(qb) {
                cols[kb].push(qb);
            }
        }
        cols
    }

    /// `#`/`.` grid, one text line per query block.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.n_blocks * (self.n_blocks + 1));
        for qb in 0..self.n_blocks {
            let mut line = vec![b'.'; self.n_blocks];
            for &kb in self.row(qb) {
                line[kb] = b'#';
            }
            out.push_str(std::str::from_utf8(&line).unwrap());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for BlockLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}
