//! Single-head causal attention under a block layout.
//!
//! [`dense_attention`] materializes the masked score matrix and is the
//! reference. [`blocked_forward`] and [`blocked_backward`] walk only the
//! (query block, key block) tiles stored in the [`BlockLayout`], merging
//! tiles with online-softmax statistics so no `N × N` buffer is ever built.
//! Tiles are visited in ascending key-block order, so results are
//! bit-reproducible and identical for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, merge_into, softmax_rows, Matrix, StreamStat};
use crate::sparsity::BlockLayout;

/// Largest sequence the materializing reference will accept.
pub const DENSE_REFERENCE_CAP: usize = 4096;

#[derive(Clone, Copy, Debug)]
pub struct AttnInput<'a> {
    pub q: &'a Matrix,
    pub k: &'a Matrix,
    pub v: &'a Matrix,
    pub scale: f64,
    pub layout: &'a BlockLayout,
}

impl<'a> AttnInput<'a> {
    /// Input with the standard `1/√D` softmax scale.
    pub fn new(q: &'a Matrix, k: &'a Matrix, v: &'a Matrix, layout: &'a BlockLayout) -> Self {
        Self {
            q,
            k,
            v,
            scale: 1.0 / (q.cols() as f64).sqrt(),
            layout,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.q.shape();
        for (name, m) in [("k", self.k), ("v", self.v)] {
            if m.shape() != (n, d) {
                return Err(Error::shape(
                    "attention input",
                    format!("{name} {n}x{d}"),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
        }
        let needed = n.div_ceil(self.layout.block_size());
        if self.layout.n_blocks() != needed {
            return Err(Error::shape("attention layout blocks", needed, self.layout.n_blocks()));
        }
        Ok(())
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSaved {
    pub lse: Vec<f64>,
    pub o: Matrix,
    /// (query block, key block) tiles visited.
    pub tiles_visited: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnGrads {
    pub d_q: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
    pub tiles_visited: u64,
}

/// Reference attention: builds the full masked score matrix.
pub fn dense_attention(input: &AttnInput) -> Result<(Matrix, AttnSaved)> {
    input.validate()?;
    let n = input.n_tokens();
    if n > DENSE_REFERENCE_CAP {
        return Err(Error::InvalidConfig(format!(
            "dense reference capped at {DENSE_REFERENCE_CAP} tokens, got {n}"
        )));
    }
    let probs_and_lse = dense_probabilities(input)?;
    let o = probs_and_lse.0.matmul(input.v);
    let saved = AttnSaved {
        lse: probs_and_lse.1,
        o: o.clone(),
        tiles_visited: 0,
    };
    Ok((o, saved))
}

fn dense_probabilities(input: &AttnInput) -> Result<(Matrix, Vec<f64>)> {
    let qs = input.q.scaled(input.scale);
    let mut scores = qs.matmul_nt(input.k);
    let n = input.n_tokens();
    for i in 0..n {
        let row = scores.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            if !input.layout.allows(i, j) {
                *s = f64::NEG_INFINITY;
            }
        }
    }
    softmax_rows(&scores)
}

/// Reference backward from the materialized probability matrix.
pub fn dense_backward(input: &AttnInput, d_o: &Matrix) -> Result<AttnGrads> {
    input.validate()?;
    check_grad_shape(input, d_o)?;
    let (p, _) = dense_probabilities(input)?;
    let d_v = p.matmul_tn(d_o);
    let dp = d_o.matmul_nt(input.v);
    let mut ds = p.clone();
    for i in 0..p.rows() {
        let delta = dot(p.row(i), dp.row(i));
        for (j, x) in ds.row_mut(i).iter_mut().enumerate() {
            *x *= dp.get(i, j) - delta;
        }
    }
    let mut d_q = ds.matmul(input.k);
    d_q.scale(input.scale);
    let d_k = ds.matmul_tn(&input.q.scaled(input.scale));
    Ok(AttnGrads {
        d_q,
        d_k,
        d_v,
        tiles_visited: 0,
    })
}

fn check_grad_shape(input: &AttnInput, d_o: &Matrix) -> Result<()> {
    if d_o.shape() != input.q.shape() {
        return Err(Error::shape(
            "attention d_o",
            format!("{}x{}", input.q.rows(), input.q.cols()),
            format!("{}x{}", d_o.rows(), d_o.cols()),
        ));
    }
    Ok(())
}

#[inline]
fn block_range(block: usize, block_size: usize, n: usize) -> std::ops::Range<usize> {
    block * block_size..((block + 1) * block_size).min(n)
}

/// Tiled forward pass over the layout's tiles.
pub fn blocked_forward(input: &AttnInput) -> Result<(Matrix, AttnSaved)> {
    blocked_forward_threads(input, 1)
}

/// [`blocked_forward`] with query blocks spread over `threads` workers.
/// Output is bit-identical to the single-threaded run.
pub fn blocked_forward_threads(input: &AttnInput, threads: usize) -> Result<(Matrix, AttnSaved)> {
    input.validate()?;
    let qs = input.q.scaled(input.scale);
    let n_blocks = input.layout.n_blocks();
    let run = |qb: usize| forward_query_block(input, &qs, qb);
    let parts: Vec<Result<QueryBlockOut>> = if threads > 1 {
        pool(threads)?.install(|| (0..n_blocks).into_par_iter().map(run).collect())
    } else {
        (0..n_blocks).map(run).collect()
    };
    let (n, d) = input.q.shape();
    let mut o = Matrix::zeros(n, d);
    let mut lse = Vec::with_capacity(n);
    let mut tiles = 0;
    for (qb, part) in parts.into_iter().enumerate() {
        let part = part?;
        let start = qb * input.layout.block_size();
        for r in 0..part.out.rows() {
            o.row_mut(start + r).copy_from_slice(part.out.row(r));
        }
        lse.extend(part.lse);
        tiles += part.tiles;
    }
    let saved = AttnSaved {
        lse,
        o: o.clone(),
        tiles_visited: tiles,
    };
    Ok((o, saved))
}

struct QueryBlockOut {
    out: Matrix,
    lse: Vec<f64>,
    tiles: u64,
}

fn forward_query_block(input: &AttnInput, qs: &Matrix, qb: usize) -> Result<QueryBlockOut> {
    let n = input.n_tokens();
    let d = input.head_dim();
    let bs = input.layout.block_size();
    let q_range = block_range(qb, bs, n);
    let rows = q_range.len();
    let mut stats = vec![StreamStat::EMPTY; rows];
    let mut acc = Matrix::zeros(rows, d);
    let mut logits = vec![0.0; bs];
    let mut tile_out = vec![0.0; d];
    let mut tiles = 0;
    for &kb in input.layout.row(qb) {
        tiles += 1;
        let k_range = block_range(kb, bs, n);
        for (r, i) in q_range.clone().enumerate() {
            let q_row = qs.row(i);
            // token-level causality only bites on the diagonal tile
            let k_end = k_range.end.min(i + 1);
            if k_end <= k_range.start {
                continue;
            }
            let mut m = f64::NEG_INFINITY;
            for (t, j) in (k_range.start..k_end).enumerate() {
                let s = dot(q_row, input.k.row(j));
                logits[t] = s;
                m = m.max(s);
            }
            tile_out.iter_mut().for_each(|x| *x = 0.0);
            let mut l = 0.0;
            for (t, j) in (k_range.start..k_end).enumerate() {
                let p = (logits[t] - m).exp();
                l += p;
                axpy(p, input.v.row(j), &mut tile_out);
            }
            let inv = 1.0 / l;
            tile_out.iter_mut().for_each(|x| *x *= inv);
            merge_into(&mut stats[r], acc.row_mut(r), StreamStat { m, l }, &tile_out);
        }
    }
    let mut lse = Vec::with_capacity(rows);
    for (r, st) in stats.iter().enumerate() {
        if st.is_empty() {
            return Err(Error::DegenerateRow {
                row: q_range.start + r,
            });
        }
        lse.push(st.lse());
    }
    Ok(QueryBlockOut {
        out: acc,
        lse,
        tiles,
    })
}

/// Tiled backward pass. Probabilities are recomputed per tile from the
/// saved log-sum-exp; the gradients are those of `⟨d_o, o⟩`.
pub fn blocked_backward(input: &AttnInput, saved: &AttnSaved, d_o: &Matrix) -> Result<AttnGrads> {
    blocked_backward_threads(input, saved, d_o, 1)
}

/// [`blocked_backward`] on `threads` workers. With more than one thread the
/// query gradient is computed per query block and the key/value gradients
/// per key block (via the layout's column view); accumulation order per
/// element matches the serial pass, so results are bit-identical.
pub fn blocked_backward_threads(
    input: &AttnInput,
    saved: &AttnSaved,
    d_o: &Matrix,
    threads: usize,
) -> Result<AttnGrads> {
    input.validate()?;
    check_grad_shape(input, d_o)?;
    let n = input.n_tokens();
    if saved.lse.len() != n || saved.o.shape() != input.q.shape() {
        return Err(Error::shape("attention saved state", n, saved.lse.len()));
    }
    let qs = input.q.scaled(input.scale);
    let delta: Vec<f64> = (0..n).map(|i| dot(d_o.row(i), saved.o.row(i))).collect();
    let ctx = BackwardCtx {
        input,
        qs: &qs,
        lse: &saved.lse,
        delta: &delta,
        d_o,
    };
    let mut grads = if threads > 1 {
        pool(threads)?.install(|| ctx.two_pass())
    } else {
        ctx.one_pass()
    };
    grads.d_q.scale(input.scale);
    Ok(grads)
}

struct BackwardCtx<'a> {
    input: &'a AttnInput<'a>,
    qs: &'a Matrix,
    lse: &'a [f64],
    delta: &'a [f64],
    d_o: &'a Matrix,
}

impl BackwardCtx<'_> {
    /// Probability and score gradient of the `(i, j)` entry.
    #[inline]
    fn entry(&self, i: usize, j: usize) -> (f64, f64) {
        let s = dot(self.qs.row(i), self.input.k.row(j));
        let p = (s - self.lse[i]).exp();
        let dp = dot(self.d_o.row(i), self.input.v.row(j));
        (p, p * (dp - self.delta[i]))
    }

    fn one_pass(&self) -> AttnGrads {
        let layout = self.input.layout;
        let (n, d) = self.input.q.shape();
        let bs = layout.block_size();
        let mut d_qs = Matrix::zeros(n, d);
        let mut d_k = Matrix::zeros(n, d);
        let mut d_v = Matrix::zeros(n, d);
        let mut tiles = 0;
        for qb in 0..layout.n_blocks() {
            for &kb in layout.row(qb) {
                tiles += 1;
                let k_range = block_range(kb, bs, n);
                for i in block_range(qb, bs, n) {
                    for j in k_range.start..k_range.end.min(i + 1) {
                        let (p, ds) = self.entry(i, j);
                        axpy(p, self.d_o.row(i), d_v.row_mut(j));
                        axpy(ds, self.input.k.row(j), d_qs.row_mut(i));
                        axpy(ds, self.qs.row(i), d_k.row_mut(j));
                    }
                }
            }
        }
        AttnGrads {
            d_q: d_qs,
            d_k,
            d_v,
            tiles_visited: tiles,
        }
    }

    fn two_pass(&self) -> AttnGrads {
        let layout = self.input.layout;
        let (n, d) = self.input.q.shape();
        let bs = layout.block_size();
        let n_blocks = layout.n_blocks();

        let dq_parts: Vec<(Matrix, u64)> = (0..n_blocks)
            .into_par_iter()
            .map(|qb| {
                let q_range = block_range(qb, bs, n);
                let mut part = Matrix::zeros(q_range.len(), d);
                let mut tiles = 0;
                for &kb in layout.row(qb) {
                    tiles += 1;
                    let k_range = block_range(kb, bs, n);
                    for (r, i) in q_range.clone().enumerate() {
                        for j in k_range.start..k_range.end.min(i + 1) {
                            let (_, ds) = self.entry(i, j);
                            axpy(ds, self.input.k.row(j), part.row_mut(r));
                        }
                    }
                }
                (part, tiles)
            })
            .collect();

        let columns = layout.columns();
        let dkv_parts: Vec<(Matrix, Matrix)> = (0..n_blocks)
            .into_par_iter()
            .map(|kb| {
                let k_range = block_range(kb, bs, n);
                let mut dk = Matrix::zeros(k_range.len(), d);
                let mut dv = Matrix::zeros(k_range.len(), d);
                for &qb in &columns[kb] {
                    for i in block_range(qb, bs, n) {
                        for j in k_range.start..k_range.end.min(i + 1) {
                            let (p, ds) = self.entry(i, j);
                            let c = j - k_range.start;
                            axpy(p, self.d_o.row(i), dv.row_mut(c));
                            axpy(ds, self.qs.row(i), dk.row_mut(c));
                        }
                    }
                }
                (dk, dv)
            })
            .collect();

        let mut d_qs = Matrix::zeros(n, d);
        let mut d_k = Matrix::zeros(n, d);
        let mut d_v = Matrix::zeros(n, d);
        let mut tiles = 0;
        for (b, ((dq, t), (dk, dv))) in dq_parts.into_iter().zip(dkv_parts).enumerate() {
            tiles += t;
            for r in 0..dq.rows() {
                d_qs.row_mut(b * bs + r).copy_from_slice(dq.row(r));
                d_k.row_mut(b * bs + r).copy_from_slice(dk.row(r));
                d_v.row_mut(b * bs + r).copy_from_slice(dv.row(r));
            }
        }
        AttnGrads {
            d_q: d_qs,
            d_k,
            d_v,
            tiles_visited: tiles,
        }
    }
}

/// Dense benchmark baseline: streams one query row at a time, scoring every
/// causal key and masking afterwards. Does the full causal work without
/// materializing the score matrix, so it scales to lengths the reference
/// cannot hold in memory.
pub fn dense_streaming_forward(input: &AttnInput) -> Result<(Matrix, AttnSaved)> {
    input.validate()?;
    let (n, d) = input.q.shape();
    let qs = input.q.scaled(input.scale);
    let mask = BlockMaskRows::new(input.layout);
    let mut o = Matrix::zeros(n, d);
    let mut lse = Vec::with_capacity(n);
    let mut row = vec![0.0; n];
    for i in 0..n {
        let allowed = mask.row(i / input.layout.block_size());
        let bs = input.layout.block_size();
        for j in 0..=i {
            let s = dot(qs.row(i), input.k.row(j));
            row[j] = if allowed[j / bs] { s } else { f64::NEG_INFINITY };
        }
        let l = crate::numerics::softmax_in_place(&mut row[..=i])
            .ok_or(Error::DegenerateRow { row: i })?;
        lse.push(l);
        let out = o.row_mut(i);
        for (j, &p) in row[..=i].iter().enumerate() {
            if p != 0.0 {
                axpy(p, input.v.row(j), out);
            }
        }
    }
    let saved = AttnSaved {
        lse,
        o: o.clone(),
        tiles_visited: 0,
    };
    Ok((o, saved))
}

/// Backward counterpart of [`dense_streaming_forward`].
pub fn dense_streaming_backward(
    input: &AttnInput,
    saved: &AttnSaved,
    d_o: &Matrix,
) -> Result<AttnGrads> {
    input.validate()?;
    check_grad_shape(input, d_o)?;
    let (n, d) = input.q.shape();
    let bs = input.layout.block_size();
    let qs = input.q.scaled(input.scale);
    let mask = BlockMaskRows::new(input.layout);
    let mut d_q = Matrix::zeros(n, d);
    let mut d_k = Matrix::zeros(n, d);
    let mut d_v = Matrix::zeros(n, d);
    for i in 0..n {
        let allowed = mask.row(i / bs);
        let delta = dot(d_o.row(i), saved.o.row(i));
        for j in 0..=i {
            let s = dot(qs.row(i), input.k.row(j));
            let p = if allowed[j / bs] {
                (s - saved.lse[i]).exp()
            } else {
                0.0
            };
            let dp = dot(d_o.row(i), input.v.row(j));
            let ds = p * (dp - delta);
            axpy(p, d_o.row(i), d_v.row_mut(j));
            axpy(ds, input.k.row(j), d_q.row_mut(i));
            axpy(ds, qs.row(i), d_k.row_mut(j));
        }
    }
    d_q.scale(input.scale);
    Ok(AttnGrads {
        d_q,
        d_k,
        d_v,
        tiles_visited: 0,
    })
}

/// Dense boolean block mask, one row per query block.
struct BlockMaskRows {
    n_blocks: usize,
    bits: Vec<bool>,
}

impl BlockMaskRows {
    fn new(layout: &BlockLayout) -> Self {
        let n_blocks = layout.n_blocks();
        let mut bits = vec![false; n_blocks * n_blocks];
        for qb in 0..n_blocks {
            for &kb in layout.row(qb) {
                bits[qb * n_blocks + kb] = true;
            }
        }
        Self { n_blocks, bits }
    }

    fn row(&self, qb: usize) -> &[bool] {
        &self.bits[qb * self.n_blocks..(qb + 1) * self.n_blocks]
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// `max|a − b| / max|b|`, the relative deviation used by the equivalence
/// checks. Falls back to the absolute deviation when `b` is all zeros.
pub fn max_relative_deviation(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.max_abs_diff(b);
    let scale = b.max_abs();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsity::{build_layout, PatternSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn qkv(n: usize, d: usize, seed: u64) -> (Matrix, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (random(n, d, &mut rng), random(n, d, &mut rng), random(n, d, &mut rng))
    }

    #[test]
    fn single_token_returns_its_value() {
        let (q, k, v) = qkv(1, 4, 1);
        let layout = build_layout(&PatternSpec::full(4), 1);
        let input = AttnInput::new(&q, &k, &v, &layout);
        let (o, _) = dense_attention(&input).unwrap();
        assert_eq!(o.row(0), v.row(0));
        let (o, _) = blocked_forward(&input).unwrap();
        assert_eq!(o.row(0), v.row(0));
    }

    #[test]
    fn zero_queries_give_prefix_means() {
        let (_, k, v) = qkv(10, 3, 2);
        let q = Matrix::zeros(10, 3);
        let layout = build_layout(&PatternSpec::full(4), 3);
        let input = AttnInput::new(&q, &k, &v, &layout);
        let (o, _) = dense_attention(&input).unwrap();
        for i in 0..10 {
            for c in 0..3 {
                let mean = (0..=i).map(|j| v.get(j, c)).sum::<f64>() / (i + 1) as f64;
                assert!((o.get(i, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn blocked_matches_dense_for_small_patterns() {
        let (q, k, v) = qkv(128, 16, 3);
        for spec in [
            PatternSpec::attn_sink(1, 1, 4),
            PatternSpec::block_stride(4, 16),
            PatternSpec::full(16),
        ] {
            let layout = build_layout(&spec, spec.n_blocks(128));
            let input = AttnInput::new(&q, &k, &v, &layout);
            let (od, sd) = dense_attention(&input).unwrap();
            let (ob, sb) = blocked_forward(&input).unwrap();
            assert!(ob.is_finite());
            assert!(max_relative_deviation(&ob, &od) <= 1e-10, "{spec:?}");
            for (a, b) in sb.lse.iter().zip(&sd.lse) {
                assert!((a - b).abs() < 1e-10);
            }
            assert_eq!(sb.tiles_visited as usize, layout.nnz());
        }
    }

    #[test]
    fn wide_window_degenerates_to_full() {
        let (q, k, v) = qkv(77, 8, 4);
        let full = build_layout(&PatternSpec::full(8), 10);
        let wide = build_layout(&PatternSpec::attn_sink(1, 10, 8), 10);
        assert_eq!(full, wide);
        let a = blocked_forward(&AttnInput::new(&q, &k, &v, &full)).unwrap().0;
        let b = blocked_forward(&AttnInput::new(&q, &k, &v, &wide)).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn partial_final_block_is_masked_per_token() {
        let (q, k, v) = qkv(37, 4, 5);
        let spec = PatternSpec::block_stride(2, 8);
        let layout = build_layout(&spec, 5);
        let input = AttnInput::new(&q, &k, &v, &layout);
        let (od, _) = dense_attention(&input).unwrap();
        let (ob, _) = blocked_forward(&input).unwrap();
        assert!(max_relative_deviation(&ob, &od) <= 1e-12);
    }

    #[test]
    fn layout_with_wrong_block_count_is_rejected() {
        let (q, k, v) = qkv(20, 4, 6);
        let layout = build_layout(&PatternSpec::full(8), 2);
        assert!(blocked_forward(&AttnInput::new(&q, &k, &v, &layout)).is_err());
    }

    #[test]
    fn missing_diagonal_in_first_row_is_degenerate() {
        let (q, k, v) = qkv(8, 4, 7);
        let layout = BlockLayout::from_rows_unchecked(4, vec![vec![], vec![0, 1]]);
        let err = blocked_forward(&AttnInput::new(&q, &k, &v, &layout)).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 0 }));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let (q, k, v) = qkv(24, 4, 8);
        let layout = build_layout(&PatternSpec::attn_sink(1, 2, 4), 6);
        let input = AttnInput::new(&q, &k, &v, &layout);
        let (_, saved) = blocked_forward(&input).unwrap();
        let g = blocked_backward(&input, &saved, &Matrix::zeros(24, 4)).unwrap();
        assert_eq!(g.d_q.max_abs(), 0.0);
        assert_eq!(g.d_k.max_abs(), 0.0);
        assert_eq!(g.d_v.max_abs(), 0.0);
    }

    #[test]
    fn single_token_gradients() {
        let (q, k, v) = qkv(1, 4, 9);
        let d_o = Matrix::from_vec(1, 4, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let layout = build_layout(&PatternSpec::full(4), 1);
        let input = AttnInput::new(&q, &k, &v, &layout);
        let (_, saved) = blocked_forward(&input).unwrap();
        let g = blocked_backward(&input, &saved, &d_o).unwrap();
        assert_eq!(g.d_v, d_o);
        assert!(g.d_q.max_abs() < 1e-15);
        assert!(g.d_k.max_abs() < 1e-15);
    }

    #[test]
    fn backward_shape_mismatch_is_error() {
        let (q, k, v) = qkv(8, 4, 10);
        let layout = build_layout(&PatternSpec::full(4), 2);
        let input = AttnInput::new(&q, &k, &v, &layout);
        let (_, saved) = blocked_forward(&input).unwrap();
        let err = blocked_backward(&input, &saved, &Matrix::zeros(8, 3)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn tiled_backward_matches_probability_matrix_backward() {
        let (q, k, v) = qkv(50, 6, 11);
        let d_o = qkv(50, 6, 12).0;
        for spec in [
            PatternSpec::full(8),
            PatternSpec::attn_sink(1, 2, 8),
            PatternSpec::block_stride(3, 4),
        ] {
            let layout = build_layout(&spec, spec.n_blocks(50));
            let input = AttnInput::new(&q, &k, &v, &layout);
            let (_, saved) = blocked_forward(&input).unwrap();
            let tiled = blocked_backward(&input, &saved, &d_o).unwrap();
            let dense = dense_backward(&input, &d_o).unwrap();
            assert!(max_relative_deviation(&tiled.d_q, &dense.d_q) < 1e-12);
            assert!(max_relative_deviation(&tiled.d_k, &dense.d_k) < 1e-12);
            assert!(max_relative_deviation(&tiled.d_v, &dense.d_v) < 1e-12);
            assert_eq!(tiled.tiles_visited as usize, layout.nnz());
        }
    }

    #[test]
    fn streaming_dense_matches_reference() {
        let (q, k, v) = qkv(45, 4, 13);
        let d_o = qkv(45, 4, 14).0;
        let spec = PatternSpec::attn_sink(1, 2, 4);
        let layout = build_layout(&spec, spec.n_blocks(45));
        let input = AttnInput::new(&q, &k, &v, &layout);
        let (o_ref, _) = dense_attention(&input).unwrap();
        let (o, saved) = dense_streaming_forward(&input).unwrap();
        assert!(max_relative_deviation(&o, &o_ref) < 1e-12);
        let g = dense_streaming_backward(&input, &saved, &d_o).unwrap();
        let g_ref = dense_backward(&input, &d_o).unwrap();
        assert!(max_relative_deviation(&g.d_q, &g_ref.d_q) < 1e-12);
        assert!(max_relative_deviation(&g.d_k, &g_ref.d_k) < 1e-12);
        assert!(max_relative_deviation(&g.d_v, &g_ref.d_v) < 1e-12);
    }

    #[test]
    fn threaded_runs_are_bit_identical_to_serial() {
        let (q, k, v) = qkv(100, 8, 15);
        let d_o = qkv(100, 8, 16).0;
        let spec = PatternSpec::attn_sink(1, 3, 8);
        let layout = build_layout(&spec, spec.n_blocks(100));
        let input = AttnInput::new(&q, &k, &v, &layout);
        let (o1, s1) = blocked_forward(&input).unwrap();
        let (o4, s4) = blocked_forward_threads(&input, 4).unwrap();
        assert_eq!(o1, o4);
        assert_eq!(s1, s4);
        let g1 = blocked_backward(&input, &s1, &d_o).unwrap();
        let g4 = blocked_backward_threads(&input, &s1, &d_o, 4).unwrap();
        assert_eq!(g1, g4);
    }

    #[test]
    fn dense_reference_cap_is_enforced() {
        let n = DENSE_REFERENCE_CAP + 1;
        let q = Matrix::zeros(n, 2);
        let layout = build_layout(&PatternSpec::full(64), n.div_ceil(64));
        let input = AttnInput::new(&q, &q, &q, &layout);
        assert!(dense_attention(&input).is_err());
    }
}
