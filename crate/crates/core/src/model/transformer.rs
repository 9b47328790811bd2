use std::collections::HashMap;

use super::{HybridModel, LayerMap, LayerParams, Parameters, RMS_EPS};
use crate::attention::{blocked_backward, blocked_forward, AttnInput, AttnSaved};
use crate::error::{Error, Result};
use crate::numerics::{gemm, rope_apply, rope_apply_inverse, softmax_in_place, Matrix};
use crate::sparsity::{build_layout, BlockLayout, PatternSpec};

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// RMS-normalizes `x` into `out` with gain `g`; returns `1/rms`.
#[inline]
pub(crate) fn rms_norm_row(x: &[f64], g: &[f64], out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, &xv), &gv) in out.iter_mut().zip(x).zip(g) {
        *o = xv * inv * gv;
    }
    inv
}

fn rms_norm(x: &Matrix, g: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let inv = (0..x.rows())
        .map(|r| rms_norm_row(x.row(r), g.row(0), out.row_mut(r)))
        .collect();
    (out, inv)
}

/// Accumulates the input gradient into `dx` and the gain gradient into `dg`.
fn rms_norm_backward(x: &Matrix, g: &Matrix, inv: &[f64], dy: &Matrix, dx: &mut Matrix, dg: &mut Matrix) {
    let h = x.cols() as f64;
    let gain = g.row(0);
    for r in 0..x.rows() {
        let (xr, dyr, s) = (x.row(r), dy.row(r), inv[r]);
        let mut proj = 0.0;
        for c in 0..xr.len() {
            dg.data_mut()[c] += dyr[c] * xr[c] * s;
            proj += gain[c] * dyr[c] * xr[c];
        }
        let k = s * s * s * proj / h;
        let dxr = dx.row_mut(r);
        for c in 0..xr.len() {
            dxr[c] += s * gain[c] * dyr[c] - k * xr[c];
        }
    }
}

/// One head's attention state for one layer.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    /// Rotated queries and keys, as fed to the kernel.
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub saved: AttnSaved,
}

/// Activations of one decoder layer kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub x_in: Matrix,
    pub attn_normed: Matrix,
    pub attn_inv_rms: Vec<f64>,
    pub heads: Vec<HeadTrace>,
    pub attn_concat: Matrix,
    pub x_mid: Matrix,
    pub ffn_normed: Matrix,
    pub ffn_inv_rms: Vec<f64>,
    pub ffn_pre: Matrix,
    pub ffn_act: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerTrace>,
    pub x_final: Matrix,
    pub final_normed: Matrix,
    pub final_inv_rms: Vec<f64>,
    pub logits: Matrix,
}

struct Layouts {
    n_blocks: usize,
    cache: HashMap<PatternSpec, BlockLayout>,
}

impl Layouts {
    fn new(n_tokens: usize, block_size: usize) -> Self {
        Self {
            n_blocks: n_tokens.div_ceil(block_size),
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, spec: &PatternSpec) -> &BlockLayout {
        let n = self.n_blocks;
        self.cache.entry(*spec).or_insert_with(|| build_layout(spec, n))
    }
}

fn check_tokens(model: &HybridModel, map: &LayerMap, tokens: &[usize]) -> Result<()> {
    map.check(&model.config)?;
    if tokens.is_empty() {
        return Err(Error::InvalidConfig("empty token sequence".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= model.config.vocab_size) {
        return Err(Error::InvalidConfig(format!(
            "token id {t} out of range for vocab {}",
            model.config.vocab_size
        )));
    }
    Ok(())
}

/// Logits for every position.
pub fn forward(model: &HybridModel, map: &LayerMap, tokens: &[usize]) -> Result<Matrix> {
    Ok(forward_trace(model, map, tokens)?.logits)
}

/// Forward pass keeping every activation needed by [`backward`].
pub fn forward_trace(model: &HybridModel, map: &LayerMap, tokens: &[usize]) -> Result<ForwardTrace> {
    check_tokens(model, map, tokens)?;
    let cfg = &model.config;
    let p = &model.params;
    let (n, d) = (tokens.len(), cfg.head_dim);
    let positions: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mut layouts = Layouts::new(n, cfg.block_size);

    let mut x = Matrix::zeros(n, cfg.hidden());
    for (r, &t) in tokens.iter().enumerate() {
        x.row_mut(r).copy_from_slice(p.embed.row(t));
    }

    let mut traces = Vec::with_capacity(cfg.n_layers);
    for (l, lp) in p.layers.iter().enumerate() {
        let layout = layouts.get(map.spec(l));
        let (attn_normed, attn_inv_rms) = rms_norm(&x, &lp.attn_norm);
        let q_all = attn_normed.matmul(&lp.wq);
        let k_all = attn_normed.matmul(&lp.wk);
        let v_all = attn_normed.matmul(&lp.wv);
        let mut attn_concat = Matrix::zeros(n, cfg.hidden());
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = h * d..(h + 1) * d;
            let q = rope_apply(&q_all.slice_cols(cols.start, cols.end), &positions, &cfg.rope)?;
            let k = rope_apply(&k_all.slice_cols(cols.start, cols.end), &positions, &cfg.rope)?;
            let v = v_all.slice_cols(cols.start, cols.end);
            let (o, saved) = blocked_forward(&AttnInput::new(&q, &k, &v, layout))?;
            attn_concat.set_cols(cols.start, &o);
            heads.push(HeadTrace { q, k, v, saved });
        }
        let mut x_mid = x.clone();
        gemm(1.0, &attn_concat, false, &lp.wo, false, 1.0, &mut x_mid);

        let (ffn_normed, ffn_inv_rms) = rms_norm(&x_mid, &lp.ffn_norm);
        let ffn_pre = ffn_normed.matmul(&lp.w_in);
        let mut ffn_act = ffn_pre.clone();
        ffn_act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut x_out = x_mid.clone();
        gemm(1.0, &ffn_act, false, &lp.w_out, false, 1.0, &mut x_out);

        traces.push(LayerTrace {
            x_in: std::mem::replace(&mut x, x_out),
            attn_normed,
            attn_inv_rms,
            heads,
            attn_concat,
            x_mid,
            ffn_normed,
            ffn_inv_rms,
            ffn_pre,
            ffn_act,
        });
    }

    let (final_normed, final_inv_rms) = rms_norm(&x, &p.final_norm);
    let logits = match &p.unembed {
        Some(u) => final_normed.matmul(u),
        None => final_normed.matmul_nt(&p.embed),
    };
    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        layers: traces,
        x_final: x,
        final_normed,
        final_inv_rms,
        logits,
    })
}

/// Mean cross-entropy over positions with a target, and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: &Matrix, targets: &[Option<usize>]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::shape("cross_entropy targets", logits.rows(), targets.len()));
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(Error::InvalidConfig("no positions carry a target".into()));
    }
    let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    let inv = 1.0 / count as f64;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= logits.cols() {
            return Err(Error::InvalidConfig(format!("target {t} out of vocabulary")));
        }
        let row = d_logits.row_mut(r);
        row.copy_from_slice(logits.row(r));
        let lse = softmax_in_place(row).ok_or(Error::DegenerateRow { row: r })?;
        loss += lse - logits.get(r, t);
        row[t] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, d_logits))
}

/// Next-token loss with a target at every position.
pub fn loss_and_grads(
    model: &HybridModel,
    map: &LayerMap,
    tokens: &[usize],
    targets: &[usize],
) -> Result<(f64, Parameters)> {
    let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
    loss_and_grads_masked(model, map, tokens, &t)
}

/// Loss averaged over positions whose target is `Some`.
pub fn loss_and_grads_masked(
    model: &HybridModel,
    map: &LayerMap,
    tokens: &[usize],
    targets: &[Option<usize>],
) -> Result<(f64, Parameters)> {
    let trace = forward_trace(model, map, tokens)?;
    let (loss, d_logits) = cross_entropy(&trace.logits, targets)?;
    let grads = backward(model, map, &trace, &d_logits)?;
    Ok((loss, grads))
}

/// Parameter gradients of `⟨d_logits, logits⟩`.
pub fn backward(
    model: &HybridModel,
    map: &LayerMap,
    trace: &ForwardTrace,
    d_logits: &Matrix,
) -> Result<Parameters> {
    let cfg = &model.config;
    let p = &model.params;
    let n = trace.tokens.len();
    let d = cfg.head_dim;
    if d_logits.shape() != trace.logits.shape() {
        return Err(Error::shape("backward d_logits", n, d_logits.rows()));
    }
    let positions: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mut layouts = Layouts::new(n, cfg.block_size);
    let mut g = p.zeros_like();

    let d_final = match (&p.unembed, &mut g.unembed) {
        (Some(u), Some(du)) => {
            gemm(1.0, &trace.final_normed, true, d_logits, false, 0.0, du);
            d_logits.matmul_nt(u)
        }
        _ => {
            gemm(1.0, d_logits, true, &trace.final_normed, false, 1.0, &mut g.embed);
            d_logits.matmul(&p.embed)
        }
    };
    let mut dx = Matrix::zeros(n, cfg.hidden());
    rms_norm_backward(
        &trace.x_final,
        &p.final_norm,
        &trace.final_inv_rms,
        &d_final,
        &mut dx,
        &mut g.final_norm,
    );

    for l in (0..cfg.n_layers).rev() {
        let (lp, lt, lg) = (&p.layers[l], &trace.layers[l], &mut g.layers[l]);
        layer_backward(lp, lt, lg, &mut dx, layouts.get(map.spec(l)), &positions, model, d)?;
    }

    for (r, &t) in trace.tokens.iter().enumerate() {
        let row = dx.row(r).to_vec();
        crate::numerics::axpy(1.0, &row, g.embed.row_mut(t));
    }
    Ok(g)
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    lp: &LayerParams,
    lt: &LayerTrace,
    lg: &mut LayerParams,
    dx: &mut Matrix,
    layout: &BlockLayout,
    positions: &[f64],
    model: &HybridModel,
    d: usize,
) -> Result<()> {
    let cfg = &model.config;
    let n = dx.rows();

    // feed-forward branch; dx carries the residual gradient
    gemm(1.0, &lt.ffn_act, true, dx, false, 0.0, &mut lg.w_out);
    let mut d_pre = dx.matmul_nt(&lp.w_out);
    for (g, &u) in d_pre.data_mut().iter_mut().zip(lt.ffn_pre.data()) {
        *g *= gelu_grad(u);
    }
    gemm(1.0, &lt.ffn_normed, true, &d_pre, false, 0.0, &mut lg.w_in);
    let d_normed = d_pre.matmul_nt(&lp.w_in);
    rms_norm_backward(&lt.x_mid, &lp.ffn_norm, &lt.ffn_inv_rms, &d_normed, dx, &mut lg.ffn_norm);

    // attention branch
    gemm(1.0, &lt.attn_concat, true, dx, false, 0.0, &mut lg.wo);
    let d_concat = dx.matmul_nt(&lp.wo);
    let mut dq = Matrix::zeros(n, cfg.hidden());
    let mut dk = Matrix::zeros(n, cfg.hidden());
    let mut dv = Matrix::zeros(n, cfg.hidden());
    for (h, head) in lt.heads.iter().enumerate() {
        let start = h * d;
        let d_o = d_concat.slice_cols(start, start + d);
        let input = AttnInput::new(&head.q, &head.k, &head.v, layout);
        let grads = blocked_backward(&input, &head.saved, &d_o)?;
        dq.set_cols(start, &rope_apply_inverse(&grads.d_q, positions, &cfg.rope)?);
        dk.set_cols(start, &rope_apply_inverse(&grads.d_k, positions, &cfg.rope)?);
        dv.set_cols(start, &grads.d_v);
    }
    gemm(1.0, &lt.attn_normed, true, &dq, false, 0.0, &mut lg.wq);
    gemm(1.0, &lt.attn_normed, true, &dk, false, 0.0, &mut lg.wk);
    gemm(1.0, &lt.attn_normed, true, &dv, false, 0.0, &mut lg.wv);
    let mut d_normed = dq.matmul_nt(&lp.wq);
    gemm(1.0, &dk, false, &lp.wk, true, 1.0, &mut d_normed);
    gemm(1.0, &dv, false, &lp.wv, true, 1.0, &mut d_normed);
    rms_norm_backward(&lt.x_in, &lp.attn_norm, &lt.attn_inv_rms, &d_normed, dx, &mut lg.attn_norm);
    Ok(())
}
