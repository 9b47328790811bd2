//! Central finite-difference checks for the hand-written backward passes.
//!
//! Only forward evaluations are used here, so these checks are independent
//! of the analytic gradient code they validate.

use crate::attention::{blocked_backward, blocked_forward, AttnInput};
use crate::error::Result;
use crate::model::{cross_entropy, forward_trace, loss_and_grads_masked, HybridModel, LayerMap};
use crate::numerics::{dot, Matrix};
use crate::sparsity::BlockLayout;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Agreement between analytic and numeric gradients for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub len: usize,
    /// Largest absolute analytic − numeric difference.
    pub max_abs_err: f64,
    /// Largest numeric gradient magnitude in the group.
    pub scale: f64,
    /// `max_abs_err / scale` (or `max_abs_err` when the group gradient is 0).
    pub rel_err: f64,
}

impl GroupError {
    pub fn new(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Self {
        let max_abs_err = analytic
            .iter()
            .zip(numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = numeric.iter().fold(0.0f64, |m, n| m.max(n.abs()));
        let rel_err = if scale > 0.0 { max_abs_err / scale } else { max_abs_err };
        Self {
            name: name.into(),
            len: analytic.len(),
            max_abs_err,
            scale,
            rel_err,
        }
    }
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn central_differences(
    x: &mut [f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(x)?;
        x[i] = orig - h;
        let minus = f(x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Checks `blocked_backward` for the objective `⟨d_o, attention(q, k, v)⟩`.
pub fn check_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    layout: &BlockLayout,
    h: f64,
) -> Result<Vec<GroupError>> {
    let input = AttnInput::new(q, k, v, layout);
    let (_, saved) = blocked_forward(&input)?;
    let grads = blocked_backward(&input, &saved, d_o)?;
    let objective = |q: &Matrix, k: &Matrix, v: &Matrix| -> Result<f64> {
        let (o, _) = blocked_forward(&AttnInput::new(q, k, v, layout))?;
        Ok(dot(o.data(), d_o.data()))
    };
    let mut out = Vec::new();
    let (rows, cols) = q.shape();
    let rebuild = |x: &[f64]| Matrix::from_vec(rows, cols, x.to_vec());
    let mut xq = q.data().to_vec();
    let nq = central_differences(&mut xq, h, |x| objective(&rebuild(x)?, k, v))?;
    out.push(GroupError::new("d_q", grads.d_q.data(), &nq));
    let mut xk = k.data().to_vec();
    let nk = central_differences(&mut xk, h, |x| objective(q, &rebuild(x)?, v))?;
    out.push(GroupError::new("d_k", grads.d_k.data(), &nk));
    let mut xv = v.data().to_vec();
    let nv = central_differences(&mut xv, h, |x| objective(q, k, &rebuild(x)?))?;
    out.push(GroupError::new("d_v", grads.d_v.data(), &nv));
    Ok(out)
}

/// Checks every parameter tensor of the model under the masked
/// cross-entropy loss.
pub fn check_model(
    model: &HybridModel,
    map: &LayerMap,
    tokens: &[usize],
    targets: &[Option<usize>],
    h: f64,
) -> Result<Vec<GroupError>> {
    let (_, grads) = loss_and_grads_masked(model, map, tokens, targets)?;
    let mut probe = model.clone();
    let mut flat = model.params.to_flat();
    let numeric = central_differences(&mut flat, h, |x| {
        probe.params.load_flat(x)?;
        let logits = forward_trace(&probe, map, tokens)?.logits;
        Ok(cross_entropy(&logits, targets)?.0)
    })?;
    let mut offset = 0;
    let mut out = Vec::new();
    for (name, g) in grads.named() {
        let len = g.data().len();
        out.push(GroupError::new(name, g.data(), &numeric[offset..offset + len]));
        offset += len;
    }
    Ok(out)
}

/// The group with the largest relative error.
pub fn worst(groups: &[GroupError]) -> Option<&GroupError> {
    groups
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
}
