//! Single-head attention pooling over Bi-GRU states.
//!
//! Per time step, scores are `V tanh(W h_t + b_w) + b_v`; the softmax runs
//! over the time axis independently for every latent dimension, and the
//! pooled output is the per-dimension convex combination `sum_t alpha_t o
//! h_t`. Padded positions are excluded from the softmax.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Attention parameter vars: `w: [128, N]`, `b_w: [128]`, `v: [N, 128]`,
/// `b_v: [N]`.
#[derive(Clone, Copy)]
pub struct AttentionParams {
    pub w: Var,
    pub b_w: Var,
    pub v: Var,
    pub b_v: Var,
}

/// Pool `states: [B, T, N]` into `[B, N]` under a `[B, T]` validity mask.
pub fn attention_pool<T: Scalar>(
    tape: &mut Tape<T>,
    states: Var,
    params: &AttentionParams,
    mask: &Tensor<T>,
) -> Result<Var> {
    let shape = tape.val(states).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(alloc::format!(
            "attention_pool expects [B, T, N], got {shape:?}"
        )));
    }
    if shape[1] == 0 {
        return Err(Error::Invalid("attention_pool on zero time steps".into()));
    }
    let pre = ops::linear_time(tape, states, params.w, Some(params.b_w))?;
    let hidden = ops::tanh_op(tape, pre);
    let scores = ops::linear_time(tape, hidden, params.v, Some(params.b_v))?;
    let alpha = ops::masked_softmax_time(tape, scores, mask)?;
    let weighted = ops::mul(tape, alpha, states)?;
    ops::sum_time(tape, weighted)
}
