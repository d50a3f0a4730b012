//! Similarity and the batch hinge objective.
//!
//! For a mini-batch of aligned unit embeddings the loss is
//!
//! ```text
//! L = 1/M * sum over ordered pairs (q, r), r != q, of
//!       max(0, S(a_q, i_r) - S(a_q, i_q) + beta)
//!     + max(0, S(i_q, a_r) - S(i_q, a_q) + beta)
//! ```
//!
//! with `M = B * (B - 1)` and `S(a, b) = a . b`. All non-aligned pairs in
//! the batch are used as negatives.

use alloc::boxed::Box;
use alloc::vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
pub struct HingeConfig<T: Scalar> {
    pub beta: T,
}

impl<T: Scalar> Default for HingeConfig<T> {
    fn default() -> Self {
        HingeConfig {
            beta: T::from_f64(DEFAULT_MARGIN),
        }
    }
}

/// Dot product of two unit vectors.
pub fn similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).fold(T::zero(), |s, v| s + v)
}

fn check_batch<T: Scalar>(a: &Tensor<T>, i: &Tensor<T>) -> Result<(usize, usize)> {
    if a.shape().len() != 2 || a.shape() != i.shape() {
        return Err(Error::Shape(alloc::format!(
            "hinge loss expects matching [B, N] matrices, got {:?} and {:?}",
            a.shape(),
            i.shape()
        )));
    }
    let b = a.shape()[0];
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    Ok((b, a.shape()[1]))
}

fn pairwise_similarities<T: Scalar>(a: &Tensor<T>, i: &Tensor<T>, b: usize) -> Tensor<T> {
    let mut s = Tensor::zeros(&[b, b]);
    for q in 0..b {
        for r in 0..b {
            let idx = s.idx2(q, r);
            s.data_mut()[idx] = similarity(a.row(q), i.row(r));
        }
    }
    s
}

/// Loss value and its gradient with respect to the similarity matrix.
fn hinge_forward<T: Scalar>(s: &Tensor<T>, b: usize, beta: T) -> (T, Tensor<T>) {
    let m = T::from_usize_((b * (b - 1)) as usize);
    let inv_m = m.recip();
    let mut loss = T::zero();
    let mut ds = Tensor::zeros(&[b, b]);
    for q in 0..b {
        let aligned = s.at2(q, q);
        for r in 0..b {
            if r == q {
                continue;
            }
            // Speech anchor: S(a_q, i_r) vs S(a_q, i_q).
            let margin_a = s.at2(q, r) - aligned + beta;
            if margin_a > T::zero() {
                loss = loss + margin_a;
                let idx = ds.idx2(q, r);
                ds.data_mut()[idx] = ds.data()[idx] + inv_m;
                let diag = ds.idx2(q, q);
                ds.data_mut()[diag] = ds.data()[diag] - inv_m;
            }
            // Image anchor: S(i_q, a_r) = S(a_r, i_q) vs S(a_q, i_q).
            let margin_i = s.at2(r, q) - aligned + beta;
            if margin_i > T::zero() {
                loss = loss + margin_i;
                let idx = ds.idx2(r, q);
                ds.data_mut()[idx] = ds.data()[idx] + inv_m;
                let diag = ds.idx2(q, q);
                ds.data_mut()[diag] = ds.data()[diag] - inv_m;
            }
        }
    }
    (loss * inv_m, ds)
}

/// Loss value without a tape (evaluation / logging path).
pub fn hinge_loss_value<T: Scalar>(
    audio_emb: &Tensor<T>,
    image_emb: &Tensor<T>,
    cfg: &HingeConfig<T>,
) -> Result<T> {
    let (b, _) = check_batch(audio_emb, image_emb)?;
    let s = pairwise_similarities(audio_emb, image_emb, b);
    Ok(hinge_forward(&s, b, cfg.beta).0)
}

/// Differentiable hinge loss over aligned embedding rows.
pub fn hinge_loss<T: Scalar>(
    tape: &mut Tape<T>,
    audio_emb: Var,
    image_emb: Var,
    cfg: &HingeConfig<T>,
) -> Result<Var> {
    let av = tape.val(audio_emb).clone();
    let iv = tape.val(image_emb).clone();
    let (b, n) = check_batch(&av, &iv)?;
    let s = pairwise_similarities(&av, &iv, b);
    let (loss, ds) = hinge_forward(&s, b, cfg.beta);

    Ok(tape.push(
        Tensor::scalar(loss),
        vec![audio_emb, image_emb],
        Box::new(move |g| {
            let gscale = g.item();
            let mut ga = Tensor::zeros(&[b, n]);
            let mut gi = Tensor::zeros(&[b, n]);
            for q in 0..b {
                for r in 0..b {
                    let w = ds.at2(q, r) * gscale;
                    if w == T::zero() {
                        continue;
                    }
                    for k in 0..n {
                        let gai = ga.idx2(q, k);
                        ga.data_mut()[gai] = ga.data()[gai] + w * iv.at2(r, k);
                        let gii = gi.idx2(r, k);
                        gi.data_mut()[gii] = gi.data()[gii] + w * av.at2(q, k);
                    }
                }
            }
            vec![ga, gi]
        }),
    ))
}
