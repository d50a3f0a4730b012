//! Differentiable primitives: elementwise math, linear maps, convolutions,
//! pooling, batch normalization and (masked) softmax.
//!
//! Each op computes its forward value eagerly and registers a backward rule
//! on the tape. Shape conventions: audio activations are `B x T x C`, image
//! activations are `B x C x H x W`.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn shape_err<T>(msg: alloc::string::String) -> Result<T> {
    Err(Error::Shape(msg))
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let out = tape.val(a).zip(tape.val(b), |x, y| x + y)?;
    Ok(tape.push(
        out,
        vec![a, b],
        Box::new(|g| vec![g.clone(), g.clone()]),
    ))
}

pub fn sub<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let out = tape.val(a).zip(tape.val(b), |x, y| x - y)?;
    Ok(tape.push(
        out,
        vec![a, b],
        Box::new(|g| vec![g.clone(), g.map(|x| -x)]),
    ))
}

pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let va = tape.val(a).clone();
    let vb = tape.val(b).clone();
    let out = va.zip(&vb, |x, y| x * y)?;
    Ok(tape.push(
        out,
        vec![a, b],
        Box::new(move |g| {
            vec![
                g.zip(&vb, |x, y| x * y).unwrap(),
                g.zip(&va, |x, y| x * y).unwrap(),
            ]
        }),
    ))
}

pub fn scale<T: Scalar>(tape: &mut Tape<T>, a: Var, c: T) -> Var {
    let out = tape.val(a).scale(c);
    tape.push(out, vec![a], Box::new(move |g| vec![g.scale(c)]))
}

/// `1 - x`, elementwise (GRU gate complement).
pub fn one_minus<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Var {
    let out = tape.val(a).map(|x| T::one() - x);
    tape.push(out, vec![a], Box::new(|g| vec![g.map(|x| -x)]))
}

pub fn relu<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Var {
    let va = tape.val(a).clone();
    let out = va.map(|x| if x > T::zero() { x } else { T::zero() });
    tape.push(
        out,
        vec![a],
        Box::new(move |g| {
            vec![g
                .zip(&va, |gi, xi| if xi > T::zero() { gi } else { T::zero() })
                .unwrap()]
        }),
    )
}

pub fn tanh_op<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Var {
    let out = tape.val(a).map(|x| x.tanh());
    let y = out.clone();
    tape.push(
        out,
        vec![a],
        Box::new(move |g| vec![g.zip(&y, |gi, yi| gi * (T::one() - yi * yi)).unwrap()]),
    )
}

pub fn sigmoid<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Var {
    let out = tape.val(a).map(|x| T::one() / (T::one() + (-x).exp()));
    let y = out.clone();
    tape.push(
        out,
        vec![a],
        Box::new(move |g| vec![g.zip(&y, |gi, yi| gi * yi * (T::one() - yi)).unwrap()]),
    )
}

pub fn sum_all<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Var {
    let shape = tape.val(a).shape().to_vec();
    let out = Tensor::scalar(tape.val(a).sum());
    tape.push(
        out,
        vec![a],
        Box::new(move |g| vec![Tensor::full(&shape, g.item())]),
    )
}

// ---------------------------------------------------------------------------
// Linear maps
// ---------------------------------------------------------------------------

/// `y = x W^T (+ bias)`. Accepts a vector `[n]` or rows `[B, n]`;
/// `weight` is `[m, n]`, `bias` is `[m]`.
pub fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    match xs.len() {
        1 | 2 => linear_inner(tape, x, weight, bias, &xs),
        _ => shape_err(format!("linear expects rank 1 or 2 input, got {xs:?}")),
    }
}

fn linear_inner<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    xs: &[usize],
) -> Result<Var> {
    let vector_input = xs.len() == 1;
    let (rows, n) = if vector_input {
        (1, xs[0])
    } else {
        (xs[0], xs[1])
    };
    let ws = tape.val(weight).shape().to_vec();
    if ws.len() != 2 || ws[1] != n {
        return shape_err(format!("linear: input width {n} vs weight {ws:?}"));
    }
    let m = ws[0];
    if let Some(b) = bias {
        if tape.val(b).shape() != [m] {
            return shape_err(format!("linear: bias shape {:?}, want [{m}]", tape.val(b).shape()));
        }
    }

    let xv = tape.val(x).clone();
    let wv = tape.val(weight).clone();
    let bv = bias.map(|b| tape.val(b).clone());

    let mut out = vec![T::zero(); rows * m];
    for r in 0..rows {
        let xrow = &xv.data()[r * n..(r + 1) * n];
        for o in 0..m {
            let wrow = &wv.data()[o * n..(o + 1) * n];
            let mut acc = match &bv {
                Some(b) => b.data()[o],
                None => T::zero(),
            };
            for (xi, wi) in xrow.iter().zip(wrow) {
                acc = acc + *xi * *wi;
            }
            out[r * m + o] = acc;
        }
    }
    let out_shape: Vec<usize> = if vector_input { vec![m] } else { vec![rows, m] };
    let out = Tensor::new(&out_shape, out)?;

    let has_bias = bias.is_some();
    let mut parents = vec![x, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    let xshape = xs.to_vec();
    Ok(tape.push(
        out,
        parents,
        Box::new(move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); rows * n];
            let mut gw = vec![T::zero(); m * n];
            for r in 0..rows {
                let xrow = &xv.data()[r * n..(r + 1) * n];
                for o in 0..m {
                    let go = gd[r * m + o];
                    let wrow = &wv.data()[o * n..(o + 1) * n];
                    let gwrow = &mut gw[o * n..(o + 1) * n];
                    let gxrow = &mut gx[r * n..(r + 1) * n];
                    for i in 0..n {
                        gxrow[i] = gxrow[i] + go * wrow[i];
                        gwrow[i] = gwrow[i] + go * xrow[i];
                    }
                }
            }
            let mut grads = vec![
                Tensor::new(&xshape, gx).unwrap(),
                Tensor::new(&[m, n], gw).unwrap(),
            ];
            if has_bias {
                let mut gb = vec![T::zero(); m];
                for r in 0..rows {
                    for o in 0..m {
                        gb[o] = gb[o] + gd[r * m + o];
                    }
                }
                grads.push(Tensor::new(&[m], gb).unwrap());
            }
            grads
        }),
    ))
}

/// `linear` applied at every time step: `[B, T, k] -> [B, T, m]`.
pub fn linear_time<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    if xs.len() != 3 {
        return shape_err(format!("linear_time expects [B, T, k], got {xs:?}"));
    }
    let (b, t, k) = (xs[0], xs[1], xs[2]);
    // Flatten time into the row dimension and reuse the rank-2 rule.
    let flat = tape.val(x).clone().reshaped(&[b * t, k])?;
    let flat_var = tape.push(
        flat,
        vec![x],
        Box::new(move |g| vec![g.clone().reshaped(&[b, t, k]).unwrap()]),
    );
    let y = linear_inner(tape, flat_var, weight, bias, &[b * t, k])?;
    let m = tape.val(y).shape()[1];
    let reshaped = tape.val(y).clone().reshaped(&[b, t, m])?;
    Ok(tape.push(
        reshaped,
        vec![y],
        Box::new(move |g| vec![g.clone().reshaped(&[b * t, m]).unwrap()]),
    ))
}

/// Plain matrix product `[M, K] x [K, N] -> [M, N]`.
pub fn matmul<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let ashape = tape.val(a).shape().to_vec();
    let bshape = tape.val(b).shape().to_vec();
    if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
        return shape_err(format!("matmul on {ashape:?} x {bshape:?}"));
    }
    let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
    let av = tape.val(a).clone();
    let bv = tape.val(b).clone();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = av.data()[i * k + p];
            let brow = &bv.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    Ok(tape.push(
        Tensor::new(&[m, n], out)?,
        vec![a, b],
        Box::new(move |g| {
            let gd = g.data();
            let mut ga = vec![T::zero(); m * k];
            let mut gb = vec![T::zero(); k * n];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = T::zero();
                    let brow = &bv.data()[p * n..(p + 1) * n];
                    let grow = &gd[i * n..(i + 1) * n];
                    for j in 0..n {
                        acc = acc + grow[j] * brow[j];
                        gb[p * n + j] = gb[p * n + j] + av.data()[i * k + p] * grow[j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            vec![
                Tensor::new(&[m, k], ga).unwrap(),
                Tensor::new(&[k, n], gb).unwrap(),
            ]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// Valid (no padding) 1-D cross-correlation along time.
/// `x: [B, T, c_in]`, `weight: [c_out, c_in, k]`, `bias: [c_out]`.
pub fn conv1d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    stride: usize,
) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    let ws = tape.val(weight).shape().to_vec();
    if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[1] {
        return shape_err(format!("conv1d on x {xs:?}, weight {ws:?}"));
    }
    let (b, t, c_in) = (xs[0], xs[1], xs[2]);
    let (c_out, k) = (ws[0], ws[2]);
    if t < k {
        return Err(Error::SequenceTooShort { len: t, kernel: k });
    }
    if stride == 0 {
        return Err(Error::Invalid("conv1d stride must be >= 1".into()));
    }
    let t_out = (t - k) / stride + 1;

    let xv = tape.val(x).clone();
    let wv = tape.val(weight).clone();
    let bv = tape.val(bias).clone();

    let mut out = Tensor::zeros(&[b, t_out, c_out]);
    for bi in 0..b {
        for to in 0..t_out {
            for o in 0..c_out {
                let mut acc = bv.data()[o];
                for j in 0..k {
                    let xrow = xv.idx3(bi, to * stride + j, 0);
                    let wrow = wv.idx3(o, 0, j);
                    for c in 0..c_in {
                        acc = acc + xv.data()[xrow + c] * wv.data()[wrow + c * k];
                    }
                }
                let oi = out.idx3(bi, to, o);
                out.data_mut()[oi] = acc;
            }
        }
    }

    Ok(tape.push(
        out,
        vec![x, weight, bias],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(&[b, t, c_in]);
            let mut gw = Tensor::zeros(&[c_out, c_in, k]);
            let mut gb = Tensor::zeros(&[c_out]);
            for bi in 0..b {
                for to in 0..t_out {
                    for o in 0..c_out {
                        let go = g.at3(bi, to, o);
                        gb.data_mut()[o] = gb.data()[o] + go;
                        for j in 0..k {
                            let xrow = xv.idx3(bi, to * stride + j, 0);
                            for c in 0..c_in {
                                let wi = gw.idx3(o, c, j);
                                gw.data_mut()[wi] = gw.data()[wi] + go * xv.data()[xrow + c];
                                gx.data_mut()[xrow + c] =
                                    gx.data()[xrow + c] + go * wv.at3(o, c, j);
                            }
                        }
                    }
                }
            }
            vec![gx, gw, gb]
        }),
    ))
}

/// 2-D cross-correlation with zero padding and no bias.
/// `x: [B, c_in, H, W]`, `weight: [c_out, c_in, k, k]`.
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    let ws = tape.val(weight).shape().to_vec();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
        return shape_err(format!("conv2d on x {xs:?}, weight {ws:?}"));
    }
    let (b, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, k) = (ws[0], ws[2]);
    if h + 2 * padding < k || w + 2 * padding < k {
        return shape_err(format!(
            "conv2d: spatial {h}x{w} with padding {padding} smaller than kernel {k}"
        ));
    }
    let h_out = (h + 2 * padding - k) / stride + 1;
    let w_out = (w + 2 * padding - k) / stride + 1;

    let xv = tape.val(x).clone();
    let wv = tape.val(weight).clone();

    let mut out = Tensor::zeros(&[b, c_out, h_out, w_out]);
    for bi in 0..b {
        for o in 0..c_out {
            for c in 0..c_in {
                for p in 0..k {
                    for q in 0..k {
                        let wval = wv.at4(o, c, p, q);
                        for i in 0..h_out {
                            let xi = (i * stride + p) as isize - padding as isize;
                            if xi < 0 || xi >= h as isize {
                                continue;
                            }
                            let xrow = xv.idx4(bi, c, xi as usize, 0);
                            let orow = out.idx4(bi, o, i, 0);
                            let odata = out.data_mut();
                            for j in 0..w_out {
                                let xj = (j * stride + q) as isize - padding as isize;
                                if xj < 0 || xj >= w as isize {
                                    continue;
                                }
                                odata[orow + j] =
                                    odata[orow + j] + wval * xv.data()[xrow + xj as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(tape.push(
        out,
        vec![x, weight],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(&[b, c_in, h, w]);
            let mut gw = Tensor::zeros(&[c_out, c_in, k, k]);
            for bi in 0..b {
                for o in 0..c_out {
                    for c in 0..c_in {
                        for p in 0..k {
                            for q in 0..k {
                                let wval = wv.at4(o, c, p, q);
                                let mut wacc = T::zero();
                                for i in 0..h_out {
                                    let xi = (i * stride + p) as isize - padding as isize;
                                    if xi < 0 || xi >= h as isize {
                                        continue;
                                    }
                                    let xrow = xv.idx4(bi, c, xi as usize, 0);
                                    let grow = g.idx4(bi, o, i, 0);
                                    for j in 0..w_out {
                                        let xj = (j * stride + q) as isize - padding as isize;
                                        if xj < 0 || xj >= w as isize {
                                            continue;
                                        }
                                        let gval = g.data()[grow + j];
                                        wacc = wacc + gval * xv.data()[xrow + xj as usize];
                                        let gi = xrow + xj as usize;
                                        gx.data_mut()[gi] = gx.data()[gi] + gval * wval;
                                    }
                                }
                                let wi = gw.idx4(o, c, p, q);
                                gw.data_mut()[wi] = gw.data()[wi] + wacc;
                            }
                        }
                    }
                }
            }
            vec![gx, gw]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

pub fn max_pool2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    if xs.len() != 4 {
        return shape_err(format!("max_pool2d expects [B, C, H, W], got {xs:?}"));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let h_out = (h + 2 * padding - k) / stride + 1;
    let w_out = (w + 2 * padding - k) / stride + 1;
    let xv = tape.val(x).clone();

    let mut out = Tensor::zeros(&[b, c, h_out, w_out]);
    let mut argmax = vec![0usize; b * c * h_out * w_out];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h_out {
                for j in 0..w_out {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for p in 0..k {
                        let xi = (i * stride + p) as isize - padding as isize;
                        if xi < 0 || xi >= h as isize {
                            continue;
                        }
                        for q in 0..k {
                            let xj = (j * stride + q) as isize - padding as isize;
                            if xj < 0 || xj >= w as isize {
                                continue;
                            }
                            let idx = xv.idx4(bi, ci, xi as usize, xj as usize);
                            if xv.data()[idx] > best {
                                best = xv.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oi = out.idx4(bi, ci, i, j);
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
    }

    Ok(tape.push(
        out,
        vec![x],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            for (oi, &src) in argmax.iter().enumerate() {
                gx.data_mut()[src] = gx.data()[src] + g.data()[oi];
            }
            vec![gx]
        }),
    ))
}

pub fn avg_pool2d<T: Scalar>(tape: &mut Tape<T>, x: Var, k: usize, stride: usize) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    if xs.len() != 4 || xs[2] < k || xs[3] < k {
        return shape_err(format!("avg_pool2d(k={k}) on {xs:?}"));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let h_out = (h - k) / stride + 1;
    let w_out = (w - k) / stride + 1;
    let inv = T::from_usize_(k * k).recip();
    let xv = tape.val(x).clone();

    let mut out = Tensor::zeros(&[b, c, h_out, w_out]);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h_out {
                for j in 0..w_out {
                    let mut acc = T::zero();
                    for p in 0..k {
                        for q in 0..k {
                            acc = acc + xv.at4(bi, ci, i * stride + p, j * stride + q);
                        }
                    }
                    let oi = out.idx4(bi, ci, i, j);
                    out.data_mut()[oi] = acc * inv;
                }
            }
        }
    }

    Ok(tape.push(
        out,
        vec![x],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..h_out {
                        for j in 0..w_out {
                            let gval = g.at4(bi, ci, i, j) * inv;
                            for p in 0..k {
                                for q in 0..k {
                                    let idx = gx.idx4(bi, ci, i * stride + p, j * stride + q);
                                    gx.data_mut()[idx] = gx.data()[idx] + gval;
                                }
                            }
                        }
                    }
                }
            }
            vec![gx]
        }),
    ))
}

/// Spatial mean: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    if xs.len() != 4 {
        return shape_err(format!("global_avg_pool expects [B, C, H, W], got {xs:?}"));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let inv = T::from_usize_(h * w).recip();
    let xv = tape.val(x).clone();

    let mut out = Tensor::zeros(&[b, c]);
    for bi in 0..b {
        for ci in 0..c {
            let base = xv.idx4(bi, ci, 0, 0);
            let acc: T = xv.data()[base..base + h * w].iter().copied().sum();
            let oi = out.idx2(bi, ci);
            out.data_mut()[oi] = acc * inv;
        }
    }

    Ok(tape.push(
        out,
        vec![x],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            for bi in 0..b {
                for ci in 0..c {
                    let gval = g.at2(bi, ci) * inv;
                    let base = gx.idx4(bi, ci, 0, 0);
                    for v in &mut gx.data_mut()[base..base + h * w] {
                        *v = gval;
                    }
                }
            }
            vec![gx]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel running statistics, owned by the model (not trainable).
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over `[B, C, H, W]` with affine `gamma`/`beta`.
///
/// Train mode normalizes by batch statistics and updates `stats` in place
/// (momentum 0.1, unbiased variance for the running estimate); eval mode
/// normalizes by the running statistics.
pub fn batchnorm2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut BnStats<T>,
    train: bool,
) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    if xs.len() != 4 {
        return shape_err(format!("batchnorm2d expects [B, C, H, W], got {xs:?}"));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if tape.val(gamma).shape() != [c] || tape.val(beta).shape() != [c] {
        return shape_err(format!("batchnorm2d affine params must have shape [{c}]"));
    }
    let m = b * h * w;
    if train && m < 2 {
        return Err(Error::Invalid(
            "batchnorm2d train mode needs at least 2 values per channel".into(),
        ));
    }
    let eps = T::from_f64(BN_EPS);
    let xv = tape.val(x).clone();
    let gv = tape.val(gamma).clone();
    let bv = tape.val(beta).clone();

    // Per-channel mean / variance used for normalization.
    let (mu, var) = if train {
        let mut mu = Tensor::zeros(&[c]);
        let mut var = Tensor::zeros(&[c]);
        let inv_m = T::from_usize_(m).recip();
        for ci in 0..c {
            let mut acc = T::zero();
            for bi in 0..b {
                let base = xv.idx4(bi, ci, 0, 0);
                acc = acc + xv.data()[base..base + h * w].iter().copied().sum();
            }
            let mean = acc * inv_m;
            let mut vacc = T::zero();
            for bi in 0..b {
                let base = xv.idx4(bi, ci, 0, 0);
                for &v in &xv.data()[base..base + h * w] {
                    let d = v - mean;
                    vacc = vacc + d * d;
                }
            }
            mu.data_mut()[ci] = mean;
            var.data_mut()[ci] = vacc * inv_m;
        }
        // Running stats use the unbiased variance estimate.
        let mom = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - mom;
        let unbias = T::from_usize_(m) / T::from_usize_(m - 1);
        for ci in 0..c {
            stats.mean.data_mut()[ci] = keep * stats.mean.data()[ci] + mom * mu.data()[ci];
            stats.var.data_mut()[ci] =
                keep * stats.var.data()[ci] + mom * var.data()[ci] * unbias;
        }
        (mu, var)
    } else {
        (stats.mean.clone(), stats.var.clone())
    };

    let inv_std: Vec<T> = var.data().iter().map(|&v| (v + eps).sqrt().recip()).collect();

    let mut xhat = Tensor::zeros(&[b, c, h, w]);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let base = xv.idx4(bi, ci, 0, 0);
            let (mc, sc) = (mu.data()[ci], inv_std[ci]);
            let (gc, bc) = (gv.data()[ci], bv.data()[ci]);
            for i in 0..h * w {
                let xh = (xv.data()[base + i] - mc) * sc;
                xhat.data_mut()[base + i] = xh;
                out.data_mut()[base + i] = gc * xh + bc;
            }
        }
    }

    Ok(tape.push(
        out,
        vec![x, gamma, beta],
        Box::new(move |g| {
            let inv_m = T::from_usize_(m).recip();
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            let mut ggamma = Tensor::zeros(&[c]);
            let mut gbeta = Tensor::zeros(&[c]);
            for ci in 0..c {
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for bi in 0..b {
                    let base = xhat.idx4(bi, ci, 0, 0);
                    for i in 0..h * w {
                        sum_g = sum_g + g.data()[base + i];
                        sum_gx = sum_gx + g.data()[base + i] * xhat.data()[base + i];
                    }
                }
                ggamma.data_mut()[ci] = sum_gx;
                gbeta.data_mut()[ci] = sum_g;
                let coeff = gv.data()[ci] * inv_std[ci];
                for bi in 0..b {
                    let base = xhat.idx4(bi, ci, 0, 0);
                    for i in 0..h * w {
                        let gval = if train {
                            // Batch statistics depend on x.
                            coeff
                                * (g.data()[base + i]
                                    - sum_g * inv_m
                                    - xhat.data()[base + i] * sum_gx * inv_m)
                        } else {
                            coeff * g.data()[base + i]
                        };
                        gx.data_mut()[base + i] = gval;
                    }
                }
            }
            vec![gx, ggamma, gbeta]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Softmax and normalization
// ---------------------------------------------------------------------------

/// Numerically-stable softmax along `axis`.
pub fn softmax<T: Scalar>(tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    if axis >= xs.len() {
        return shape_err(format!("softmax axis {axis} out of range for {xs:?}"));
    }
    let n = xs[axis];
    let inner: usize = xs[axis + 1..].iter().product();
    let outer: usize = xs[..axis].iter().product();
    let xv = tape.val(x).clone();

    let mut out = Tensor::zeros(&xs);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(xv.data()[at(j)]);
            }
            let mut denom = T::zero();
            for j in 0..n {
                let e = (xv.data()[at(j)] - max).exp();
                out.data_mut()[at(j)] = e;
                denom = denom + e;
            }
            for j in 0..n {
                out.data_mut()[at(j)] = out.data()[at(j)] / denom;
            }
        }
    }
    let y = out.clone();
    Ok(tape.push(
        out,
        vec![x],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(y.shape());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot = dot + y.data()[at(j)] * g.data()[at(j)];
                    }
                    for j in 0..n {
                        gx.data_mut()[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                    }
                }
            }
            vec![gx]
        }),
    ))
}

/// Softmax over the time axis of `[B, T, N]`, restricted to positions where
/// `mask[b][t] > 0.5`; masked positions produce exactly zero weight.
pub fn masked_softmax_time<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    mask: &Tensor<T>,
) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    if xs.len() != 3 {
        return shape_err(format!("masked_softmax_time expects [B, T, N], got {xs:?}"));
    }
    let (b, t, n) = (xs[0], xs[1], xs[2]);
    if mask.shape() != [b, t] {
        return shape_err(format!(
            "mask shape {:?} does not match [B, T] = [{b}, {t}]",
            mask.shape()
        ));
    }
    let half = T::from_f64(0.5);
    let xv = tape.val(x).clone();
    let maskv = mask.clone();

    let mut out = Tensor::zeros(&xs);
    for bi in 0..b {
        if !(0..t).any(|ti| maskv.at2(bi, ti) > half) {
            return Err(Error::Invalid(format!(
                "masked_softmax_time: batch row {bi} has no valid positions"
            )));
        }
        for ni in 0..n {
            let mut max = T::neg_infinity();
            for ti in 0..t {
                if maskv.at2(bi, ti) > half {
                    max = max.max(xv.at3(bi, ti, ni));
                }
            }
            let mut denom = T::zero();
            for ti in 0..t {
                if maskv.at2(bi, ti) > half {
                    let e = (xv.at3(bi, ti, ni) - max).exp();
                    let oi = out.idx3(bi, ti, ni);
                    out.data_mut()[oi] = e;
                    denom = denom + e;
                }
            }
            for ti in 0..t {
                let oi = out.idx3(bi, ti, ni);
                out.data_mut()[oi] = out.data()[oi] / denom;
            }
        }
    }
    let y = out.clone();
    Ok(tape.push(
        out,
        vec![x],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(y.shape());
            for bi in 0..b {
                for ni in 0..n {
                    let mut dot = T::zero();
                    for ti in 0..t {
                        dot = dot + y.at3(bi, ti, ni) * g.at3(bi, ti, ni);
                    }
                    for ti in 0..t {
                        if maskv.at2(bi, ti) > half {
                            let gi = gx.idx3(bi, ti, ni);
                            gx.data_mut()[gi] = y.at3(bi, ti, ni) * (g.at3(bi, ti, ni) - dot);
                        }
                    }
                }
            }
            vec![gx]
        }),
    ))
}

pub const NORM_FLOOR: f64 = 1e-12;

/// Row-wise L2 normalization; accepts a vector `[N]` or rows `[B, N]`.
pub fn l2_normalize<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    let (rows, n) = match xs.len() {
        1 => (1, xs[0]),
        2 => (xs[0], xs[1]),
        _ => return shape_err(format!("l2_normalize expects rank 1 or 2, got {xs:?}")),
    };
    let floor = T::from_f64(NORM_FLOOR);
    let xv = tape.val(x).clone();

    let mut norms = vec![T::zero(); rows];
    let mut out = Tensor::zeros(&xs);
    for r in 0..rows {
        let row = &xv.data()[r * n..(r + 1) * n];
        let norm = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b).sqrt();
        if norm <= floor {
            return Err(Error::DegenerateNorm);
        }
        norms[r] = norm;
        for (o, &v) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = v / norm;
        }
    }
    let y = out.clone();
    Ok(tape.push(
        out,
        vec![x],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(y.shape());
            for r in 0..rows {
                let yrow = &y.data()[r * n..(r + 1) * n];
                let grow = &g.data()[r * n..(r + 1) * n];
                let dot = yrow
                    .iter()
                    .zip(grow)
                    .map(|(&a, &b)| a * b)
                    .fold(T::zero(), |a, b| a + b);
                for i in 0..n {
                    gx.data_mut()[r * n + i] = (grow[i] - yrow[i] * dot) / norms[r];
                }
            }
            vec![gx]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Sequence plumbing
// ---------------------------------------------------------------------------

/// Extract time step `t`: `[B, T, C] -> [B, C]`.
pub fn select_time<T: Scalar>(tape: &mut Tape<T>, x: Var, t: usize) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    if xs.len() != 3 || t >= xs[1] {
        return shape_err(format!("select_time({t}) on {xs:?}"));
    }
    let (b, tt, c) = (xs[0], xs[1], xs[2]);
    let xv = tape.val(x);
    let mut out = Tensor::zeros(&[b, c]);
    for bi in 0..b {
        let src = xv.idx3(bi, t, 0);
        let dst = out.idx2(bi, 0);
        out.data_mut()[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
    }
    Ok(tape.push(
        out,
        vec![x],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(&[b, tt, c]);
            for bi in 0..b {
                let dst = gx.idx3(bi, t, 0);
                gx.data_mut()[dst..dst + c].copy_from_slice(&g.data()[bi * c..(bi + 1) * c]);
            }
            vec![gx]
        }),
    ))
}

/// Stack per-step `[B, C]` tensors into `[B, T, C]`.
pub fn stack_time<T: Scalar>(tape: &mut Tape<T>, steps: &[Var]) -> Result<Var> {
    if steps.is_empty() {
        return Err(Error::Invalid("stack_time on empty step list".into()));
    }
    let first = tape.val(steps[0]).shape().to_vec();
    if first.len() != 2 {
        return shape_err(format!("stack_time expects [B, C] steps, got {first:?}"));
    }
    let (b, c) = (first[0], first[1]);
    let t = steps.len();
    let mut out = Tensor::zeros(&[b, t, c]);
    for (ti, &s) in steps.iter().enumerate() {
        if tape.val(s).shape() != [b, c] {
            return shape_err("stack_time steps have inconsistent shapes".into());
        }
        for bi in 0..b {
            let dst = out.idx3(bi, ti, 0);
            out.data_mut()[dst..dst + c]
                .copy_from_slice(&tape.val(s).data()[bi * c..(bi + 1) * c]);
        }
    }
    Ok(tape.push(
        out,
        steps.to_vec(),
        Box::new(move |g| {
            (0..t)
                .map(|ti| {
                    let mut gs = Tensor::zeros(&[b, c]);
                    for bi in 0..b {
                        let src = g.idx3(bi, ti, 0);
                        gs.data_mut()[bi * c..(bi + 1) * c]
                            .copy_from_slice(&g.data()[src..src + c]);
                    }
                    gs
                })
                .collect()
        }),
    ))
}

/// Sum over the time axis: `[B, T, C] -> [B, C]`.
pub fn sum_time<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    if xs.len() != 3 {
        return shape_err(format!("sum_time expects [B, T, C], got {xs:?}"));
    }
    let (b, t, c) = (xs[0], xs[1], xs[2]);
    let xv = tape.val(x);
    let mut out = Tensor::zeros(&[b, c]);
    for bi in 0..b {
        for ti in 0..t {
            let src = xv.idx3(bi, ti, 0);
            for i in 0..c {
                let oi = bi * c + i;
                out.data_mut()[oi] = out.data()[oi] + xv.data()[src + i];
            }
        }
    }
    Ok(tape.push(
        out,
        vec![x],
        Box::new(move |g| {
            let mut gx = Tensor::zeros(&[b, t, c]);
            for bi in 0..b {
                for ti in 0..t {
                    let dst = gx.idx3(bi, ti, 0);
                    gx.data_mut()[dst..dst + c]
                        .copy_from_slice(&g.data()[bi * c..(bi + 1) * c]);
                }
            }
            vec![gx]
        }),
    ))
}

/// `mask[b] * a[b, :] + (1 - mask[b]) * b[b, :]`; holds recurrent state
/// through padded steps.
pub fn mask_blend<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, mask: &Tensor<T>) -> Result<Var> {
    let shape = tape.val(a).shape().to_vec();
    if shape.len() != 2 || tape.val(b).shape() != shape || mask.shape() != [shape[0]] {
        return shape_err(format!(
            "mask_blend on a {:?}, b {:?}, mask {:?}",
            shape,
            tape.val(b).shape(),
            mask.shape()
        ));
    }
    let (rows, c) = (shape[0], shape[1]);
    let maskv = mask.clone();
    let mut out = Tensor::zeros(&shape);
    for r in 0..rows {
        let m = maskv.data()[r];
        let km = T::one() - m;
        for i in 0..c {
            out.data_mut()[r * c + i] =
                m * tape.val(a).data()[r * c + i] + km * tape.val(b).data()[r * c + i];
        }
    }
    Ok(tape.push(
        out,
        vec![a, b],
        Box::new(move |g| {
            let mut ga = Tensor::zeros(&[rows, c]);
            let mut gb = Tensor::zeros(&[rows, c]);
            for r in 0..rows {
                let m = maskv.data()[r];
                let km = T::one() - m;
                for i in 0..c {
                    ga.data_mut()[r * c + i] = m * g.data()[r * c + i];
                    gb.data_mut()[r * c + i] = km * g.data()[r * c + i];
                }
            }
            vec![ga, gb]
        }),
    ))
}

/// Zero out masked positions of `[B, T, C]` with `mask: [B, T]`.
pub fn mul_mask<T: Scalar>(tape: &mut Tape<T>, x: Var, mask: &Tensor<T>) -> Result<Var> {
    let xs = tape.val(x).shape().to_vec();
    if xs.len() != 3 || mask.shape() != [xs[0], xs[1]] {
        return shape_err(format!("mul_mask on x {xs:?}, mask {:?}", mask.shape()));
    }
    let (b, t, c) = (xs[0], xs[1], xs[2]);
    let maskv = mask.clone();
    let mut out = tape.val(x).clone();
    for bi in 0..b {
        for ti in 0..t {
            let m = maskv.at2(bi, ti);
            let base = out.idx3(bi, ti, 0);
            for v in &mut out.data_mut()[base..base + c] {
                *v = *v * m;
            }
        }
    }
    Ok(tape.push(
        out,
        vec![x],
        Box::new(move |g| {
            let mut gx = g.clone();
            for bi in 0..b {
                for ti in 0..t {
                    let m = maskv.at2(bi, ti);
                    let base = gx.idx3(bi, ti, 0);
                    for v in &mut gx.data_mut()[base..base + c] {
                        *v = *v * m;
                    }
                }
            }
            vec![gx]
        }),
    ))
}

/// Concatenate along `axis` (all other dims must agree).
pub fn concat<T: Scalar>(tape: &mut Tape<T>, parts: &[Var], axis: usize) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::Invalid("concat on empty list".into()));
    }
    let first = tape.val(parts[0]).shape().to_vec();
    if axis >= first.len() {
        return shape_err(format!("concat axis {axis} out of range for {first:?}"));
    }
    let mut axis_sizes = Vec::with_capacity(parts.len());
    let mut total_axis = 0;
    for &p in parts {
        let s = tape.val(p).shape();
        if s.len() != first.len()
            || s.iter()
                .zip(&first)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return shape_err(format!("concat of incompatible shapes {s:?} vs {first:?}"));
        }
        axis_sizes.push(s[axis]);
        total_axis += s[axis];
    }
    let mut out_shape = first.clone();
    out_shape[axis] = total_axis;
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();

    let mut out = Tensor::zeros(&out_shape);
    let mut offset = 0;
    for (&p, &asz) in parts.iter().zip(&axis_sizes) {
        let src = tape.val(p).data();
        for o in 0..outer {
            let dst_base = (o * total_axis + offset) * inner;
            let src_base = o * asz * inner;
            out.data_mut()[dst_base..dst_base + asz * inner]
                .copy_from_slice(&src[src_base..src_base + asz * inner]);
        }
        offset += asz;
    }

    Ok(tape.push(
        out,
        parts.to_vec(),
        Box::new(move |g| {
            let mut grads = Vec::with_capacity(axis_sizes.len());
            let mut offset = 0;
            for &asz in &axis_sizes {
                let mut shape = first.clone();
                shape[axis] = asz;
                let mut gp = Tensor::zeros(&shape);
                for o in 0..outer {
                    let src_base = (o * total_axis + offset) * inner;
                    let dst_base = o * asz * inner;
                    gp.data_mut()[dst_base..dst_base + asz * inner]
                        .copy_from_slice(&g.data()[src_base..src_base + asz * inner]);
                }
                grads.push(gp);
                offset += asz;
            }
            grads
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use approx::assert_abs_diff_eq;

    fn constant(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        tape.constant(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn conv1d_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[1, 4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]);
        // k=1, identity across channels
        let w = constant(&mut tape, &[2, 2, 1], vec![1., 0., 0., 1.]);
        let b = constant(&mut tape, &[2], vec![0., 0.]);
        let y = conv1d(&mut tape, x, w, b, 1).unwrap();
        assert_eq!(tape.val(y).data(), tape.val(x).data());
    }

    #[test]
    fn conv1d_output_length_formula() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[1, 10, 1], vec![0.0; 10]);
        let w = constant(&mut tape, &[1, 1, 6], vec![0.0; 6]);
        let b = constant(&mut tape, &[1], vec![0.0]);
        let y = conv1d(&mut tape, x, w, b, 2).unwrap();
        assert_eq!(tape.val(y).shape(), &[1, 3, 1]);
    }

    #[test]
    fn conv1d_rejects_short_sequence() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[1, 3, 1], vec![0.0; 3]);
        let w = constant(&mut tape, &[1, 1, 6], vec![0.0; 6]);
        let b = constant(&mut tape, &[1], vec![0.0]);
        assert!(matches!(
            conv1d(&mut tape, x, w, b, 1),
            Err(Error::SequenceTooShort { len: 3, kernel: 6 })
        ));
    }

    #[test]
    fn conv2d_spatial_size_formula() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[1, 1, 224, 224], vec![0.0; 224 * 224]);
        let w = constant(&mut tape, &[1, 1, 7, 7], vec![0.0; 49]);
        let y = conv2d(&mut tape, x, w, 2, 3).unwrap();
        assert_eq!(tape.val(y).shape(), &[1, 1, 112, 112]);
    }

    #[test]
    fn conv2d_1x1_identity_preserves_spatial_values() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let x = constant(&mut tape, &[1, 1, 3, 3], data.clone());
        let w = constant(&mut tape, &[1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&mut tape, x, w, 1, 0).unwrap();
        assert_eq!(tape.val(y).data(), &data[..]);
    }

    #[test]
    fn softmax_constant_vector_is_uniform() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[4], vec![3.0; 4]);
        let y = softmax(&mut tape, x, 0).unwrap();
        for &v in tape.val(y).data() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // softmax([0, ln 3]) = [0.25, 0.75]
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[2], vec![0.0, 3.0f64.ln()]);
        let y = softmax(&mut tape, x, 0).unwrap();
        assert_abs_diff_eq!(tape.val(y).data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.val(y).data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[3], vec![0.1, -2.0, 1.5]);
        let xs = constant(&mut tape, &[3], vec![100.1, 98.0, 101.5]);
        let y = softmax(&mut tape, x, 0).unwrap();
        let ys = softmax(&mut tape, xs, 0).unwrap();
        for (a, b) in tape.val(y).data().iter().zip(tape.val(ys).data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn l2_normalize_closed_form() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[2], vec![3.0, 4.0]);
        let y = l2_normalize(&mut tape, x).unwrap();
        assert_abs_diff_eq!(tape.val(y).data()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.val(y).data()[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn l2_normalize_zero_vector_errors() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[3], vec![0.0; 3]);
        assert_eq!(l2_normalize(&mut tape, x).unwrap_err(), Error::DegenerateNorm);
    }

    #[test]
    fn max_pool_2x2() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[1, 1, 2, 2], vec![1., 2., 3., 4.]);
        let y = max_pool2d(&mut tape, x, 2, 2, 0).unwrap();
        assert_eq!(tape.val(y).data(), &[4.0]);
    }

    #[test]
    fn global_avg_pool_of_constant_plane() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[1, 2, 3, 3], vec![5.0; 18]);
        let y = global_avg_pool(&mut tape, x).unwrap();
        assert_eq!(tape.val(y).data(), &[5.0, 5.0]);
    }

    #[test]
    fn batchnorm_constant_channel_maps_to_beta_in_train_mode() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[2, 1, 2, 2], vec![7.0; 8]);
        let gamma = constant(&mut tape, &[1], vec![1.0]);
        let beta = constant(&mut tape, &[1], vec![0.25]);
        let mut stats = BnStats::new(1);
        let y = batchnorm2d(&mut tape, x, gamma, beta, &mut stats, true).unwrap();
        for &v in tape.val(y).data() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-6);
        }
        // Running mean moved toward the batch mean.
        assert_abs_diff_eq!(stats.mean.data()[0], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn batchnorm_eval_uses_init_stats_before_any_update() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[1, 1, 1, 2], vec![1.0, -1.0]);
        let gamma = constant(&mut tape, &[1], vec![1.0]);
        let beta = constant(&mut tape, &[1], vec![0.0]);
        let mut stats = BnStats::new(1);
        let y = batchnorm2d(&mut tape, x, gamma, beta, &mut stats, false).unwrap();
        // mean 0, var 1 -> x / sqrt(1 + eps)
        let expect = 1.0 / (1.0 + BN_EPS).sqrt();
        assert_abs_diff_eq!(tape.val(y).data()[0], expect, epsilon = 1e-12);
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[2], vec![4.0, -1.0]);
        let eye = constant(&mut tape, &[2, 2], vec![1., 0., 0., 1.]);
        let zero_w = constant(&mut tape, &[2, 2], vec![0.0; 4]);
        let b = constant(&mut tape, &[2], vec![0.5, -0.5]);
        let zero_b = constant(&mut tape, &[2], vec![0.0, 0.0]);
        let y = linear(&mut tape, x, eye, Some(zero_b)).unwrap();
        assert_eq!(tape.val(y).data(), &[4.0, -1.0]);
        let y2 = linear(&mut tape, x, zero_w, Some(b)).unwrap();
        assert_eq!(tape.val(y2).data(), &[0.5, -0.5]);
    }

    #[test]
    fn masked_softmax_excludes_padding() {
        let mut tape = Tape::new();
        // B=1, T=3, N=1; equal scores, last position masked -> 0.5/0.5/0.
        let x = constant(&mut tape, &[1, 3, 1], vec![2.0, 2.0, 2.0]);
        let mask = Tensor::new(&[1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        let y = masked_softmax_time(&mut tape, x, &mask).unwrap();
        assert_abs_diff_eq!(tape.val(y).data()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.val(y).data()[1], 0.5, epsilon = 1e-12);
        assert_eq!(tape.val(y).data()[2], 0.0);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut store = crate::tape::ParamStore::new();
        store.add("a", Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        store.add("b", Tensor::new(&[1, 3], vec![3.0, 4.0, 5.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&store);
        let cat = concat(&mut tape, &[bound.get(0), bound.get(1)], 1).unwrap();
        assert_eq!(tape.val(cat).shape(), &[1, 5]);
        let s = sum_all(&mut tape, cat);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(0).data(), &[1.0, 1.0]);
        assert_eq!(store.grad(1).data(), &[1.0, 1.0, 1.0]);
    }
}
