//! Gradient-verification harness: central finite differences against the
//! analytic backward pass for every primitive and for composed models.
//!
//! Each case builds a fresh parameter store from a seed and returns the
//! worst relative error over all parameter coordinates. Non-scalar outputs
//! are reduced with a fixed random weighting so every output coordinate
//! contributes a distinct cotangent.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_pool, AttentionParams};
use crate::audio::{self, AudioEmbedderConfig};
use crate::error::{Error, Result};
use crate::gru::{bigru_layer, GruDirParams};
use crate::image::{self, BnStore, ImageEmbedderConfig};
use crate::objective::{hinge_loss, HingeConfig};
use crate::ops::{self, BnStats};
use crate::tape::{grad_check, BoundParams, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Every differentiable primitive with a dedicated finite-difference case.
pub const PRIMITIVE_CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "one_minus",
    "relu",
    "tanh",
    "sigmoid",
    "sum_all",
    "linear",
    "linear_no_bias",
    "linear_time",
    "matmul",
    "conv1d",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "batchnorm2d",
    "softmax",
    "masked_softmax_time",
    "l2_normalize",
    "select_time",
    "stack_time",
    "sum_time",
    "mask_blend",
    "mul_mask",
    "concat",
    "bigru_layer",
    "attention_pool",
    "hinge_loss",
];

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Reduce `out` to a scalar with fixed random weights.
fn reduce(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = ops::mul(tape, out, w)?;
    Ok(ops::sum_all(tape, p))
}

fn gru_names() -> [(&'static str, usize); 12] {
    [
        ("w_ir", 0),
        ("w_iz", 0),
        ("w_in", 0),
        ("w_hr", 1),
        ("w_hz", 1),
        ("w_hn", 1),
        ("b_ir", 2),
        ("b_iz", 2),
        ("b_in", 2),
        ("b_hr", 2),
        ("b_hz", 2),
        ("b_hn", 2),
    ]
}

fn add_gru_dir(
    store: &mut ParamStore<f64>,
    prefix: &str,
    d_in: usize,
    h: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for (name, kind) in gru_names() {
        let shape: Vec<usize> = match kind {
            0 => vec![h, d_in],
            1 => vec![h, h],
            _ => vec![h],
        };
        store.add(&format!("{prefix}.{name}"), rand_tensor(&shape, rng))?;
    }
    Ok(())
}

/// Finite-difference check for one primitive; returns the worst relative
/// error over every parameter coordinate.
pub fn grad_check_primitive(case: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store: ParamStore<f64> = ParamStore::new();
    match case {
        "add" | "sub" | "mul" => {
            store.add("a", rand_tensor(&[2, 3], &mut rng))?;
            store.add("b", rand_tensor(&[2, 3], &mut rng))?;
            let w = rand_tensor(&[2, 3], &mut rng);
            let op = case;
            let name = alloc::string::String::from(op);
            grad_check(&mut store, move |tape, bound| {
                let (a, b) = (bound.get(0), bound.get(1));
                let out = match name.as_str() {
                    "add" => ops::add(tape, a, b)?,
                    "sub" => ops::sub(tape, a, b)?,
                    _ => ops::mul(tape, a, b)?,
                };
                reduce(tape, out, &w)
            })
        }
        "scale" | "one_minus" | "relu" | "tanh" | "sigmoid" => {
            store.add("x", rand_tensor(&[3, 4], &mut rng))?;
            let w = rand_tensor(&[3, 4], &mut rng);
            let name = alloc::string::String::from(case);
            grad_check(&mut store, move |tape, bound| {
                let x = bound.get(0);
                let out = match name.as_str() {
                    "scale" => ops::scale(tape, x, 0.7),
                    "one_minus" => ops::one_minus(tape, x),
                    "relu" => ops::relu(tape, x),
                    "tanh" => ops::tanh_op(tape, x),
                    _ => ops::sigmoid(tape, x),
                };
                reduce(tape, out, &w)
            })
        }
        "sum_all" => {
            store.add("x", rand_tensor(&[2, 5], &mut rng))?;
            grad_check(&mut store, |tape, bound| Ok(ops::sum_all(tape, bound.get(0))))
        }
        "linear" | "linear_no_bias" => {
            store.add("x", rand_tensor(&[3, 4], &mut rng))?;
            store.add("w", rand_tensor(&[2, 4], &mut rng))?;
            let biased = case == "linear";
            if biased {
                store.add("b", rand_tensor(&[2], &mut rng))?;
            }
            let w = rand_tensor(&[3, 2], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let bias = if biased { Some(bound.get(2)) } else { None };
                let out = ops::linear(tape, bound.get(0), bound.get(1), bias)?;
                reduce(tape, out, &w)
            })
        }
        "linear_time" => {
            store.add("x", rand_tensor(&[2, 3, 4], &mut rng))?;
            store.add("w", rand_tensor(&[2, 4], &mut rng))?;
            store.add("b", rand_tensor(&[2], &mut rng))?;
            let w = rand_tensor(&[2, 3, 2], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::linear_time(tape, bound.get(0), bound.get(1), Some(bound.get(2)))?;
                reduce(tape, out, &w)
            })
        }
        "matmul" => {
            store.add("a", rand_tensor(&[3, 4], &mut rng))?;
            store.add("b", rand_tensor(&[4, 2], &mut rng))?;
            let w = rand_tensor(&[3, 2], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::matmul(tape, bound.get(0), bound.get(1))?;
                reduce(tape, out, &w)
            })
        }
        "conv1d" => {
            store.add("x", rand_tensor(&[2, 9, 3], &mut rng))?;
            store.add("w", rand_tensor(&[4, 3, 3], &mut rng))?;
            store.add("b", rand_tensor(&[4], &mut rng))?;
            let w = rand_tensor(&[2, 4, 4], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::conv1d(tape, bound.get(0), bound.get(1), bound.get(2), 2)?;
                reduce(tape, out, &w)
            })
        }
        "conv2d" => {
            store.add("x", rand_tensor(&[2, 3, 6, 6], &mut rng))?;
            store.add("w", rand_tensor(&[4, 3, 3, 3], &mut rng))?;
            let w = rand_tensor(&[2, 4, 3, 3], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::conv2d(tape, bound.get(0), bound.get(1), 2, 1)?;
                reduce(tape, out, &w)
            })
        }
        "max_pool2d" => {
            // Well-separated values keep window maxima away from ties.
            let mut levels: Vec<f64> = (0..72).map(|i| (i as f64 - 36.0) * 0.02).collect();
            for i in (1..levels.len()).rev() {
                levels.swap(i, rng.gen_range(0..=i));
            }
            store.add("x", Tensor::new(&[1, 2, 6, 6], levels)?)?;
            let w = rand_tensor(&[1, 2, 3, 3], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::max_pool2d(tape, bound.get(0), 3, 2, 1)?;
                reduce(tape, out, &w)
            })
        }
        "avg_pool2d" => {
            store.add("x", rand_tensor(&[1, 2, 6, 6], &mut rng))?;
            let w = rand_tensor(&[1, 2, 3, 3], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::avg_pool2d(tape, bound.get(0), 2, 2)?;
                reduce(tape, out, &w)
            })
        }
        "global_avg_pool" => {
            store.add("x", rand_tensor(&[2, 3, 4, 4], &mut rng))?;
            let w = rand_tensor(&[2, 3], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::global_avg_pool(tape, bound.get(0))?;
                reduce(tape, out, &w)
            })
        }
        "batchnorm2d" => {
            store.add("x", rand_tensor(&[2, 2, 3, 3], &mut rng))?;
            store.add("gamma", Tensor::from_fn(&[2], |_| rng.gen_range(0.5..1.5)))?;
            store.add("beta", rand_tensor(&[2], &mut rng))?;
            let w = rand_tensor(&[2, 2, 3, 3], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let mut stats = BnStats::new(2);
                let out =
                    ops::batchnorm2d(tape, bound.get(0), bound.get(1), bound.get(2), &mut stats, true)?;
                reduce(tape, out, &w)
            })
        }
        "softmax" => {
            store.add("x", rand_tensor(&[3, 4], &mut rng))?;
            let w = rand_tensor(&[3, 4], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::softmax(tape, bound.get(0), 1)?;
                reduce(tape, out, &w)
            })
        }
        "masked_softmax_time" => {
            store.add("x", rand_tensor(&[2, 4, 3], &mut rng))?;
            let mask = Tensor::new(&[2, 4], vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0])?;
            let w = rand_tensor(&[2, 4, 3], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::masked_softmax_time(tape, bound.get(0), &mask)?;
                reduce(tape, out, &w)
            })
        }
        "l2_normalize" => {
            store.add("x", Tensor::from_fn(&[2, 5], |_| rng.gen_range(0.2..1.2)))?;
            let w = rand_tensor(&[2, 5], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::l2_normalize(tape, bound.get(0))?;
                reduce(tape, out, &w)
            })
        }
        "select_time" => {
            store.add("x", rand_tensor(&[2, 4, 3], &mut rng))?;
            let w = rand_tensor(&[2, 3], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::select_time(tape, bound.get(0), 2)?;
                reduce(tape, out, &w)
            })
        }
        "stack_time" => {
            store.add("s0", rand_tensor(&[2, 3], &mut rng))?;
            store.add("s1", rand_tensor(&[2, 3], &mut rng))?;
            store.add("s2", rand_tensor(&[2, 3], &mut rng))?;
            let w = rand_tensor(&[2, 3, 3], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let steps = [bound.get(0), bound.get(1), bound.get(2)];
                let out = ops::stack_time(tape, &steps)?;
                reduce(tape, out, &w)
            })
        }
        "sum_time" => {
            store.add("x", rand_tensor(&[2, 4, 3], &mut rng))?;
            let w = rand_tensor(&[2, 3], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::sum_time(tape, bound.get(0))?;
                reduce(tape, out, &w)
            })
        }
        "mask_blend" => {
            store.add("a", rand_tensor(&[3, 4], &mut rng))?;
            store.add("b", rand_tensor(&[3, 4], &mut rng))?;
            let mask = Tensor::new(&[3], vec![1.0, 0.0, 1.0])?;
            let w = rand_tensor(&[3, 4], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::mask_blend(tape, bound.get(0), bound.get(1), &mask)?;
                reduce(tape, out, &w)
            })
        }
        "mul_mask" => {
            store.add("x", rand_tensor(&[2, 4, 3], &mut rng))?;
            let mask = Tensor::new(&[2, 4], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0])?;
            let w = rand_tensor(&[2, 4, 3], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::mul_mask(tape, bound.get(0), &mask)?;
                reduce(tape, out, &w)
            })
        }
        "concat" => {
            store.add("a", rand_tensor(&[2, 3], &mut rng))?;
            store.add("b", rand_tensor(&[2, 2], &mut rng))?;
            let w = rand_tensor(&[2, 5], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let out = ops::concat(tape, &[bound.get(0), bound.get(1)], 1)?;
                reduce(tape, out, &w)
            })
        }
        "bigru_layer" => {
            let (d_in, h, t) = (3, 2, 4);
            store.add("x", rand_tensor(&[2, t, d_in], &mut rng))?;
            add_gru_dir(&mut store, "fwd", d_in, h, &mut rng)?;
            add_gru_dir(&mut store, "bwd", d_in, h, &mut rng)?;
            let mask = Tensor::new(&[2, t], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0])?;
            let w = rand_tensor(&[2, t, 2 * h], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let x = bound.get(0);
                let fwd = bind_gru_dir_check(tape, bound, 1);
                let bwd = bind_gru_dir_check(tape, bound, 13);
                let out = bigru_layer(tape, x, &fwd, &bwd, &mask)?;
                reduce(tape, out, &w)
            })
        }
        "attention_pool" => {
            let (t, n, inner) = (4, 3, 5);
            store.add("states", rand_tensor(&[1, t, n], &mut rng))?;
            store.add("w", rand_tensor(&[inner, n], &mut rng))?;
            store.add("b_w", rand_tensor(&[inner], &mut rng))?;
            store.add("v", rand_tensor(&[n, inner], &mut rng))?;
            store.add("b_v", rand_tensor(&[n], &mut rng))?;
            let mask = Tensor::new(&[1, t], vec![1.0, 1.0, 1.0, 0.0])?;
            let w = rand_tensor(&[1, n], &mut rng);
            grad_check(&mut store, move |tape, bound| {
                let params = AttentionParams {
                    w: bound.get(1),
                    b_w: bound.get(2),
                    v: bound.get(3),
                    b_v: bound.get(4),
                };
                let out = attention_pool(tape, bound.get(0), &params, &mask)?;
                reduce(tape, out, &w)
            })
        }
        "hinge_loss" => {
            store.add("a", rand_tensor(&[3, 4], &mut rng))?;
            store.add("i", rand_tensor(&[3, 4], &mut rng))?;
            grad_check(&mut store, move |tape, bound| {
                let a = ops::l2_normalize(tape, bound.get(0))?;
                let i = ops::l2_normalize(tape, bound.get(1))?;
                hinge_loss(tape, a, i, &HingeConfig::default())
            })
        }
        other => Err(Error::Invalid(format!("unknown primitive case {other}"))),
    }
}

/// GRU parameter binding when the 12 direction tensors occupy consecutive
/// store slots starting at `base` in [`gru_names`] order.
fn bind_gru_dir_check(_tape: &Tape<f64>, bound: &BoundParams, base: usize) -> GruDirParams {
    GruDirParams {
        w_ir: bound.get(base),
        w_iz: bound.get(base + 1),
        w_in: bound.get(base + 2),
        w_hr: bound.get(base + 3),
        w_hz: bound.get(base + 4),
        w_hn: bound.get(base + 5),
        b_ir: bound.get(base + 6),
        b_iz: bound.get(base + 7),
        b_in: bound.get(base + 8),
        b_hr: bound.get(base + 9),
        b_hz: bound.get(base + 10),
        b_hn: bound.get(base + 11),
    }
}

/// Composed check: the full audio branch at desk scale (small latent and
/// MFCC width), including the input.
pub fn grad_check_tiny_audio(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = AudioEmbedderConfig::new(4, 1);
    cfg.n_mfcc = 4;
    let mut store: ParamStore<f64> = ParamStore::new();
    audio::init_params(&cfg, &mut store, &mut rng)?;
    let t = 8;
    let input_idx = store.add("check.input", rand_tensor(&[1, t, cfg.n_mfcc], &mut rng))?;
    let mask = Tensor::full(&[1, t], 1.0);
    let w = rand_tensor(&[1, cfg.n], &mut rng);
    grad_check(&mut store, move |tape, bound| {
        // Rebind through a name index with the same insertion order as the
        // real store; the extra input var rides along and is checked too.
        let vars = bind_for_check(bound, &cfg)?;
        let out = audio::forward(tape, &vars, &cfg, bound.get(input_idx), &mask)?;
        reduce(tape, out, &w)
    })
}

fn bind_for_check(bound: &BoundParams, cfg: &AudioEmbedderConfig) -> Result<audio::AudioVars> {
    let mut tmp: ParamStore<f64> = ParamStore::new();
    for (name, shape) in audio::param_specs(cfg) {
        tmp.add(&name, Tensor::zeros(&shape))?;
    }
    audio::bind_params(&tmp, bound, cfg)
}

/// Composed check: the full image branch on a reduced grid.
pub fn grad_check_tiny_image(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ImageEmbedderConfig::new(2, vec![1, 1], 4);
    let mut store: ParamStore<f64> = ParamStore::new();
    image::init_params(&cfg, &mut store, &mut rng)?;
    let input_idx = store.add(
        "check.input",
        Tensor::from_fn(&[1, 3, 16, 16], |_| rng.gen_range(0.0..1.0)),
    )?;
    let w = rand_tensor(&[1, cfg.n], &mut rng);
    grad_check(&mut store, move |tape, bound| {
        let mut tmp: ParamStore<f64> = ParamStore::new();
        for (name, shape) in image::param_specs(&cfg) {
            tmp.add(&name, Tensor::zeros(&shape))?;
        }
        let mut bn = BnStore::for_config(&cfg);
        let out = image::forward(tape, &tmp, bound, &mut bn, &cfg, bound.get(input_idx), true)?;
        reduce(tape, out, &w)
    })
}

/// Composed check: normalized embeddings through the batch hinge loss.
pub fn grad_check_composed_hinge(seed: u64) -> Result<f64> {
    grad_check_primitive("hinge_loss", seed)
}
