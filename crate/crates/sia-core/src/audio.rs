//! Audio embedder: Conv1d (40 -> 64, k=6) -> stacked Bi-GRU (hidden N/2 per
//! direction) -> single-head attention pooling -> L2 normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{attention_pool, AttentionParams};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::gru::{bigru_layer, GruDirParams};
use crate::mfcc::{within_length_limit, MfccSequence, FRAME_CAP};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{BoundParams, ParamStore, Tape, Var};
use crate::tensor::Tensor;

pub const ATTENTION_INNER: usize = 128;
pub const CONV_KERNELS: usize = 64;
pub const CONV_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AudioEmbedderConfig {
    /// Latent dimension N (even).
    pub n: usize,
    /// Number of stacked Bi-GRU layers.
    pub gru_layers: usize,
    /// Stride of the front 1-D convolution.
    pub conv_stride: usize,
    /// Input feature width (MFCC coefficients).
    pub n_mfcc: usize,
}

impl AudioEmbedderConfig {
    pub fn new(n: usize, gru_layers: usize) -> Self {
        AudioEmbedderConfig {
            n,
            gru_layers,
            conv_stride: 2,
            n_mfcc: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n % 2 != 0 {
            return Err(Error::Invalid(format!(
                "latent dimension must be positive and even, got {}",
                self.n
            )));
        }
        if self.gru_layers == 0 {
            return Err(Error::Invalid("need at least one Bi-GRU layer".into()));
        }
        if self.conv_stride == 0 {
            return Err(Error::Invalid("conv stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.n / 2
    }
}

const GATE_NAMES: [&str; 12] = [
    "w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn", "b_ir", "b_iz", "b_in", "b_hr", "b_hz",
    "b_hn",
];

/// Names and shapes of every trainable tensor, in declaration order.
pub fn param_specs(cfg: &AudioEmbedderConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden();
    let mut specs = vec![
        (
            "audio.conv.weight".into(),
            vec![CONV_KERNELS, cfg.n_mfcc, CONV_LEN],
        ),
        ("audio.conv.bias".into(), vec![CONV_KERNELS]),
    ];
    for layer in 0..cfg.gru_layers {
        let d_in = if layer == 0 { CONV_KERNELS } else { cfg.n };
        for dir in ["fwd", "bwd"] {
            for name in GATE_NAMES {
                let shape = match name {
                    "w_ir" | "w_iz" | "w_in" => vec![h, d_in],
                    "w_hr" | "w_hz" | "w_hn" => vec![h, h],
                    _ => vec![h],
                };
                specs.push((format!("audio.gru{layer}.{dir}.{name}"), shape));
            }
        }
    }
    specs.push(("audio.attn.w".into(), vec![ATTENTION_INNER, cfg.n]));
    specs.push(("audio.attn.b_w".into(), vec![ATTENTION_INNER]));
    specs.push(("audio.attn.v".into(), vec![cfg.n, ATTENTION_INNER]));
    specs.push(("audio.attn.b_v".into(), vec![cfg.n]));
    specs
}

/// Exact number of trainable scalars for a configuration.
pub fn audio_param_count(cfg: &AudioEmbedderConfig) -> usize {
    param_specs(cfg)
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum()
}

/// Allocate and initialize every parameter into `store`.
///
/// Convolution weights use Kaiming-style fan-in uniform, GRU tensors use
/// U(-1/sqrt(h), 1/sqrt(h)), attention projections use fan-in uniform with
/// zero biases.
pub fn init_params<T: Scalar>(
    cfg: &AudioEmbedderConfig,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let h = cfg.hidden();
    for (name, shape) in param_specs(cfg) {
        let tensor = if name.ends_with("conv.weight") {
            let fan_in = (cfg.n_mfcc * CONV_LEN) as f64;
            let bound = (6.0 / fan_in).sqrt();
            random_uniform(&shape, bound, rng)
        } else if name.contains(".gru") {
            let bound = 1.0 / (h as f64).sqrt();
            random_uniform(&shape, bound, rng)
        } else if name.ends_with("attn.w") || name.ends_with("attn.v") {
            let fan_in = shape[1] as f64;
            let bound = 1.0 / fan_in.sqrt();
            random_uniform(&shape, bound, rng)
        } else {
            Tensor::zeros(&shape)
        };
        store.add(&name, tensor)?;
    }
    Ok(())
}

fn random_uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// Tape vars of the audio branch.
pub struct AudioVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub grus: Vec<(GruDirParams, GruDirParams)>,
    pub attn: AttentionParams,
}

/// Bind the audio parameters (added by [`init_params`]) as tape leaves.
pub fn bind_params<T: Scalar>(
    store: &ParamStore<T>,
    bound: &BoundParams,
    cfg: &AudioEmbedderConfig,
) -> Result<AudioVars> {
    let var = |name: &str| -> Result<Var> {
        store
            .lookup(name)
            .map(|i| bound.get(i))
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    };
    let mut grus = Vec::with_capacity(cfg.gru_layers);
    for layer in 0..cfg.gru_layers {
        let mut dirs = Vec::with_capacity(2);
        for dir in ["fwd", "bwd"] {
            let g = |n: &str| var(&format!("audio.gru{layer}.{dir}.{n}"));
            dirs.push(GruDirParams {
                w_ir: g("w_ir")?,
                w_iz: g("w_iz")?,
                w_in: g("w_in")?,
                w_hr: g("w_hr")?,
                w_hz: g("w_hz")?,
                w_hn: g("w_hn")?,
                b_ir: g("b_ir")?,
                b_iz: g("b_iz")?,
                b_in: g("b_in")?,
                b_hr: g("b_hr")?,
                b_hz: g("b_hz")?,
                b_hn: g("b_hn")?,
            });
        }
        let bwd = dirs.pop().expect("two directions");
        let fwd = dirs.pop().expect("two directions");
        grus.push((fwd, bwd));
    }
    Ok(AudioVars {
        conv_w: var("audio.conv.weight")?,
        conv_b: var("audio.conv.bias")?,
        grus,
        attn: AttentionParams {
            w: var("audio.attn.w")?,
            b_w: var("audio.attn.b_w")?,
            v: var("audio.attn.v")?,
            b_v: var("audio.attn.b_v")?,
        },
    })
}

/// Per-sample valid lengths after the front convolution; errors if any
/// sample is shorter than the kernel.
pub fn conv_mask<T: Scalar>(mask: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (b, t) = (mask.shape()[0], mask.shape()[1]);
    if t < CONV_LEN {
        return Err(Error::SequenceTooShort {
            len: t,
            kernel: CONV_LEN,
        });
    }
    let t_out = (t - CONV_LEN) / stride + 1;
    let half = T::from_f64(0.5);
    let mut out = Tensor::zeros(&[b, t_out]);
    for bi in 0..b {
        let valid = (0..t).take_while(|&ti| mask.at2(bi, ti) > half).count();
        if valid < CONV_LEN {
            return Err(Error::SequenceTooShort {
                len: valid,
                kernel: CONV_LEN,
            });
        }
        let valid_out = (valid - CONV_LEN) / stride + 1;
        for ti in 0..valid_out.min(t_out) {
            let idx = out.idx2(bi, ti);
            out.data_mut()[idx] = T::one();
        }
    }
    Ok(out)
}

/// Embed a padded batch `x: [B, T, 40]` with validity mask `[B, T]` into
/// unit rows `[B, N]`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &AudioVars,
    cfg: &AudioEmbedderConfig,
    x: Var,
    mask: &Tensor<T>,
) -> Result<Var> {
    let conv_out = ops::conv1d(tape, x, vars.conv_w, vars.conv_b, cfg.conv_stride)?;
    let mask_out = conv_mask(mask, cfg.conv_stride)?;
    // Zero padded positions so straddling conv windows cannot leak.
    let mut h = ops::mul_mask(tape, conv_out, &mask_out)?;
    for (fwd, bwd) in &vars.grus {
        h = bigru_layer(tape, h, fwd, bwd, &mask_out)?;
    }
    let pooled = attention_pool(tape, h, &vars.attn, &mask_out)?;
    ops::l2_normalize(tape, pooled)
}

/// Single-sequence embedding (evaluation path): returns a unit N-vector.
pub fn embed_audio<T: Scalar>(
    seq: &MfccSequence,
    store: &ParamStore<T>,
    cfg: &AudioEmbedderConfig,
) -> Result<Tensor<T>> {
    if !within_length_limit(seq) {
        return Err(Error::SequenceTooLong {
            frames: seq.num_frames(),
            cap: FRAME_CAP,
        });
    }
    let t = seq.num_frames();
    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let vars = bind_params(store, &bound, cfg)?;
    let x = tape.constant(seq.frames.cast::<T>().reshaped(&[1, t, cfg.n_mfcc])?);
    let mask = Tensor::full(&[1, t], T::one());
    let emb = forward(&mut tape, &vars, cfg, x, &mask)?;
    Ok(tape.val(emb).clone().reshaped(&[cfg.n])?)
}
