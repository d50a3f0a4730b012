//! DenseNet image embedder.
//!
//! Stem: 7x7 stride-2 conv (no bias) -> BN -> ReLU -> 3x3 max pool stride 2.
//! Dense layers are BN-ReLU-Conv(1x1 to 4*growth)-BN-ReLU-Conv(3x3 to
//! growth), concatenated onto their input; transitions halve channels with a
//! 1x1 conv and 2x2 average pooling. A final BN-ReLU, global average pooling
//! and a linear head (with bias) produce the N-vector, L2-normalized.
//! All convolutions are bias-free.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::ops::{self, BnStats};
use crate::scalar::Scalar;
use crate::tape::{BoundParams, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Network input side length.
pub const CROP: usize = 224;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEmbedderConfig {
    /// Channels added by each dense layer.
    pub growth: usize,
    /// Convolutional layers per dense block.
    pub block_config: Vec<usize>,
    /// Bottleneck width multiplier (1x1 conv produces `bottleneck_mult * growth`).
    pub bottleneck_mult: usize,
    /// Latent dimension N.
    pub n: usize,
}

impl ImageEmbedderConfig {
    /// The full-size architecture: growth 32, blocks (6, 12, 64, 48).
    pub fn full(n: usize) -> Self {
        ImageEmbedderConfig {
            growth: 32,
            block_config: vec![6, 12, 64, 48],
            bottleneck_mult: 4,
            n,
        }
    }

    pub fn new(growth: usize, block_config: Vec<usize>, n: usize) -> Self {
        ImageEmbedderConfig {
            growth,
            block_config,
            bottleneck_mult: 4,
            n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.growth == 0 || self.n == 0 || self.bottleneck_mult == 0 {
            return Err(Error::Invalid("image config entries must be positive".into()));
        }
        if self.block_config.is_empty() || self.block_config.iter().any(|&l| l == 0) {
            return Err(Error::Invalid("block configuration must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn stem_channels(&self) -> usize {
        2 * self.growth
    }

    /// Channel count entering the classifier head.
    pub fn final_channels(&self) -> usize {
        let mut c = self.stem_channels();
        for (i, &layers) in self.block_config.iter().enumerate() {
            c += layers * self.growth;
            if i + 1 < self.block_config.len() {
                c /= 2;
            }
        }
        c
    }
}

/// Per-layer channel bookkeeping: (block index, input channels) pairs plus
/// transition input channels.
fn walk_channels(cfg: &ImageEmbedderConfig) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut per_block = Vec::new();
    let mut transitions = Vec::new();
    let mut c = cfg.stem_channels();
    for (i, &layers) in cfg.block_config.iter().enumerate() {
        let mut ins = Vec::with_capacity(layers);
        for _ in 0..layers {
            ins.push(c);
            c += cfg.growth;
        }
        per_block.push(ins);
        if i + 1 < cfg.block_config.len() {
            transitions.push(c);
            c /= 2;
        }
    }
    (per_block, transitions)
}

/// Names and shapes of every trainable tensor, in network order.
pub fn param_specs(cfg: &ImageEmbedderConfig) -> Vec<(String, Vec<usize>)> {
    let bottleneck = cfg.bottleneck_mult * cfg.growth;
    let stem = cfg.stem_channels();
    let mut specs: Vec<(String, Vec<usize>)> = vec![
        ("image.stem.conv".into(), vec![stem, 3, 7, 7]),
        ("image.stem.bn.gamma".into(), vec![stem]),
        ("image.stem.bn.beta".into(), vec![stem]),
    ];
    let (per_block, transitions) = walk_channels(cfg);
    for (b, ins) in per_block.iter().enumerate() {
        for (l, &c_in) in ins.iter().enumerate() {
            let p = format!("image.block{b}.layer{l}");
            specs.push((format!("{p}.bn1.gamma"), vec![c_in]));
            specs.push((format!("{p}.bn1.beta"), vec![c_in]));
            specs.push((format!("{p}.conv1"), vec![bottleneck, c_in, 1, 1]));
            specs.push((format!("{p}.bn2.gamma"), vec![bottleneck]));
            specs.push((format!("{p}.bn2.beta"), vec![bottleneck]));
            specs.push((format!("{p}.conv2"), vec![cfg.growth, bottleneck, 3, 3]));
        }
        if b < transitions.len() {
            let c = transitions[b];
            specs.push((format!("image.trans{b}.bn.gamma"), vec![c]));
            specs.push((format!("image.trans{b}.bn.beta"), vec![c]));
            specs.push((format!("image.trans{b}.conv"), vec![c / 2, c, 1, 1]));
        }
    }
    let c_final = cfg.final_channels();
    specs.push(("image.final_bn.gamma".into(), vec![c_final]));
    specs.push(("image.final_bn.beta".into(), vec![c_final]));
    specs.push(("image.head.weight".into(), vec![cfg.n, c_final]));
    specs.push(("image.head.bias".into(), vec![cfg.n]));
    specs
}

/// Exact number of trainable scalars for a configuration.
pub fn image_param_count(cfg: &ImageEmbedderConfig) -> usize {
    param_specs(cfg)
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum()
}

/// Allocate and initialize every parameter: Kaiming fan-in uniform for conv
/// weights, gamma 1 / beta 0 for BN, fan-in uniform for the head.
pub fn init_params<T: Scalar>(
    cfg: &ImageEmbedderConfig,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    for (name, shape) in param_specs(cfg) {
        let tensor = if name.ends_with("conv") || name.ends_with("conv1") || name.ends_with("conv2")
        {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(&shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
        } else if name.ends_with("gamma") {
            Tensor::full(&shape, T::one())
        } else if name.ends_with("head.weight") {
            let bound = 1.0 / (shape[1] as f64).sqrt();
            Tensor::from_fn(&shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
        } else {
            Tensor::zeros(&shape)
        };
        store.add(&name, tensor)?;
    }
    Ok(())
}

/// Running batch-norm statistics for every BN layer, keyed by the layer's
/// parameter prefix (e.g. `image.stem.bn`).
#[derive(Debug, Clone, PartialEq)]
pub struct BnStore<T: Scalar> {
    stats: BTreeMap<String, BnStats<T>>,
}

impl<T: Scalar> BnStore<T> {
    /// Fresh (mean 0, var 1) statistics for every BN layer of `cfg`.
    pub fn for_config(cfg: &ImageEmbedderConfig) -> Self {
        let mut stats = BTreeMap::new();
        for (name, shape) in param_specs(cfg) {
            if let Some(prefix) = name.strip_suffix(".gamma") {
                stats.insert(String::from(prefix), BnStats::new(shape[0]));
            }
        }
        BnStore { stats }
    }

    pub fn get_mut(&mut self, prefix: &str) -> Result<&mut BnStats<T>> {
        self.stats
            .get_mut(prefix)
            .ok_or_else(|| Error::Invalid(format!("unknown batch-norm layer {prefix}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BnStats<T>)> {
        self.stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut BnStats<T>)> {
        self.stats.iter_mut().map(|(k, v)| (k.as_str(), v))
    }
}

struct Binder<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    bound: &'a BoundParams,
}

impl<'a, T: Scalar> Binder<'a, T> {
    fn var(&self, name: &str) -> Result<Var> {
        self.store
            .lookup(name)
            .map(|i| self.bound.get(i))
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }
}

fn bn_relu<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &Binder<'_, T>,
    bn: &mut BnStore<T>,
    prefix: &str,
    x: Var,
    train: bool,
) -> Result<Var> {
    let gamma = binder.var(&format!("{prefix}.gamma"))?;
    let beta = binder.var(&format!("{prefix}.beta"))?;
    let normed = ops::batchnorm2d(tape, x, gamma, beta, bn.get_mut(prefix)?, train)?;
    Ok(ops::relu(tape, normed))
}

/// One dense layer: BN-ReLU-Conv(1x1)-BN-ReLU-Conv(3x3), producing `growth`
/// channels at unchanged spatial size. The caller concatenates the result
/// onto its input.
fn dense_layer<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &Binder<'_, T>,
    bn: &mut BnStore<T>,
    prefix: &str,
    x: Var,
    train: bool,
) -> Result<Var> {
    let a = bn_relu(tape, binder, bn, &format!("{prefix}.bn1"), x, train)?;
    let w1 = binder.var(&format!("{prefix}.conv1"))?;
    let squeezed = ops::conv2d(tape, a, w1, 1, 0)?;
    let b = bn_relu(tape, binder, bn, &format!("{prefix}.bn2"), squeezed, train)?;
    let w2 = binder.var(&format!("{prefix}.conv2"))?;
    ops::conv2d(tape, b, w2, 1, 1)
}

/// Transition: BN-ReLU, 1x1 conv to half the channels, 2x2 average pool.
fn transition<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &Binder<'_, T>,
    bn: &mut BnStore<T>,
    prefix: &str,
    x: Var,
    train: bool,
) -> Result<Var> {
    let c = tape.val(x).shape()[1];
    if c % 2 != 0 {
        return Err(Error::Invalid(format!(
            "transition requires an even channel count, got {c}"
        )));
    }
    let a = bn_relu(tape, binder, bn, &format!("{prefix}.bn"), x, train)?;
    let w = binder.var(&format!("{prefix}.conv"))?;
    let squeezed = ops::conv2d(tape, a, w, 1, 0)?;
    ops::avg_pool2d(tape, squeezed, 2, 2)
}

/// Full network over `x: [B, 3, H, W]` (any spatial size the pooling chain
/// supports), producing unit rows `[B, N]`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    bound: &BoundParams,
    bn: &mut BnStore<T>,
    cfg: &ImageEmbedderConfig,
    x: Var,
    train: bool,
) -> Result<Var> {
    let binder = Binder { store, bound };
    let stem_w = binder.var("image.stem.conv")?;
    let stem = ops::conv2d(tape, x, stem_w, 2, 3)?;
    let stem = bn_relu(tape, &binder, bn, "image.stem.bn", stem, train)?;
    let mut h = ops::max_pool2d(tape, stem, 3, 2, 1)?;

    let n_blocks = cfg.block_config.len();
    for (b, &layers) in cfg.block_config.iter().enumerate() {
        for l in 0..layers {
            let fresh = dense_layer(tape, &binder, bn, &format!("image.block{b}.layer{l}"), h, train)?;
            h = ops::concat(tape, &[h, fresh], 1)?;
        }
        if b + 1 < n_blocks {
            h = transition(tape, &binder, bn, &format!("image.trans{b}"), h, train)?;
        }
    }

    let h = bn_relu(tape, &binder, bn, "image.final_bn", h, train)?;
    let features = ops::global_avg_pool(tape, h)?;
    let head_w = binder.var("image.head.weight")?;
    let head_b = binder.var("image.head.bias")?;
    let out = ops::linear(tape, features, head_w, Some(head_b))?;
    ops::l2_normalize(tape, out)
}

/// Embed a single eval-mode 224x224 image into a unit N-vector.
pub fn embed_image<T: Scalar>(
    img: &Tensor<T>,
    store: &ParamStore<T>,
    bn: &mut BnStore<T>,
    cfg: &ImageEmbedderConfig,
) -> Result<Tensor<T>> {
    if img.shape() != [3, CROP, CROP] {
        return Err(Error::Shape(format!(
            "embed_image expects [3, {CROP}, {CROP}], got {:?}",
            img.shape()
        )));
    }
    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let x = tape.constant(img.clone().reshaped(&[1, 3, CROP, CROP])?);
    let emb = forward(&mut tape, store, &bound, bn, cfg, x, false)?;
    Ok(tape.val(emb).clone().reshaped(&[cfg.n])?)
}

/// Uniform-random 224x224 crop plus horizontal flip with probability 0.5.
pub fn augment_train<T: Scalar>(img: &Tensor<T>, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let (h, w) = check_raster(img)?;
    let dy = rng.gen_range(0..=h - CROP);
    let dx = rng.gen_range(0..=w - CROP);
    let flip = rng.gen_bool(0.5);
    Ok(crop(img, dy, dx, flip))
}

/// Deterministic center 224x224 crop, no flip.
pub fn preprocess_eval<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = check_raster(img)?;
    Ok(crop(img, (h - CROP) / 2, (w - CROP) / 2, false))
}

fn check_raster<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 || s[1] < CROP || s[2] < CROP {
        return Err(Error::Shape(format!(
            "expected [3, >= {CROP}, >= {CROP}] raster, got {s:?}"
        )));
    }
    Ok((s[1], s[2]))
}

fn crop<T: Scalar>(img: &Tensor<T>, dy: usize, dx: usize, flip: bool) -> Tensor<T> {
    let mut out = Tensor::zeros(&[3, CROP, CROP]);
    for c in 0..3 {
        for y in 0..CROP {
            for x in 0..CROP {
                let sx = if flip { dx + CROP - 1 - x } else { dx + x };
                let idx = out.idx3(c, y, x);
                out.data_mut()[idx] = img.at3(c, dy + y, sx);
            }
        }
    }
    out
}
