//! Training loop: seeded shuffling, padded batches, Adam with a cosine
//! learning-rate schedule, per-epoch checkpoints and metric logging.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sia_core::audio;
use sia_core::image;
use sia_core::objective::{hinge_loss, HingeConfig};
use sia_core::optim::AdamState;
use sia_core::recall::RecallReport;
use sia_core::tape::Tape;
use sia_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::dataset::{self, Item, Split};
use crate::model::{CheckpointMeta, Model};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Warm restart: scale the peak learning rate, reset optimizer moments,
    /// and start a fresh schedule. Only meaningful with `resume`.
    pub lr_scale: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub r10_s2i: f64,
    pub r10_i2s: f64,
}

/// Deterministic per-epoch stream; checkpoints only need (seed, epoch) to
/// reproduce the shuffle and augmentation of any epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64),
    )
}

/// Pad a batch of MFCC sequences and crop its images; returns
/// (`[B, T, 40]` audio, `[B, T]` mask, `[B, 3, 224, 224]` images).
fn load_batch(
    items: &[&Item],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let b = items.len();
    let mut seqs = Vec::with_capacity(b);
    let mut imgs = Vec::with_capacity(b);
    let mut train_rng = rng;
    for item in items {
        let seq = dataset::load_mfcc(&item.mfcc_path)?;
        let raw = dataset::load_image(&item.image_path)?;
        let img = match train_rng.as_deref_mut() {
            Some(r) => image::augment_train(&raw, r)?,
            None => image::preprocess_eval(&raw)?,
        };
        seqs.push(seq);
        imgs.push(img);
    }
    let n_mfcc = seqs[0].frames.shape()[1];
    let t_max = seqs.iter().map(|s| s.num_frames()).max().unwrap_or(0);
    let mut x = Tensor::zeros(&[b, t_max, n_mfcc]);
    let mut mask = Tensor::zeros(&[b, t_max]);
    for (bi, seq) in seqs.iter().enumerate() {
        let t = seq.num_frames();
        for ti in 0..t {
            let midx = mask.idx2(bi, ti);
            mask.data_mut()[midx] = 1.0;
            for f in 0..n_mfcc {
                let idx = (bi * t_max + ti) * n_mfcc + f;
                x.data_mut()[idx] = seq.frames.at2(ti, f) as f32;
            }
        }
    }
    let side = image::CROP;
    let per = 3 * side * side;
    let mut pix = Tensor::zeros(&[b, 3, side, side]);
    for (bi, img) in imgs.iter().enumerate() {
        pix.data_mut()[bi * per..(bi + 1) * per].copy_from_slice(img.data());
    }
    Ok((x, mask, pix))
}

/// One optimization step over a batch; returns the loss value.
fn train_step(
    model: &mut Model,
    opt: &mut AdamState<f32>,
    items: &[&Item],
    rng: &mut ChaCha8Rng,
    beta: f64,
    lr: f64,
) -> Result<f64> {
    let (x, mask, pix) = load_batch(items, Some(rng))?;
    let mut tape = Tape::new();
    let bound = tape.bind(&model.store);
    let audio_vars = model.bind_audio(&bound)?;
    let xa = tape.constant(x);
    let xi = tape.constant(pix);
    let a_emb = audio::forward(&mut tape, &audio_vars, &model.audio_cfg, xa, &mask)?;
    let i_emb = image::forward(
        &mut tape,
        &model.store,
        &bound,
        &mut model.bn,
        &model.image_cfg,
        xi,
        true,
    )?;
    let cfg = HingeConfig { beta: beta as f32 };
    let loss = hinge_loss(&mut tape, a_emb, i_emb, &cfg)?;
    let value = tape.val(loss).item() as f64;
    if !value.is_finite() {
        return Ok(value); // caller names the batch in its error
    }
    model.store.zero_grads();
    tape.backward(loss, &mut model.store)?;
    opt.step(&mut model.store, lr as f32)?;
    Ok(value)
}

/// Evaluation-mode embeddings for a set of items: `([Q, N] audio, [Q, N] image)`.
pub fn embed_items(model: &mut Model, items: &[Item]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let q = items.len();
    let n = model.audio_cfg.n;
    let mut a = Tensor::zeros(&[q, n]);
    let mut i = Tensor::zeros(&[q, n]);
    for (qi, item) in items.iter().enumerate() {
        let seq = dataset::load_mfcc(&item.mfcc_path)?;
        let ae = model.embed_audio(&seq)?;
        let raw = dataset::load_image(&item.image_path)?;
        let ie = model.embed_image(&image::preprocess_eval(&raw)?)?;
        a.data_mut()[qi * n..(qi + 1) * n].copy_from_slice(ae.data());
        i.data_mut()[qi * n..(qi + 1) * n].copy_from_slice(ie.data());
    }
    Ok((a, i))
}

/// Run `run.optim.epochs` training epochs (resuming if requested), writing a
/// checkpoint and a metric-log row after each epoch.
pub fn train(run: &RunConfig, opts: &TrainOptions) -> Result<Vec<EpochStats>> {
    run.validate()?;
    if opts.lr_scale.is_some() && opts.resume.is_none() {
        bail!("--lr-scale requires --resume");
    }
    let rows = dataset::scan_manifest(&run.data.manifest)?;
    let report = dataset::build_mfcc_cache(&rows, &run.data.cache_root)?;
    for id in &report.dropped {
        eprintln!("dropped {id}: clip exceeds the 8192-frame cap");
    }
    let train_items = dataset::split_items(&rows, &run.data.cache_root, Split::Train);
    let val_items = dataset::split_items(&rows, &run.data.cache_root, Split::Val);
    if train_items.len() < 2 {
        bail!("need at least 2 training pairs, got {}", train_items.len());
    }

    let (mut model, mut opt, mut meta) = match &opts.resume {
        Some(path) => {
            let (model, opt, meta) = Model::load_checkpoint(path, run)?;
            (model, opt, meta)
        }
        None => {
            let model = Model::init(run, run.optim.seed)?;
            let opt = AdamState::for_store(&model.store);
            let meta = CheckpointMeta {
                epoch: 0,
                seed: run.optim.seed,
                eta_max: run.optim.eta_max,
                origin: 0,
            };
            (model, opt, meta)
        }
    };
    if let Some(scale) = opts.lr_scale {
        if !(scale > 0.0) {
            bail!("--lr-scale must be positive, got {scale}");
        }
        meta.eta_max *= scale;
        meta.origin = meta.epoch;
        opt.reset();
    }
    let mut sched_run = run.clone();
    sched_run.optim.eta_max = meta.eta_max;
    let schedule = sched_run.schedule()?;

    if run.optim.epochs == 0 {
        // Everything above validated; leave checkpoints and logs untouched.
        return Ok(Vec::new());
    }
    fs::create_dir_all(&run.out.checkpoint_dir)?;
    // Fresh runs start a new log; resumed runs append to the existing one.
    let fresh_log = opts.resume.is_none() || !run.out.log_path.is_file();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .write(true)
        .open(&run.out.log_path)
        .with_context(|| format!("opening log {}", run.out.log_path.display()))?;
    if fresh_log {
        writeln!(log, "epoch,loss,lr,r_at_10_s2i,r_at_10_i2s")?;
    }

    let batch = run.optim.batch_size;
    let mut stats = Vec::new();
    for epoch in meta.epoch..meta.epoch + run.optim.epochs {
        let mut rng = epoch_rng(meta.seed, epoch);
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut rng);
        // The contrastive loss needs >= 2 pairs; drop a short tail batch.
        let steps: Vec<&[usize]> = order.chunks(batch).filter(|c| c.len() >= 2).collect();
        let num_steps = steps.len();
        let mut loss_sum = 0.0;
        let mut lr_last = 0.0;
        for (si, chunk) in steps.into_iter().enumerate() {
            let progress = (epoch - meta.origin) as f64 + si as f64 / num_steps as f64;
            let lr = schedule.lr_at(progress)?;
            let items: Vec<&Item> = chunk.iter().map(|&i| &train_items[i]).collect();
            let loss = train_step(&mut model, &mut opt, &items, &mut rng, run.optim.beta, lr)?;
            if !loss.is_finite() {
                bail!("loss became non-finite at epoch {epoch}, batch {si}; aborting");
            }
            loss_sum += loss;
            lr_last = lr;
        }
        let mean_loss = loss_sum / num_steps as f64;

        let (r10_s2i, r10_i2s) = if val_items.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (a, i) = embed_items(&mut model, &val_items)?;
            let report = RecallReport::compute(&a, &i, &[10])?;
            (report.s2i[0], report.i2s[0])
        };

        let done = epoch + 1;
        let ck = run.out.checkpoint_dir.join(format!("epoch_{done:04}.ck"));
        model.save_checkpoint(
            &ck,
            &opt,
            &CheckpointMeta {
                epoch: done,
                seed: meta.seed,
                eta_max: meta.eta_max,
                origin: meta.origin,
            },
        )?;
        writeln!(log, "{done},{mean_loss},{lr_last},{r10_s2i},{r10_i2s}")?;
        log.flush()?;
        println!(
            "epoch {done}: loss {mean_loss:.4} lr {lr_last:.3e} R@10 s2i {r10_s2i:.3} i2s {r10_i2s:.3}"
        );
        stats.push(EpochStats {
            epoch: done,
            loss: mean_loss,
            lr: lr_last,
            r10_s2i,
            r10_i2s,
        });
    }
    Ok(stats)
}

/// Latest checkpoint in a directory by epoch number, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(num) = name.strip_prefix("epoch_").and_then(|r| r.strip_suffix(".ck")) {
            if let Ok(epoch) = num.parse::<usize>() {
                if best.as_ref().map_or(true, |(b, _)| epoch > *b) {
                    best = Some((epoch, path));
                }
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
