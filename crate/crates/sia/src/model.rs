//! Paired audio/image model: one parameter store, batch-norm statistics,
//! and checkpoint save/load.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sia_core::audio::{self, AudioEmbedderConfig, AudioVars};
use sia_core::image::{self, BnStore, ImageEmbedderConfig};
use sia_core::mfcc::MfccSequence;
use sia_core::optim::AdamState;
use sia_core::tape::{BoundParams, ParamStore};
use sia_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::container::{fingerprint, Container};

pub struct Model {
    pub audio_cfg: AudioEmbedderConfig,
    pub image_cfg: ImageEmbedderConfig,
    pub store: ParamStore<f32>,
    pub bn: BnStore<f32>,
    pub fingerprint: String,
}

/// Training state carried across a save/load boundary.
pub struct CheckpointMeta {
    /// Next epoch to run (epochs completed so far).
    pub epoch: usize,
    pub seed: u64,
    /// Current peak learning rate (rescaled by warm restarts).
    pub eta_max: f64,
    /// Epoch at which the current schedule started (reset by warm restarts).
    pub origin: usize,
}

impl Model {
    /// Fresh model with seeded initialization. Audio parameters are drawn
    /// first, then image parameters, from one stream.
    pub fn init(run: &RunConfig, seed: u64) -> Result<Model> {
        let audio_cfg = run.audio_config();
        let image_cfg = run.image_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5349_4131);
        audio::init_params(&audio_cfg, &mut store, &mut rng)?;
        image::init_params(&image_cfg, &mut store, &mut rng)?;
        Ok(Model {
            bn: BnStore::for_config(&image_cfg),
            audio_cfg,
            image_cfg,
            store,
            fingerprint: fingerprint(&run.fingerprint_input()),
        })
    }

    pub fn bind_audio(&self, bound: &BoundParams) -> Result<AudioVars> {
        Ok(audio::bind_params(&self.store, bound, &self.audio_cfg)?)
    }

    /// Evaluation-mode embedding of one MFCC sequence into a unit N-vector.
    pub fn embed_audio(&self, seq: &MfccSequence) -> Result<Tensor<f32>> {
        Ok(audio::embed_audio(seq, &self.store, &self.audio_cfg)?)
    }

    /// Evaluation-mode embedding of one center-cropped image `[3, 224, 224]`.
    pub fn embed_image(&mut self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(image::embed_image(img, &self.store, &mut self.bn, &self.image_cfg)?)
    }

    pub fn save_checkpoint(
        &self,
        path: &Path,
        opt: &AdamState<f32>,
        meta: &CheckpointMeta,
    ) -> Result<()> {
        let mut c = Container::new();
        c.set_meta("fingerprint", &self.fingerprint);
        c.set_meta("epoch", meta.epoch);
        c.set_meta("seed", meta.seed);
        c.set_meta("eta_max", format!("{:e}", meta.eta_max));
        c.set_meta("origin", meta.origin);
        c.set_meta("opt_step", opt.step);
        for (name, value) in self.store.iter() {
            c.push_tensor(&format!("param/{name}"), value.shape(), value.data().to_vec());
        }
        for (prefix, stats) in self.bn.iter() {
            c.push_tensor(
                &format!("bn/{prefix}.mean"),
                stats.mean.shape(),
                stats.mean.data().to_vec(),
            );
            c.push_tensor(
                &format!("bn/{prefix}.var"),
                stats.var.shape(),
                stats.var.data().to_vec(),
            );
        }
        for i in 0..self.store.len() {
            let name = self.store.name(i);
            c.push_tensor(&format!("opt/m/{name}"), opt.m[i].shape(), opt.m[i].data().to_vec());
            c.push_tensor(&format!("opt/v/{name}"), opt.v[i].shape(), opt.v[i].data().to_vec());
        }
        c.write(path)
    }

    /// Load a checkpoint written for the same configuration.
    pub fn load_checkpoint(
        path: &Path,
        run: &RunConfig,
    ) -> Result<(Model, AdamState<f32>, CheckpointMeta)> {
        let c = Container::read(path)?;
        let want = fingerprint(&run.fingerprint_input());
        let got = c.meta("fingerprint")?;
        if got != want {
            bail!(
                "{}: checkpoint fingerprint {got} does not match configuration {want}",
                path.display()
            );
        }
        let meta = CheckpointMeta {
            epoch: c.meta("epoch")?.parse().context("epoch meta")?,
            seed: c.meta("seed")?.parse().context("seed meta")?,
            eta_max: c.meta("eta_max")?.parse().context("eta_max meta")?,
            origin: c.meta("origin")?.parse().context("origin meta")?,
        };
        let mut model = Model::init(run, meta.seed)?;
        let mut opt = AdamState::for_store(&model.store);
        opt.step = c.meta("opt_step")?.parse().context("opt_step meta")?;
        for i in 0..model.store.len() {
            let name = model.store.name(i).to_string();
            *model.store.value_mut(i) = read_tensor(&c, &format!("param/{name}"))?;
            opt.m[i] = read_tensor(&c, &format!("opt/m/{name}"))?;
            opt.v[i] = read_tensor(&c, &format!("opt/v/{name}"))?;
        }
        for (prefix, stats) in model.bn.iter_mut() {
            stats.mean = read_tensor(&c, &format!("bn/{prefix}.mean"))?;
            stats.var = read_tensor(&c, &format!("bn/{prefix}.var"))?;
        }
        Ok((model, opt, meta))
    }
}

fn read_tensor(c: &Container, name: &str) -> Result<Tensor<f32>> {
    let (shape, data) = c.tensor(name)?;
    Ok(Tensor::new(shape, data.to_vec())?)
}
