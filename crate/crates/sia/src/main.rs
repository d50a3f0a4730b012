//! Command-line interface: preprocess, train, eval, query, plot-data.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sia::config::RunConfig;
use sia::dataset::{self, Split};
use sia::evalrun;
use sia::model::Model;
use sia::train::{self, TrainOptions};
use sia::wav;

use sia_core::mfcc::{MfccExtractor, MfccParams, RawAudio, SAMPLE_RATE};
use sia_core::recall;

#[derive(Parser)]
#[command(name = "sia", about = "Speech-image alignment trainer and retriever")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset (DG2A1024, DG3A1024, DG4A1024, DG2A2048, DG4A2048, tiny).
    #[arg(long, default_value = "tiny")]
    preset: String,
    /// Working directory for data, checkpoints, and logs under a preset.
    #[arg(long, default_value = "run")]
    root: PathBuf,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of epochs to run.
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::preset(&self.preset, &self.root)?,
        };
        if let Some(seed) = self.seed {
            run.optim.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            run.optim.epochs = epochs;
        }
        run.validate()?;
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the MFCC cache (and optionally the synthetic corpus).
    Preprocess {
        #[command(flatten)]
        config: ConfigArgs,
        /// Generate the 16-class synthetic corpus first if the manifest is missing.
        #[arg(long)]
        synth: bool,
    },
    /// Train the model, checkpointing every epoch.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Warm restart: scale the peak learning rate and reset optimizer
        /// moments (requires --resume).
        #[arg(long)]
        lr_scale: Option<f64>,
    },
    /// Recall@{1,5,10} on a held-out split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to evaluate; defaults to the latest in the checkpoint dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the scores as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve the top-K gallery images for one spoken query.
    Query {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Query WAV (PCM-16 mono, 16 kHz).
        #[arg(long)]
        audio: PathBuf,
        /// Gallery split.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(short, default_value_t = 5)]
        k: usize,
    },
    /// Reshape a training log into long-form plot data.
    PlotData {
        /// Training log CSV (epoch,loss,lr,r_at_10_s2i,r_at_10_i2s).
        #[arg(long)]
        log: PathBuf,
        /// Output CSV (epoch,series,value).
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_checkpoint(run: &RunConfig, explicit: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(path) = explicit {
        return Ok(path);
    }
    train::latest_checkpoint(&run.out.checkpoint_dir)?.with_context(|| {
        format!(
            "no checkpoints under {}; train first or pass --checkpoint",
            run.out.checkpoint_dir.display()
        )
    })
}

fn cmd_preprocess(config: ConfigArgs, synth: bool) -> Result<()> {
    let run = config.load()?;
    if synth && !run.data.manifest.is_file() {
        let root = run
            .data
            .manifest
            .parent()
            .context("manifest path has no parent")?;
        dataset::generate_synthetic(root, run.optim.seed)?;
        println!("generated synthetic corpus under {}", root.display());
    }
    let rows = dataset::scan_manifest(&run.data.manifest)?;
    let report = dataset::build_mfcc_cache(&rows, &run.data.cache_root)?;
    for id in &report.dropped {
        println!("dropped {id}: clip exceeds the 8192-frame cap");
    }
    println!(
        "cache ready: {} computed, {} already present, {} dropped",
        report.computed,
        report.skipped,
        report.dropped.len()
    );
    Ok(())
}

fn cmd_eval(
    config: ConfigArgs,
    checkpoint: Option<PathBuf>,
    split: &str,
    out: Option<PathBuf>,
) -> Result<()> {
    let run = config.load()?;
    let checkpoint = resolve_checkpoint(&run, checkpoint)?;
    let report = evalrun::evaluate(&run, &checkpoint, Split::parse(split)?)?;
    print!("{}", evalrun::format_table(&report));
    if let Some(path) = out {
        evalrun::write_csv(&report, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_query(
    config: ConfigArgs,
    checkpoint: Option<PathBuf>,
    audio: PathBuf,
    split: &str,
    k: usize,
) -> Result<()> {
    let run = config.load()?;
    let checkpoint = resolve_checkpoint(&run, checkpoint)?;
    let rows = dataset::scan_manifest(&run.data.manifest)?;
    let items = dataset::split_items(&rows, &run.data.cache_root, Split::parse(split)?);
    if items.is_empty() {
        bail!("gallery split {split} is empty; run preprocess first");
    }
    let k = if k > items.len() {
        eprintln!("warning: k={k} exceeds gallery size {}; clamping", items.len());
        items.len()
    } else {
        k
    };
    let (mut model, _, _) = Model::load_checkpoint(&checkpoint, &run)?;

    let (samples, rate) = wav::read_wav(&audio)?;
    if rate != SAMPLE_RATE {
        bail!("{}: sample rate {rate}, need {SAMPLE_RATE}", audio.display());
    }
    let raw = RawAudio::from_pcm16(&samples, rate)?;
    let extractor = MfccExtractor::new(MfccParams::default())?;
    let seq = extractor.process(&raw, &audio.display().to_string())?;
    let probe = model.embed_audio(&seq)?;

    let n = model.audio_cfg.n;
    let mut gallery = sia_core::tensor::Tensor::zeros(&[items.len(), n]);
    for (qi, item) in items.iter().enumerate() {
        let img = dataset::load_image(&item.image_path)?;
        let emb = model.embed_image(&sia_core::image::preprocess_eval(&img)?)?;
        gallery.data_mut()[qi * n..(qi + 1) * n].copy_from_slice(emb.data());
    }
    let top = recall::query(probe.data(), &gallery, k)?;
    for (rank, idx) in top.iter().enumerate() {
        println!("{} {}", rank + 1, items[*idx].image_path.display());
    }
    Ok(())
}

fn cmd_plot_data(log: PathBuf, out: PathBuf) -> Result<()> {
    let text = std::fs::read_to_string(&log)
        .with_context(|| format!("reading {}", log.display()))?;
    let mut lines = text.lines().enumerate();
    let header = "epoch,loss,lr,r_at_10_s2i,r_at_10_i2s";
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => bail!("{} line 1: expected header {header}", log.display()),
    }
    let mut rows = String::from("epoch,series,value\n");
    for (i, line) in lines {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            bail!("{} line {lineno}: expected 5 fields, got {}", log.display(), fields.len());
        }
        let epoch: usize = fields[0]
            .parse()
            .with_context(|| format!("{} line {lineno}: bad epoch", log.display()))?;
        for (series, field) in ["loss", "lr", "r_at_10_s2i", "r_at_10_i2s"].iter().zip(&fields[1..])
        {
            let value: f64 = field
                .parse()
                .with_context(|| format!("{} line {lineno}: bad {series}", log.display()))?;
            rows.push_str(&format!("{epoch},{series},{value}\n"));
        }
    }
    std::fs::write(&out, rows)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Preprocess { config, synth } => cmd_preprocess(config, synth),
        Command::Train {
            config,
            resume,
            lr_scale,
        } => {
            let run = config.load()?;
            let stats = train::train(&run, &TrainOptions { resume, lr_scale })?;
            if stats.is_empty() {
                println!("configuration valid; no epochs requested");
            }
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
        } => cmd_eval(config, checkpoint, &split, out),
        Command::Query {
            config,
            checkpoint,
            audio,
            split,
            k,
        } => cmd_query(config, checkpoint, audio, &split, k),
        Command::PlotData { log, out } => cmd_plot_data(log, out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
