//! Dataset plumbing: pair manifests, the MFCC cache, image loading, and a
//! synthetic audio/image corpus for end-to-end runs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sia_core::mfcc::{
    frame_count, MfccExtractor, MfccParams, MfccSequence, RawAudio, FRAME_CAP, SAMPLE_RATE,
};
use sia_core::tensor::Tensor;

use crate::container::Container;
use crate::wav;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => bail!("unknown split {other:?}; expected train, val, or test"),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub pair_id: String,
    pub audio_path: PathBuf,
    pub image_path: PathBuf,
    pub split: Split,
}

/// Parse and validate `manifest.csv` (columns `pair_id,audio_path,image_path,split`).
/// Relative paths resolve against the manifest's directory; every referenced
/// file must exist.
pub fn scan_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("opening manifest {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let expected = ["pair_id", "audio_path", "image_path", "split"];
    if headers.iter().collect::<Vec<_>>() != expected {
        bail!(
            "{}: header must be {}, got {:?}",
            path.display(),
            expected.join(","),
            headers
        );
    }
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record.with_context(|| format!("{} line {line}", path.display()))?;
        if record.len() != 4 {
            bail!("{} line {line}: expected 4 fields, got {}", path.display(), record.len());
        }
        let row = ManifestRow {
            pair_id: record[0].to_string(),
            audio_path: resolve(&record[1]),
            image_path: resolve(&record[2]),
            split: Split::parse(&record[3])
                .with_context(|| format!("{} line {line}", path.display()))?,
        };
        if row.pair_id.is_empty() {
            bail!("{} line {line}: empty pair_id", path.display());
        }
        for p in [&row.audio_path, &row.image_path] {
            if !p.is_file() {
                bail!("{} line {line}: missing file {}", path.display(), p.display());
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{}: manifest has no rows", path.display());
    }
    Ok(rows)
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct CacheReport {
    pub computed: usize,
    pub skipped: usize,
    /// Pair ids whose clips exceeded the frame cap.
    pub dropped: Vec<String>,
}

fn cache_path(cache_root: &Path, pair_id: &str) -> PathBuf {
    cache_root.join(format!("{pair_id}.mfcc"))
}

/// Compute MFCCs for every manifest row into `cache_root`. Existing cache
/// files are kept; clips longer than the frame cap are dropped and reported.
pub fn build_mfcc_cache(rows: &[ManifestRow], cache_root: &Path) -> Result<CacheReport> {
    fs::create_dir_all(cache_root)?;
    let params = MfccParams::default();
    let extractor = MfccExtractor::new(params)?;
    let mut report = CacheReport::default();
    for row in rows {
        let out = cache_path(cache_root, &row.pair_id);
        if out.is_file() {
            report.skipped += 1;
            continue;
        }
        let (samples, rate) = wav::read_wav(&row.audio_path)?;
        if rate != SAMPLE_RATE {
            bail!(
                "{}: sample rate {rate}, need {SAMPLE_RATE}",
                row.audio_path.display()
            );
        }
        // Length check first so over-long clips never reach the extractor.
        if frame_count(samples.len(), &params) > FRAME_CAP {
            report.dropped.push(row.pair_id.clone());
            continue;
        }
        let audio = RawAudio::from_pcm16(&samples, rate)?;
        let seq = extractor.process(&audio, &row.pair_id)?;
        let mut c = Container::new();
        c.set_meta("source_id", &row.pair_id);
        let t = seq.num_frames();
        let data: Vec<f32> = seq.frames.data().iter().map(|&x| x as f32).collect();
        c.push_tensor("mfcc", &[t, params.n_mfcc], data);
        c.write(&out)?;
        report.computed += 1;
    }
    Ok(report)
}

/// One ready-to-train pair: cached MFCC frames plus the image path.
#[derive(Debug, Clone)]
pub struct Item {
    pub pair_id: String,
    pub mfcc_path: PathBuf,
    pub image_path: PathBuf,
}

/// Items of one split whose MFCC cache entry exists (rows dropped during
/// preprocessing are excluded).
pub fn split_items(rows: &[ManifestRow], cache_root: &Path, split: Split) -> Vec<Item> {
    rows.iter()
        .filter(|r| r.split == split)
        .filter_map(|r| {
            let mfcc_path = cache_path(cache_root, &r.pair_id);
            mfcc_path.is_file().then(|| Item {
                pair_id: r.pair_id.clone(),
                mfcc_path,
                image_path: r.image_path.clone(),
            })
        })
        .collect()
}

pub fn load_mfcc(path: &Path) -> Result<MfccSequence> {
    let c = Container::read(path)?;
    let (shape, data) = c.tensor("mfcc")?;
    if shape.len() != 2 {
        bail!("{}: mfcc tensor must be rank 2, got {shape:?}", path.display());
    }
    let frames = Tensor::new(shape, data.iter().map(|&x| x as f64).collect())?;
    Ok(MfccSequence {
        frames,
        source_id: c.meta("source_id")?.to_string(),
    })
}

/// Decode a PNG/image file into `[3, H, W]` with values in [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .with_context(|| format!("decoding {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = pixel.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Number of pairs per class in the synthetic corpus.
pub const SYNTH_PAIRS_PER_CLASS: usize = 25;
pub const SYNTH_CLASSES: usize = 16;
const SYNTH_IMAGE_SIDE: usize = 256;

/// Generate the 16-class synthetic corpus under `root`: `audio/*.wav`,
/// `images/*.png`, and `manifest.csv`. Per class, 20 pairs go to train and
/// the remaining 5 alternate 3/2 then 2/3 between val and test, giving a
/// 320/40/40 split.
pub fn generate_synthetic(root: &Path, seed: u64) -> Result<PathBuf> {
    let audio_dir = root.join("audio");
    let image_dir = root.join("images");
    fs::create_dir_all(&audio_dir)?;
    fs::create_dir_all(&image_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x53_594e_5448);
    let mut manifest = String::from("pair_id,audio_path,image_path,split\n");
    for class in 0..SYNTH_CLASSES {
        for sample in 0..SYNTH_PAIRS_PER_CLASS {
            let pair_id = format!("c{class:02}s{sample:02}");
            let split = match sample {
                0..=19 => "train",
                s => {
                    let val_count = if class % 2 == 0 { 3 } else { 2 };
                    if s - 20 < val_count {
                        "val"
                    } else {
                        "test"
                    }
                }
            };
            let wav_rel = format!("audio/{pair_id}.wav");
            let png_rel = format!("images/{pair_id}.png");
            let samples = synth_audio(class, &mut rng);
            wav::write_wav(&audio_dir.join(format!("{pair_id}.wav")), &samples, SAMPLE_RATE)?;
            let pixels = synth_image(class, &mut rng);
            save_png(&image_dir.join(format!("{pair_id}.png")), &pixels)?;
            manifest.push_str(&format!("{pair_id},{wav_rel},{png_rel},{split}\n"));
        }
    }
    let manifest_path = root.join("manifest.csv");
    fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// Class-specific harmonic stack with a rhythmic amplitude envelope plus
/// noise at roughly 20 dB SNR. Duration is jittered within [0.5, 2] s.
fn synth_audio(class: usize, rng: &mut impl Rng) -> Vec<i16> {
    let dur = rng.gen_range(0.5..=2.0);
    let n = (dur * SAMPLE_RATE as f64) as usize;
    // Fundamentals geometrically spaced over [200, 3000] Hz.
    let f0 = 200.0 * (3000.0f64 / 200.0).powf(class as f64 / (SYNTH_CLASSES - 1) as f64);
    let rhythm_hz = 2.0 + (class % 5) as f64;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / SAMPLE_RATE as f64;
        let mut s = 0.0;
        for k in 1..=4usize {
            // Skip harmonics selected by the class bit pattern.
            if class >> (k - 1) & 1 == 1 && k > 1 {
                continue;
            }
            s += (std::f64::consts::TAU * f0 * k as f64 * t + phase * k as f64).sin() / k as f64;
        }
        let envelope = 0.6 + 0.4 * (std::f64::consts::TAU * rhythm_hz * t).sin();
        let noise = rng.gen_range(-1.0..1.0) * 0.05;
        out.push(((s * envelope * 0.3 + noise * 0.3) * i16::MAX as f64 * 0.9) as i16);
    }
    out
}

/// RGB8 raster: a colored shape (by class) on a dark background with
/// jittered position and scale.
fn synth_image(class: usize, rng: &mut impl Rng) -> Vec<u8> {
    let side = SYNTH_IMAGE_SIDE;
    let (r, g, b) = hue_to_rgb(class as f64 / SYNTH_CLASSES as f64);
    let cx = side as f64 / 2.0 + rng.gen_range(-20.0..20.0);
    let cy = side as f64 / 2.0 + rng.gen_range(-20.0..20.0);
    let radius = rng.gen_range(50.0..80.0);
    let mut pixels = vec![0u8; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let inside = match class % 4 {
                0 => dx * dx + dy * dy <= radius * radius,
                1 => dx.abs() <= radius && dy.abs() <= radius,
                2 => dy >= -radius && dx.abs() <= (radius - dy) * 0.5,
                _ => dx.abs() <= radius * 0.3 || dy.abs() <= radius * 0.3,
            };
            let base = (y * side + x) * 3;
            if inside && dx.abs() <= radius && dy.abs() <= radius {
                pixels[base] = r;
                pixels[base + 1] = g;
                pixels[base + 2] = b;
            } else {
                let bg = 20 + ((x + y) % 17) as u8;
                pixels[base] = bg;
                pixels[base + 1] = bg;
                pixels[base + 2] = bg;
            }
        }
    }
    pixels
}

fn hue_to_rgb(h: f64) -> (u8, u8, u8) {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        let v = 1.0 - k.min(4.0 - k).clamp(0.0, 1.0);
        (55.0 + 200.0 * v) as u8
    };
    (f(5.0), f(3.0), f(1.0))
}

fn save_png(path: &Path, rgb: &[u8]) -> Result<()> {
    let side = SYNTH_IMAGE_SIDE as u32;
    let img: image::RgbImage = image::ImageBuffer::from_vec(side, side, rgb.to_vec())
        .context("raster size mismatch")?;
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
