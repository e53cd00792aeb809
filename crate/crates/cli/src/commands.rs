//! Subcommand bodies. Each takes the effective `RunConfig` plus its own
//! arguments and returns an error instead of exiting.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rimatte::compositing::{composite_over, init_state, MattingState, ObservedImage};
use rimatte::datagen::{export_dataset, load_dataset, ManifestEntry, MattingSample};
use rimatte::imageio;
use rimatte::pipeline::{benchmark, infer_tiled, receptive_field_probe, BenchmarkReport, ProbeReport, TilePlan};
use rimatte::rim::{run_inference, RimWeights};
use rimatte::training::{
    load_checkpoint, save_checkpoint, save_model, train, LossReport, ModelInfo, TrainLog, TrainState,
};

use crate::config::RunConfig;

/// Exit code for an evaluation with nothing to evaluate.
pub const EXIT_NO_DATA: i32 = 3;

#[derive(Debug)]
pub struct NoData;

impl std::fmt::Display for NoData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("dataset contains no usable samples")
    }
}

impl std::error::Error for NoData {}

pub fn cmd_datagen(cfg: &RunConfig, out: &Path, count: usize) -> Result<Vec<ManifestEntry>> {
    let t = Instant::now();
    let entries = export_dataset(out, &cfg.augment, count)?;
    log::info!(
        "wrote {} samples to {} in {:.1}s",
        entries.len(),
        out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(entries)
}

/// `rim.rimw` -> `rim.final.rimw`: weights only, tagged with the step and
/// training-set size.
pub fn final_checkpoint_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "rimw".into());
    path.with_file_name(format!("{stem}.final.{ext}"))
}

fn load_samples(dir: &Path) -> Result<(Vec<MattingSample>, Vec<(String, String)>)> {
    if !dir.join(rimatte::datagen::MANIFEST_NAME).exists() {
        bail!("no dataset manifest in {}", dir.display());
    }
    let (samples, failed) = load_dataset(dir)?;
    let failed: Vec<(String, String)> = failed.into_iter().map(|(id, e)| (id, e.to_string())).collect();
    for (id, e) in &failed {
        log::warn!("sample {id} not loaded: {e}");
    }
    Ok((samples, failed))
}

/// Train, resuming from `checkpoint` when it exists unless `fresh`.
pub fn cmd_train(cfg: &RunConfig, fresh: bool) -> Result<Vec<LossReport>> {
    let dataset = cfg.paths.dataset.as_deref().ok_or_else(|| anyhow!("paths.dataset is not set"))?;
    let checkpoint = cfg.paths.checkpoint.as_deref().ok_or_else(|| anyhow!("paths.checkpoint is not set"))?;
    let (samples, _) = load_samples(dataset)?;
    if samples.is_empty() {
        bail!("dataset {} has no loadable samples", dataset.display());
    }
    let resume = !fresh && checkpoint.exists();
    let mut state = if resume {
        let s = load_checkpoint(checkpoint)?;
        log::info!("resuming from {} at step {}", checkpoint.display(), s.step);
        s
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed());
        TrainState::new(RimWeights::random(&mut rng))
    };
    if let Some(dir) = checkpoint.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    log::info!("training on {} samples from {}", samples.len(), dataset.display());
    let reports = match &cfg.paths.log {
        Some(path) => {
            let appending = resume && path.exists();
            let file = OpenOptions::new()
                .create(true)
                .append(appending)
                .write(true)
                .truncate(!appending)
                .open(path)
                .with_context(|| format!("opening {}", path.display()))?;
            let mut log = if appending {
                TrainLog::append(file)
            } else {
                TrainLog::new(file, cfg.train.iteration.iterations)?
            };
            train(&mut state, &samples, &cfg.train, Some(&mut log), Some(checkpoint))?
        }
        None => train::<std::io::Sink>(&mut state, &samples, &cfg.train, None, Some(checkpoint))?,
    };
    save_checkpoint(checkpoint, &state)?;
    let fin = final_checkpoint_path(checkpoint);
    let info = ModelInfo {
        step: state.step,
        samples: samples.len() as u64,
    };
    save_model(&fin, &state.weights, info)?;
    log::info!("finished at step {}; final checkpoint {}", state.step, fin.display());
    Ok(reports)
}

/// Weights from a training or inference checkpoint.
pub fn load_weights(path: &Path) -> Result<RimWeights> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(RimWeights::load(path)?)
}

pub struct InferInputs {
    pub image: PathBuf,
    pub alpha: PathBuf,
    pub trimap: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub background: Option<PathBuf>,
    pub out: PathBuf,
}

/// Library-level run with the CLI's semantics.
pub fn infer_state(
    cfg: &RunConfig,
    image: &ObservedImage,
    x0: &MattingState,
    weights: &RimWeights,
) -> Result<MattingState> {
    let plan = TilePlan::new(image.height(), image.width(), &cfg.tile)?;
    if plan.tiles.len() == 1 {
        Ok(run_inference(image, x0, weights, &cfg.iteration, None)?.last().clone())
    } else {
        Ok(infer_tiled(image, x0, weights, &cfg.iteration, &plan)?)
    }
}

pub const OUTPUT_FILES: [&str; 4] = ["foreground.png", "background.png", "alpha.png", "composite.png"];

/// Writes `foreground.png`, `background.png`, `alpha.png` and, with a
/// background, `composite.png`. Nothing is written unless everything
/// succeeds up to the writes.
pub fn cmd_infer(cfg: &RunConfig, args: &InferInputs) -> Result<Vec<PathBuf>> {
    let image = imageio::read_rgb(&args.image)?;
    let alpha = imageio::read_gray(&args.alpha)?;
    let (h, w) = (image.dims()[2], image.dims()[3]);
    if alpha.dims()[2..] != [h, w] {
        bail!(
            "resolution mismatch: image is {w}x{h}, alpha is {}x{}",
            alpha.dims()[3],
            alpha.dims()[2]
        );
    }
    let trimap = args.trimap.as_deref().map(imageio::read_trimap).transpose()?;
    let background = args.background.as_deref().map(imageio::read_rgb).transpose()?;
    if let Some(b) = &background {
        if b.dims()[2..] != [h, w] {
            bail!("resolution mismatch: background is {}x{}, image {w}x{h}", b.dims()[3], b.dims()[2]);
        }
    }
    let weights = load_weights(&args.checkpoint)?;
    let image = ObservedImage::new(image)?;
    let x0 = init_state(&image, trimap.as_ref(), &alpha)?;
    let state = infer_state(cfg, &image, &x0, &weights)?;
    let composite = background.as_ref().map(|b| composite_over(&state, b)).transpose()?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut written = Vec::new();
    let result = (|| -> Result<()> {
        let mut put = |name: &str, f: &dyn Fn(&Path) -> rimatte::Result<()>| -> Result<()> {
            let p = args.out.join(name);
            f(&p)?;
            written.push(p);
            Ok(())
        };
        put(OUTPUT_FILES[0], &|p| imageio::write_rgb16(p, &state.fg))?;
        put(OUTPUT_FILES[1], &|p| imageio::write_rgb16(p, &state.bg))?;
        put(OUTPUT_FILES[2], &|p| imageio::write_gray16(p, &state.alpha))?;
        if let Some(c) = &composite {
            put(OUTPUT_FILES[3], &|p| imageio::write_rgb16(p, c))?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        for p in &written {
            let _ = fs::remove_file(p);
        }
        return Err(e);
    }
    Ok(written)
}

pub fn cmd_probe(weights: &RimWeights, iterations: &[usize], seed: u64) -> Result<Vec<ProbeReport>> {
    iterations
        .iter()
        .map(|&t| Ok(receptive_field_probe(weights, t, seed)?))
        .collect()
}

pub fn format_probe(r: &ProbeReport) -> String {
    format!(
        "T={}: diameter {} (radius {}) from an even-aligned pixel; diameter {} (radius {}) from an odd pixel{}",
        r.iterations,
        r.aligned.diameter,
        r.aligned.radius,
        r.odd.diameter,
        r.odd.radius,
        if r.aligned.saturated || r.odd.saturated { "; probe canvas saturated" } else { "" }
    )
}

/// Benchmark a dataset; writes `benchmark.csv` and `benchmark.md` into
/// `out` when given.
pub fn cmd_eval(cfg: &RunConfig, dataset: &Path, weights: &RimWeights, out: Option<&Path>) -> Result<BenchmarkReport> {
    let (samples, failed) = load_samples(dataset)?;
    let probe = receptive_field_probe(weights, cfg.iteration.iterations, 0)?;
    let needed = probe.worst_radius();
    if cfg.tile.overlap < needed {
        log::warn!(
            "tile overlap {} is below the measured T={} receptive radius {needed}; seams may differ from full-image inference",
            cfg.tile.overlap,
            cfg.iteration.iterations
        );
    }
    log::info!("{}", format_probe(&probe));
    let report = benchmark(&samples, failed, weights, &cfg.iteration, &cfg.tile)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("benchmark.csv"), report.to_csv()).with_context(|| format!("writing {}", dir.display()))?;
        fs::write(dir.join("benchmark.md"), report.to_markdown())
            .with_context(|| format!("writing {}", dir.display()))?;
    }
    if report.rows.is_empty() {
        return Err(NoData.into());
    }
    Ok(report)
}
