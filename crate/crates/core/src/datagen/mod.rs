//! Synthetic ground truth: procedural foregrounds and backgrounds pushed
//! through a merge / resize / affine / trimap / crop / colour-jitter
//! augmentation pipeline.

pub mod color;
pub mod morph;
pub mod noise;
pub mod shapes;
pub mod warp;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compositing::{init_state, MattingState, ObservedImage, Space, Trimap, TrimapLabel};
use crate::error::{Error, Result};
use crate::imageio;
use crate::numerics::checkpoint::{find, read_tensors, write_tensors};
use crate::numerics::Tensor;

pub use color::{apply_hsv_shift, hsv_to_rgb, rgb_to_hsv, HsvShift};
pub use shapes::{gen_background, gen_foreground};
pub use warp::{random_affine_params, resize, warp_affine, AffineParams};

/// Alpha values within this distance of 0 or 1 count as opaque or clear.
pub const ALPHA_EPSILON: f32 = 1e-3;

/// How many times `make_sample` regenerates before giving up.
const MAX_RETRIES: u64 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Side of each generated foreground before augmentation.
    pub source_size: usize,
    pub merge_prob: f64,
    pub resize_prob: f64,
    pub resize_size: usize,
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shear_deg: f64,
    pub flip_prob: f64,
    pub dilation_min: usize,
    pub dilation_max: usize,
    pub crop_size: usize,
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    /// Blur range of the simulated initial alpha.
    pub init_blur_min: f32,
    pub init_blur_max: f32,
    /// Peak amplitude of the band-limited noise added to the initial alpha.
    pub init_noise: f32,
    /// Base seed for dataset export; sample `i` uses `seed + i`.
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            source_size: 640,
            merge_prob: 0.5,
            resize_prob: 0.25,
            resize_size: 640,
            rotation_deg: 30.0,
            scale_min: 0.8,
            scale_max: 1.25,
            shear_deg: 10.0,
            flip_prob: 0.5,
            dilation_min: 1,
            dilation_max: 29,
            crop_size: 512,
            hue: 0.1,
            saturation: 0.2,
            value: 0.2,
            init_blur_min: 0.5,
            init_blur_max: 2.0,
            init_noise: 0.15,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// The default pipeline shrunk for small crops: sources 5/4 of the
    /// crop and dilation radii scaled to the crop.
    pub fn desk(crop_size: usize) -> Self {
        let source = (crop_size * 5 / 4).max(shapes::MIN_FOREGROUND_SIZE);
        let scale = crop_size as f64 / 512.0;
        AugmentConfig {
            source_size: source,
            resize_size: source,
            crop_size,
            dilation_min: 1,
            dilation_max: ((29.0 * scale).round() as usize).max(2),
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.merge_prob, self.resize_prob, self.flip_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Parameter("probabilities must lie in [0, 1]".into()));
        }
        if self.scale_min <= 0.0 || self.scale_min > self.scale_max {
            return Err(Error::Parameter("scale range must be positive and ordered".into()));
        }
        if self.dilation_min > self.dilation_max || self.init_blur_min > self.init_blur_max {
            return Err(Error::Parameter("dilation and blur ranges must be ordered".into()));
        }
        if self.crop_size < 2 || self.crop_size % 2 != 0 {
            return Err(Error::Parameter(format!("crop size must be even, got {}", self.crop_size)));
        }
        if [self.rotation_deg, self.shear_deg, self.hue, self.saturation, self.value]
            .iter()
            .any(|v| *v < 0.0 || !v.is_finite())
        {
            return Err(Error::Parameter("jitter ranges must be non-negative".into()));
        }
        Ok(())
    }

    /// Short stable fingerprint of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// A ground-truth tuple with a simulated initial alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct MattingSample {
    pub id: String,
    pub seed: u64,
    pub image: ObservedImage,
    pub fg: Tensor,
    pub bg: Tensor,
    pub alpha: Tensor,
    pub trimap: Trimap,
    pub initial_alpha: Tensor,
}

impl MattingSample {
    pub fn target(&self) -> MattingState {
        MattingState {
            space: Space::Canonical,
            fg: self.fg.clone(),
            bg: self.bg.clone(),
            alpha: self.alpha.clone(),
        }
    }

    /// `x_0` from the trimap and the initial alpha.
    pub fn initial_state(&self) -> Result<MattingState> {
        init_state(&self.image, Some(&self.trimap), &self.initial_alpha)
    }

    /// Largest `|I - (alpha F + (1 - alpha) B)|`.
    pub fn composite_error(&self) -> f32 {
        let hw = self.alpha.len();
        let a = self.alpha.data();
        let mut worst = 0.0f32;
        for c in 0..3 {
            for p in 0..hw {
                let i = self.image.tensor().data()[c * hw + p];
                let model = a[p] * self.fg.data()[c * hw + p] + (1.0 - a[p]) * self.bg.data()[c * hw + p];
                worst = worst.max((i - model).abs());
            }
        }
        worst
    }

    /// SHA-256 over every tensor's bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let labels = self
            .trimap
            .labels()
            .iter()
            .map(|l| l.to_gray() as f32)
            .collect();
        let trimap = Tensor::from_vec(&[1, 1, self.trimap.height(), self.trimap.width()], labels).expect("sized");
        vec![
            ("image".into(), self.image.tensor().clone()),
            ("fg".into(), self.fg.clone()),
            ("bg".into(), self.bg.clone()),
            ("alpha".into(), self.alpha.clone()),
            ("trimap".into(), trimap),
            ("initial_alpha".into(), self.initial_alpha.clone()),
        ]
    }
}

/// Layer `a` over layer `b`.
pub fn merge_foregrounds(a: (&Tensor, &Tensor), b: (&Tensor, &Tensor)) -> Result<(Tensor, Tensor)> {
    let (fa, aa) = a;
    let (fb, ab) = b;
    if fa.dims() != fb.dims() || aa.dims() != ab.dims() {
        return Err(Error::Shape(format!(
            "cannot merge foregrounds of sizes {:?} and {:?}",
            fa.dims(),
            fb.dims()
        )));
    }
    let hw = aa.len();
    let mut f = Tensor::zeros(fa.dims());
    let mut alpha = Tensor::zeros(aa.dims());
    for p in 0..hw {
        let (x, y) = (aa.data()[p], ab.data()[p]);
        let new = x + (1.0 - x) * y;
        alpha.data_mut()[p] = new;
        if new > 0.0 {
            for c in 0..3 {
                let v = (x * fa.data()[c * hw + p] + (1.0 - x) * y * fb.data()[c * hw + p]) / new;
                f.data_mut()[c * hw + p] = v;
            }
        }
    }
    Ok((f, alpha))
}

/// Apply a random affine transform drawn from the config ranges.
pub fn random_affine(fg: &Tensor, alpha: &Tensor, config: &AugmentConfig, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_affine_params(
        &mut rng,
        config.rotation_deg,
        (config.scale_min, config.scale_max),
        config.shear_deg,
        config.flip_prob,
    );
    warp_affine(fg, alpha, params)
}

/// Known foreground where `alpha >= 1 - eps` survives erosion by a disk
/// of radius `r`, known background likewise for `alpha <= eps`, unknown
/// elsewhere.
pub fn gen_trimap(alpha: &Tensor, radius: usize) -> Result<Trimap> {
    let (n, c, h, w) = alpha.nchw()?;
    if n != 1 || c != 1 {
        return Err(Error::Shape(format!("alpha must be (1, 1, h, w), got {:?}", alpha.dims())));
    }
    let fg: Vec<bool> = alpha.data().iter().map(|&a| a >= 1.0 - ALPHA_EPSILON).collect();
    let bg: Vec<bool> = alpha.data().iter().map(|&a| a <= ALPHA_EPSILON).collect();
    let fg = morph::erode(&fg, h, w, radius as f64);
    let bg = morph::erode(&bg, h, w, radius as f64);
    let labels = fg
        .iter()
        .zip(&bg)
        .map(|(&f, &b)| match (f, b) {
            (true, _) => TrimapLabel::Foreground,
            (false, true) => TrimapLabel::Background,
            _ => TrimapLabel::Unknown,
        })
        .collect();
    Trimap::new(w, h, labels)
}

/// A trimap that is entirely unknown or entirely known cannot train or
/// evaluate anything.
pub fn trimap_is_degenerate(t: &Trimap) -> bool {
    let unknown = t.count(TrimapLabel::Unknown);
    unknown == 0 || unknown == t.labels().len()
}

/// HSV jitter drawn from the config ranges.
pub fn hsv_jitter(image: &Tensor, config: &AugmentConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = HsvShift::random(&mut rng, config.hue, config.saturation, config.value);
    apply_hsv_shift(image, shift)
}

fn snap_alpha(alpha: &mut Tensor) {
    for a in alpha.data_mut() {
        if *a <= ALPHA_EPSILON {
            *a = 0.0;
        } else if *a >= 1.0 - ALPHA_EPSILON {
            *a = 1.0;
        }
    }
}

/// Run the full augmentation pipeline for one seed.
pub fn make_sample(config: &AugmentConfig, seed: u64) -> Result<MattingSample> {
    config.validate()?;
    let largest = config.source_size.max(if config.resize_prob > 0.0 { config.resize_size } else { 0 });
    if largest < config.crop_size {
        return Err(Error::Generation(format!(
            "source size {} is smaller than the {} crop; sample rejected",
            config.source_size, config.crop_size
        )));
    }
    for attempt in 0..=MAX_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        if let Some(sample) = attempt_sample(config, seed, &mut rng)? {
            return Ok(sample);
        }
    }
    Err(Error::Generation(format!(
        "seed {seed}: no usable unknown region after {MAX_RETRIES} retries"
    )))
}

fn attempt_sample(config: &AugmentConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<Option<MattingSample>> {
    let (mut fg, mut alpha) = gen_foreground(rng.random(), config.source_size);
    if rng.random_bool(config.merge_prob) {
        let (f2, a2) = gen_foreground(rng.random(), config.source_size);
        (fg, alpha) = merge_foregrounds((&fg, &alpha), (&f2, &a2))?;
    }
    if rng.random_bool(config.resize_prob) {
        fg = resize(&fg, config.resize_size, config.resize_size);
        alpha = resize(&alpha, config.resize_size, config.resize_size);
    }
    let size = fg.dims()[2];
    if size < config.crop_size {
        return Err(Error::Generation(format!(
            "augmented source {size}px is smaller than the {} crop; sample rejected",
            config.crop_size
        )));
    }
    (fg, alpha) = random_affine(&fg, &alpha, config, rng.random());
    snap_alpha(&mut alpha);
    let radius = rng.random_range(config.dilation_min..=config.dilation_max);
    let trimap = gen_trimap(&alpha, radius)?;
    if trimap_is_degenerate(&trimap) {
        return Ok(None);
    }

    let unknown: Vec<usize> = (0..trimap.labels().len())
        .filter(|&p| trimap.labels()[p] == TrimapLabel::Unknown)
        .collect();
    let centre = unknown[rng.random_range(0..unknown.len())];
    let crop = config.crop_size;
    let top = (centre / size).saturating_sub(crop / 2).min(size - crop);
    let left = (centre % size).saturating_sub(crop / 2).min(size - crop);
    let fg = crate::rim::crop_window(&fg, top, left, crop, crop);
    let alpha = crate::rim::crop_window(&alpha, top, left, crop, crop);
    let labels = (0..crop * crop)
        .map(|p| trimap.get(top + p / crop, left + p % crop))
        .collect();
    let trimap = Trimap::new(crop, crop, labels)?;

    let fg = hsv_jitter(&fg, config, rng.random());
    let bg = gen_background(rng, crop, crop);
    let hw = crop * crop;
    let mut image = Tensor::zeros(&[1, 3, crop, crop]);
    for c in 0..3 {
        for p in 0..hw {
            let a = alpha.data()[p];
            let v = a * fg.data()[c * hw + p] + (1.0 - a) * bg.data()[c * hw + p];
            image.data_mut()[c * hw + p] = v.clamp(0.0, 1.0);
        }
    }
    let initial_alpha = simulate_initial_alpha(&alpha, &trimap, config, rng);
    Ok(Some(MattingSample {
        id: format!("s{seed:010}"),
        seed,
        image: ObservedImage::new(image)?,
        fg,
        bg,
        alpha,
        trimap,
        initial_alpha,
    }))
}

/// Blur plus band-limited noise inside the unknown band; known pixels keep
/// their exact value.
fn simulate_initial_alpha(alpha: &Tensor, trimap: &Trimap, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (trimap.height(), trimap.width());
    let sigma = if config.init_blur_max > config.init_blur_min {
        rng.random_range(config.init_blur_min..=config.init_blur_max)
    } else {
        config.init_blur_min
    };
    let blurred = morph::gaussian_blur(alpha.data(), h, w, sigma);
    let amp = if config.init_noise > 0.0 {
        rng.random_range(0.3 * config.init_noise..=config.init_noise)
    } else {
        0.0
    };
    let noise = noise::fbm(rng, w, h, (w.max(h) as f32 / 8.0).max(2.0), 2);
    let mut out = alpha.clone();
    for (p, v) in out.data_mut().iter_mut().enumerate() {
        if trimap.labels()[p] == TrimapLabel::Unknown {
            *v = (blurred[p] + amp * (2.0 * noise[p] - 1.0)).clamp(0.0, 1.0);
        }
    }
    out
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub config_hash: String,
    /// Directory relative to the manifest.
    pub dir: String,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";
const SAMPLE_TENSORS: &str = "sample.rimw";

/// Write a sample directory: 16-bit PNGs for viewing plus an exact
/// `sample.rimw` tensor file.
pub fn write_sample(dir: &Path, sample: &MattingSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    imageio::write_rgb16(&dir.join("image.png"), sample.image.tensor())?;
    imageio::write_rgb16(&dir.join("fg.png"), &sample.fg)?;
    imageio::write_rgb16(&dir.join("bg.png"), &sample.bg)?;
    imageio::write_gray16(&dir.join("alpha.png"), &sample.alpha)?;
    imageio::write_trimap(&dir.join("trimap.png"), &sample.trimap)?;
    imageio::write_gray16(&dir.join("initial_alpha.png"), &sample.initial_alpha)?;
    let path = dir.join(SAMPLE_TENSORS);
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_tensors(BufWriter::new(f), &sample.tensors()).map_err(|e| Error::io(&path, e))
}

/// Load a sample directory, preferring the exact tensor file and falling
/// back to the PNGs.
pub fn read_sample(dir: &Path, id: &str, seed: u64) -> Result<MattingSample> {
    let exact = dir.join(SAMPLE_TENSORS);
    if exact.exists() {
        let f = File::open(&exact).map_err(|e| Error::io(&exact, e))?;
        let tensors = read_tensors(BufReader::new(f))?;
        let get = |n: &str| find(&tensors, n).cloned();
        let tm = get("trimap")?;
        let (h, w) = (tm.dims()[2], tm.dims()[3]);
        let labels = tm.data().iter().map(|&v| TrimapLabel::from_gray(v as u8)).collect();
        return Ok(MattingSample {
            id: id.to_owned(),
            seed,
            image: ObservedImage::new(get("image")?)?,
            fg: get("fg")?,
            bg: get("bg")?,
            alpha: get("alpha")?,
            trimap: Trimap::new(w, h, labels)?,
            initial_alpha: get("initial_alpha")?,
        });
    }
    Ok(MattingSample {
        id: id.to_owned(),
        seed,
        image: ObservedImage::new(imageio::read_rgb(&dir.join("image.png"))?)?,
        fg: imageio::read_rgb(&dir.join("fg.png"))?,
        bg: imageio::read_rgb(&dir.join("bg.png"))?,
        alpha: imageio::read_gray(&dir.join("alpha.png"))?,
        trimap: imageio::read_trimap(&dir.join("trimap.png"))?,
        initial_alpha: imageio::read_gray(&dir.join("initial_alpha.png"))?,
    })
}

/// Generate `count` samples with seeds `config.seed ..` into `out`, writing
/// the manifest last.
pub fn export_dataset(out: &Path, config: &AugmentConfig, count: usize) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hash = config.hash();
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let seed = config.seed + i as u64;
        let sample = make_sample(config, seed)?;
        write_sample(&out.join(&sample.id), &sample)?;
        entries.push(ManifestEntry {
            id: sample.id.clone(),
            seed,
            config_hash: hash.clone(),
            dir: sample.id,
        });
    }
    let path = out.join(MANIFEST_NAME);
    let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    for e in &entries {
        let line = serde_json::to_string(e).expect("serializable");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    f.flush().map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST_NAME);
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::Validation(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        out.push(entry);
    }
    Ok(out)
}

/// Every sample of a dataset, plus the ids that failed to load.
pub fn load_dataset(root: &Path) -> Result<(Vec<MattingSample>, Vec<(String, Error)>)> {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for e in read_manifest(root)? {
        let dir: PathBuf = root.join(&e.dir);
        match read_sample(&dir, &e.id, e.seed) {
            Ok(s) => ok.push(s),
            Err(err) => failed.push((e.id, err)),
        }
    }
    Ok((ok, failed))
}

/// Generate samples `seed .. seed + count` in memory.
pub fn generate(config: &AugmentConfig, seed: u64, count: usize) -> Result<Vec<MattingSample>> {
    (0..count as u64).map(|i| make_sample(config, seed + i)).collect()
}

#[doc(hidden)]
pub mod tests_support {
    use super::*;

    /// A small sample for unit tests.
    pub fn tiny_sample(size: usize, seed: u64) -> MattingSample {
        let mut cfg = AugmentConfig::desk(64);
        cfg.crop_size = size;
        make_sample(&cfg, seed).expect("tiny sample")
    }
}
