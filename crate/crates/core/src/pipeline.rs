//! Tiled inference, colour metrics, benchmark tables and the
//! receptive-field probe.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compositing::{MattingState, ObservedImage, Space, Trimap, TrimapLabel};
use crate::datagen::MattingSample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rim::{crop_window, rim_step, run_inference, HiddenState, IterationConfig, RimWeights};

/// Tiling parameters; `tile_size = 0` disables tiling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileConfig {
    pub tile_size: usize,
    pub overlap: usize,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            tile_size: 512,
            overlap: 11,
            workers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }
}

/// `dst` is written back; `src` is what the tile sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Tile {
    pub src: Rect,
    pub dst: Rect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    pub tile_size: usize,
    pub overlap: usize,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
    pub tiles: Vec<Tile>,
}

fn spans(len: usize, tile: usize, overlap: usize) -> Vec<((usize, usize), (usize, usize))> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + tile).min(len);
        // the stride-2 layers need even source origins to line up with the
        // full image
        let src_start = start.saturating_sub(overlap) & !1;
        let src_end = (end + overlap).min(len);
        out.push(((start, end), (src_start, src_end)));
        start = end;
    }
    out
}

impl TilePlan {
    pub fn new(height: usize, width: usize, config: &TileConfig) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Plan("cannot tile an empty image".into()));
        }
        let ts = if config.tile_size == 0 {
            height.max(width)
        } else {
            config.tile_size
        };
        if config.tile_size != 0 && ts % 2 != 0 {
            return Err(Error::Plan(format!("tile size must be even, got {ts}")));
        }
        if ts < 2 * config.overlap {
            return Err(Error::Plan(format!(
                "tile size {ts} is smaller than twice the overlap {}",
                config.overlap
            )));
        }
        let mut tiles = Vec::new();
        for ((dt, db), (st, sb)) in spans(height, ts, config.overlap) {
            for ((dl, dr), (sl, sr)) in spans(width, ts, config.overlap) {
                tiles.push(Tile {
                    src: Rect {
                        top: st,
                        left: sl,
                        height: sb - st,
                        width: sr - sl,
                    },
                    dst: Rect {
                        top: dt,
                        left: dl,
                        height: db - dt,
                        width: dr - dl,
                    },
                });
            }
        }
        Ok(TilePlan {
            height,
            width,
            tile_size: ts,
            overlap: config.overlap,
            workers: config.workers,
            tiles,
        })
    }

    /// How many tiles write each pixel; all ones for a valid plan.
    pub fn coverage(&self) -> Vec<u32> {
        let mut c = vec![0u32; self.height * self.width];
        for t in &self.tiles {
            for y in t.dst.top..t.dst.bottom() {
                for x in t.dst.left..t.dst.right() {
                    c[y * self.width + x] += 1;
                }
            }
        }
        c
    }
}

fn window_state(x: &MattingState, r: &Rect) -> Result<MattingState> {
    MattingState::from_packed(&crop_window(&x.packed(), r.top, r.left, r.height, r.width), x.space)
}

fn paste(dst: &mut Tensor, src: &Tensor, tile: &Tile) {
    let (_, c, _, w) = dst.nchw().expect("4-d");
    let sw = tile.src.width;
    let (oy, ox) = (tile.dst.top - tile.src.top, tile.dst.left - tile.src.left);
    for ch in 0..c {
        let s = src.plane(0, ch);
        let d = dst.plane_mut(0, ch);
        for y in 0..tile.dst.height {
            let so = (oy + y) * sw + ox;
            let dof = (tile.dst.top + y) * w + tile.dst.left;
            d[dof..dof + tile.dst.width].copy_from_slice(&s[so..so + tile.dst.width]);
        }
    }
}

/// Every state `x_0 .. x_T` (canonical), stitched from independent
/// per-tile runs.
pub fn infer_tiled_trajectory(
    image: &ObservedImage,
    x0: &MattingState,
    weights: &RimWeights,
    config: &IterationConfig,
    plan: &TilePlan,
) -> Result<Vec<MattingState>> {
    let (h, w) = x0.dims()?;
    if (h, w) != (plan.height, plan.width) || (image.height(), image.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "plan is {}x{}, image {}x{}, x0 {h}x{w}",
            plan.height,
            plan.width,
            image.height(),
            image.width()
        )));
    }
    let run_tile = |tile: &Tile| -> Result<Vec<MattingState>> {
        let r = &tile.src;
        let img = ObservedImage::new(crop_window(image.tensor(), r.top, r.left, r.height, r.width))?;
        let x = window_state(x0, r)?;
        Ok(run_inference(&img, &x, weights, config, None)?.states)
    };
    let workers = match plan.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(plan.tiles.len());

    let mut results: Vec<Option<Result<Vec<MattingState>>>> = (0..plan.tiles.len()).map(|_| None).collect();
    if workers <= 1 {
        for (slot, tile) in results.iter_mut().zip(&plan.tiles) {
            *slot = Some(run_tile(tile));
        }
    } else {
        let next = AtomicUsize::new(0);
        let done = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(|| {
                        let mut mine = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= plan.tiles.len() {
                                break mine;
                            }
                            mine.push((i, run_tile(&plan.tiles[i])));
                        }
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|hd| hd.join().expect("tile worker panicked"))
                .collect::<Vec<_>>()
        });
        for (i, r) in done {
            results[i] = Some(r);
        }
    }

    let steps = config.iterations + 1;
    let mut packed: Vec<Tensor> = (0..steps).map(|_| Tensor::zeros(&[1, 7, h, w])).collect();
    for (tile, r) in plan.tiles.iter().zip(results) {
        let states = r.expect("every tile ran")?;
        for (dst, s) in packed.iter_mut().zip(&states) {
            paste(dst, &s.packed(), tile);
        }
    }
    packed
        .iter()
        .map(|p| MattingState::from_packed(p, Space::Canonical))
        .collect()
}

/// Final state of a tiled run.
pub fn infer_tiled(
    image: &ObservedImage,
    x0: &MattingState,
    weights: &RimWeights,
    config: &IterationConfig,
    plan: &TilePlan,
) -> Result<MattingState> {
    let mut states = infer_tiled_trajectory(image, x0, weights, config, plan)?;
    Ok(states.pop().expect("x0 always present"))
}

/// Output footprint of a one-pixel perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Footprint {
    /// Farthest changed pixel, Chebyshev distance.
    pub radius: usize,
    /// Side of the changed region's bounding box.
    pub diameter: usize,
    /// The change reached the edge of the probe canvas.
    pub saturated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ProbeReport {
    pub iterations: usize,
    /// Perturbing a pixel at even coordinates.
    pub aligned: Footprint,
    /// Perturbing a pixel at odd coordinates.
    pub odd: Footprint,
}

impl ProbeReport {
    /// The overlap that covers both parities.
    pub fn worst_radius(&self) -> usize {
        self.aligned.radius.max(self.odd.radius)
    }
}

pub const PROBE_THRESHOLD: f32 = 1e-6;

fn probe_size(iterations: usize) -> usize {
    (2 * (8 * iterations + 8)).max(32)
}

/// Network-space states after each of `iterations` steps, unclamped.
fn unclamped_run(
    image: &ObservedImage,
    x0: &MattingState,
    weights: &RimWeights,
    config: &IterationConfig,
) -> Result<Tensor> {
    let (h, w) = x0.dims()?;
    let mut x = x0.to_network_space()?;
    let mut hidden = HiddenState::zeros(h, w);
    for _ in 0..config.iterations {
        let (dx, next) = rim_step(image, &x, &hidden, weights, config)?;
        let mut p = x.packed();
        p.add_assign(&dx)?;
        x = MattingState::from_packed(&p, Space::Network)?;
        hidden = next;
    }
    Ok(x.packed())
}

fn footprint(a: &Tensor, b: &Tensor, cy: usize, cx: usize, threshold: f32) -> Footprint {
    let (_, c, h, w) = a.nchw().expect("4-d");
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    let mut radius = 0;
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            let changed = (0..c).any(|ch| {
                let i = (ch * h + y) * w + x;
                (a.data()[i] - b.data()[i]).abs() > threshold
            });
            if changed {
                any = true;
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
                radius = radius.max(y.abs_diff(cy)).max(x.abs_diff(cx));
            }
        }
    }
    if !any {
        return Footprint {
            radius: 0,
            diameter: 0,
            saturated: false,
        };
    }
    Footprint {
        radius,
        diameter: (y1 - y0 + 1).max(x1 - x0 + 1),
        saturated: y0 == 0 || x0 == 0 || y1 == h - 1 || x1 == w - 1,
    }
}

/// Perturb one pixel of the image and of `x_0`, run `iterations` steps on
/// a random canvas and measure how far the final state changed.
pub fn receptive_field_probe(weights: &RimWeights, iterations: usize, seed: u64) -> Result<ProbeReport> {
    receptive_field_probe_at(weights, iterations, seed, PROBE_THRESHOLD)
}

/// [`receptive_field_probe`] with an explicit change threshold; 0 gives
/// the exact dependency footprint.
pub fn receptive_field_probe_at(
    weights: &RimWeights,
    iterations: usize,
    seed: u64,
    threshold: f32,
) -> Result<ProbeReport> {
    let config = IterationConfig::with_iterations(iterations);
    config.validate()?;
    let size = probe_size(iterations);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::uniform(&[1, 3, size, size], 0.5, &mut rng).map(|v| v + 0.5);
    let state = Tensor::uniform(&[1, 7, size, size], 0.5, &mut rng).map(|v| v + 0.5);
    let base_img = ObservedImage::new(image.clone())?;
    let base_x = MattingState::from_packed(&state, Space::Canonical)?;
    let base = unclamped_run(&base_img, &base_x, weights, &config)?;

    let mut measure = |cy: usize, cx: usize| -> Result<Footprint> {
        let mut img = image.clone();
        let mut x = state.clone();
        let hw = size * size;
        for ch in 0..3 {
            let v = &mut img.data_mut()[ch * hw + cy * size + cx];
            *v = if *v > 0.5 { *v - 0.25 } else { *v + 0.25 };
        }
        for ch in 0..7 {
            let v = &mut x.data_mut()[ch * hw + cy * size + cx];
            *v = if *v > 0.5 { *v - rng.random_range(0.2..0.3) } else { *v + rng.random_range(0.2..0.3) };
        }
        let out = unclamped_run(
            &ObservedImage::new(img)?,
            &MattingState::from_packed(&x, Space::Canonical)?,
            weights,
            &config,
        )?;
        Ok(footprint(&base, &out, cy, cx, threshold))
    };
    let c = size / 2;
    let aligned = measure(c, c)?;
    let odd = measure(c + 1, c + 1)?;
    Ok(ProbeReport {
        iterations,
        aligned,
        odd,
    })
}

/// Colour and alpha errors over the unknown region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ColorMetrics {
    pub fg_sad: f64,
    pub fg_mse: f64,
    pub bg_sad: f64,
    pub bg_mse: f64,
    pub alpha_sad: f64,
    pub alpha_mse: f64,
    pub unknown_pixels: usize,
}

pub const SAD_DIVISOR: f64 = 1000.0;
pub const MSE_SCALE: f64 = 1e4;

/// SAD sums are divided by 1000 and MSEs (means over pixel-channels)
/// scaled by 10^4. Colour errors are weighted by the true `alpha` (for F)
/// and `1 - alpha` (for B).
pub fn color_metrics_masked(pred: &MattingState, truth: &MattingState, trimap: &Trimap) -> Result<ColorMetrics> {
    if pred.space != Space::Canonical || truth.space != Space::Canonical {
        return Err(Error::Contract("metrics are computed in canonical space".into()));
    }
    let (h, w) = truth.dims()?;
    if pred.dims()? != (h, w) || (trimap.height(), trimap.width()) != (h, w) {
        return Err(Error::Shape(format!("prediction, truth and trimap sizes differ (truth {h}x{w})")));
    }
    let hw = h * w;
    let mut m = ColorMetrics::default();
    let (mut fg_sq, mut bg_sq, mut a_sq) = (0.0f64, 0.0f64, 0.0f64);
    for p in 0..hw {
        if trimap.labels()[p] != TrimapLabel::Unknown {
            continue;
        }
        m.unknown_pixels += 1;
        let a = truth.alpha.data()[p] as f64;
        for c in 0..3 {
            let i = c * hw + p;
            let df = a * (pred.fg.data()[i] as f64 - truth.fg.data()[i] as f64);
            let db = (1.0 - a) * (pred.bg.data()[i] as f64 - truth.bg.data()[i] as f64);
            m.fg_sad += df.abs();
            m.bg_sad += db.abs();
            fg_sq += df * df;
            bg_sq += db * db;
        }
        let da = pred.alpha.data()[p] as f64 - a;
        m.alpha_sad += da.abs();
        a_sq += da * da;
    }
    if m.unknown_pixels == 0 {
        return Err(Error::Parameter("unknown region is empty".into()));
    }
    let n = m.unknown_pixels as f64;
    m.fg_sad /= SAD_DIVISOR;
    m.bg_sad /= SAD_DIVISOR;
    m.alpha_sad /= SAD_DIVISOR;
    m.fg_mse = fg_sq / (3.0 * n) * MSE_SCALE;
    m.bg_mse = bg_sq / (3.0 * n) * MSE_SCALE;
    m.alpha_mse = a_sq / n * MSE_SCALE;
    Ok(m)
}

pub fn color_metrics(pred: &MattingState, truth: &MattingSample) -> Result<ColorMetrics> {
    color_metrics_masked(pred, &truth.target(), &truth.trimap)
}

/// The "input image" baseline: `F = B = I`, alpha from the initial estimate.
pub fn input_image_baseline(sample: &MattingSample) -> MattingState {
    MattingState {
        space: Space::Canonical,
        fg: sample.image.tensor().clone(),
        bg: sample.image.tensor().clone(),
        alpha: sample.initial_alpha.clone(),
    }
}

pub const BASELINE_METHOD: &str = "input_image";

pub fn iteration_method(t: usize) -> String {
    format!("t{t}")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub sample: String,
    pub method: String,
    pub metrics: ColorMetrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    /// Per-method means over images, baseline first then `t1 .. tT`.
    pub aggregate: Vec<(String, ColorMetrics)>,
    /// Samples that could not be evaluated, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Evaluate the baseline and every iteration on each sample. Images larger
/// than the tile size are run tiled.
pub fn benchmark(
    samples: &[MattingSample],
    mut skipped: Vec<(String, String)>,
    weights: &RimWeights,
    config: &IterationConfig,
    tiles: &TileConfig,
) -> Result<BenchmarkReport> {
    config.validate()?;
    let mut rows = Vec::new();
    for s in samples {
        let truth = s.target();
        let metrics = (|| -> Result<Vec<BenchmarkRow>> {
            let x0 = s.initial_state()?;
            let plan = TilePlan::new(s.image.height(), s.image.width(), tiles)?;
            let states = if plan.tiles.len() == 1 {
                run_inference(&s.image, &x0, weights, config, None)?.states
            } else {
                infer_tiled_trajectory(&s.image, &x0, weights, config, &plan)?
            };
            let mut out = vec![BenchmarkRow {
                sample: s.id.clone(),
                method: BASELINE_METHOD.into(),
                metrics: color_metrics_masked(&input_image_baseline(s), &truth, &s.trimap)?,
            }];
            for (t, state) in states.iter().enumerate().skip(1) {
                out.push(BenchmarkRow {
                    sample: s.id.clone(),
                    method: iteration_method(t),
                    metrics: color_metrics_masked(state, &truth, &s.trimap)?,
                });
            }
            Ok(out)
        })();
        match metrics {
            Ok(r) => rows.extend(r),
            Err(e) => {
                log::warn!("sample {} skipped: {e}", s.id);
                skipped.push((s.id.clone(), e.to_string()));
            }
        }
    }
    let mut methods = vec![BASELINE_METHOD.to_owned()];
    methods.extend((1..=config.iterations).map(iteration_method));
    let aggregate = if rows.is_empty() {
        Vec::new()
    } else {
        methods
            .into_iter()
            .map(|m| {
                let sel: Vec<&ColorMetrics> = rows.iter().filter(|r| r.method == m).map(|r| &r.metrics).collect();
                (m, mean_metrics(&sel))
            })
            .collect()
    };
    Ok(BenchmarkReport {
        rows,
        aggregate,
        skipped,
    })
}

fn mean_metrics(ms: &[&ColorMetrics]) -> ColorMetrics {
    let n = ms.len().max(1) as f64;
    let mut out = ColorMetrics::default();
    for m in ms {
        out.fg_sad += m.fg_sad / n;
        out.fg_mse += m.fg_mse / n;
        out.bg_sad += m.bg_sad / n;
        out.bg_mse += m.bg_mse / n;
        out.alpha_sad += m.alpha_sad / n;
        out.alpha_mse += m.alpha_mse / n;
        out.unknown_pixels += m.unknown_pixels;
    }
    out
}

const METRIC_COLUMNS: [&str; 7] = ["fg_sad", "fg_mse", "bg_sad", "bg_mse", "alpha_sad", "alpha_mse", "unknown_pixels"];

fn metric_cells(m: &ColorMetrics) -> [String; 7] {
    [
        format!("{:.4}", m.fg_sad),
        format!("{:.4}", m.fg_mse),
        format!("{:.4}", m.bg_sad),
        format!("{:.4}", m.bg_mse),
        format!("{:.4}", m.alpha_sad),
        format!("{:.4}", m.alpha_mse),
        m.unknown_pixels.to_string(),
    ]
}

impl BenchmarkReport {
    pub fn aggregate_for(&self, method: &str) -> Option<&ColorMetrics> {
        self.aggregate.iter().find(|(m, _)| m == method).map(|(_, c)| c)
    }

    /// Per-image rows then aggregate rows (`sample = "mean"`).
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["sample", "method"];
        header.extend(METRIC_COLUMNS);
        w.write_record(&header).expect("in-memory csv");
        let agg = self.aggregate.iter().map(|(m, c)| ("mean", m.as_str(), c));
        let rows = self.rows.iter().map(|r| (r.sample.as_str(), r.method.as_str(), &r.metrics));
        for (sample, method, m) in rows.chain(agg) {
            let mut rec = vec![sample.to_owned(), method.to_owned()];
            rec.extend(metric_cells(m));
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Aligned Markdown table of the aggregate rows.
    pub fn to_markdown(&self) -> String {
        let mut header = vec!["method".to_owned()];
        header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
        let body: Vec<Vec<String>> = self
            .aggregate
            .iter()
            .map(|(m, c)| {
                let mut r = vec![m.clone()];
                r.extend(metric_cells(c));
                r
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::from("|");
            for (i, c) in cells.iter().enumerate() {
                if i == 0 {
                    let _ = write!(s, " {:<w$} |", c, w = widths[i]);
                } else {
                    let _ = write!(s, " {:>w$} |", c, w = widths[i]);
                }
            }
            s.push('\n');
            s
        };
        let mut out = line(&header);
        out.push('|');
        for (i, w) in widths.iter().enumerate() {
            out.push_str(if i == 0 { ":" } else { "" });
            out.push_str(&"-".repeat(w + 1));
            out.push_str(if i == 0 { "|" } else { ":|" });
        }
        out.push('\n');
        for r in &body {
            out.push_str(&line(r));
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "\n{} sample(s) skipped", self.skipped.len());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compositing::init_state;

    fn weights(seed: u64) -> RimWeights {
        RimWeights::random(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn random_inputs(h: usize, w: usize, seed: u64) -> (ObservedImage, MattingState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ObservedImage::new(Tensor::uniform(&[1, 3, h, w], 0.5, &mut rng).map(|v| v + 0.5)).unwrap();
        let a = Tensor::uniform(&[1, 1, h, w], 0.5, &mut rng).map(|v| v + 0.5);
        let x0 = init_state(&img, None, &a).unwrap();
        (img, x0)
    }

    #[test]
    fn plans_cover_exactly_once() {
        for (h, w, ts, ov) in [(100, 64, 32, 11), (33, 65, 16, 4), (8, 8, 64, 3), (64, 64, 64, 0)] {
            let cfg = TileConfig {
                tile_size: ts,
                overlap: ov,
                workers: 1,
            };
            let p = TilePlan::new(h, w, &cfg).unwrap();
            assert!(p.coverage().iter().all(|&c| c == 1), "{h}x{w} ts {ts}");
            for t in &p.tiles {
                assert_eq!(t.src.top % 2, 0);
                assert_eq!(t.src.left % 2, 0);
                if t.dst.top > 0 {
                    assert!(t.dst.top - t.src.top >= ov);
                }
                if t.dst.bottom() < h {
                    assert_eq!(t.src.bottom() - t.dst.bottom(), ov.min(h - t.dst.bottom()));
                }
            }
        }
    }

    #[test]
    fn plan_errors() {
        let small = TileConfig {
            tile_size: 16,
            overlap: 9,
            workers: 1,
        };
        assert!(matches!(TilePlan::new(64, 64, &small), Err(Error::Plan(_))));
        let odd = TileConfig {
            tile_size: 15,
            overlap: 2,
            workers: 1,
        };
        assert!(matches!(TilePlan::new(64, 64, &odd), Err(Error::Plan(_))));
    }

    #[test]
    fn single_tile_matches_full_inference() {
        let w = weights(1);
        let (img, x0) = random_inputs(20, 18, 2);
        let cfg = IterationConfig::with_iterations(2);
        let plan = TilePlan::new(20, 18, &TileConfig::default()).unwrap();
        assert_eq!(plan.tiles.len(), 1);
        let tiled = infer_tiled(&img, &x0, &w, &cfg, &plan).unwrap();
        let full = run_inference(&img, &x0, &w, &cfg, None).unwrap();
        assert_eq!(&tiled, full.last());
    }

    #[test]
    fn tiled_interiors_match_with_enough_overlap() {
        let w = weights(3);
        let (img, x0) = random_inputs(64, 64, 4);
        let cfg = IterationConfig::with_iterations(2);
        let probe = receptive_field_probe(&w, 2, 0).unwrap();
        let r = probe.worst_radius();
        let full = run_inference(&img, &x0, &w, &cfg, None).unwrap();
        let tc = TileConfig {
            tile_size: 32,
            overlap: r + 1,
            workers: 2,
        };
        let plan = TilePlan::new(64, 64, &tc).unwrap();
        let tiled = infer_tiled(&img, &x0, &w, &cfg, &plan).unwrap();
        let (a, b) = (full.last().packed(), tiled.packed());
        let mut worst = 0.0f32;
        for c in 0..7 {
            for y in r..64 - r {
                for x in r..64 - r {
                    let i = (c * 64 + y) * 64 + x;
                    worst = worst.max((a.data()[i] - b.data()[i]).abs());
                }
            }
        }
        assert!(worst <= 1e-4, "max deviation {worst}");
    }

    #[test]
    fn zero_overlap_agrees_inside_tiles() {
        let w = weights(5);
        let (img, x0) = random_inputs(48, 48, 6);
        let cfg = IterationConfig::with_iterations(1);
        let r = receptive_field_probe(&w, 1, 0).unwrap().worst_radius();
        let full = run_inference(&img, &x0, &w, &cfg, None).unwrap();
        let tc = TileConfig {
            tile_size: 24,
            overlap: 0,
            workers: 1,
        };
        let tiled = infer_tiled(&img, &x0, &w, &cfg, &TilePlan::new(48, 48, &tc).unwrap()).unwrap();
        let (a, b) = (full.last().packed(), tiled.packed());
        for c in 0..7 {
            for y in 0..48 {
                for x in 0..48 {
                    let (ty, tx) = (y % 24, x % 24);
                    if ty >= r && ty < 24 - r && tx >= r && tx < 24 - r {
                        let i = (c * 48 + y) * 48 + x;
                        assert!((a.data()[i] - b.data()[i]).abs() <= 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn probe_radius_grows_with_iterations() {
        let w = weights(7);
        let mut prev = 0;
        for t in 1..=3 {
            let p = receptive_field_probe(&w, t, 1).unwrap();
            assert!(!p.aligned.saturated && !p.odd.saturated);
            assert!(p.aligned.radius >= prev);
            prev = p.aligned.radius;
        }
        let p1 = receptive_field_probe(&w, 1, 1).unwrap();
        assert!(p1.aligned.diameter <= 11, "{p1:?}");
    }

    fn fixture_truth() -> (MattingState, Trimap) {
        let truth = MattingState::new(
            Space::Canonical,
            Tensor::full(&[1, 3, 1, 2], 0.5),
            Tensor::full(&[1, 3, 1, 2], 0.25),
            Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let tm = Trimap::new(2, 1, vec![TrimapLabel::Unknown, TrimapLabel::Foreground]).unwrap();
        (truth, tm)
    }

    #[test]
    fn metrics_arithmetic() {
        let (truth, tm) = fixture_truth();
        assert_eq!(color_metrics_masked(&truth, &truth, &tm).unwrap().fg_sad, 0.0);
        let mut pred = truth.clone();
        pred.fg.data_mut()[0] += 0.2;
        let m = color_metrics_masked(&pred, &truth, &tm).unwrap();
        assert!((m.fg_sad - 0.2 / 1000.0).abs() < 1e-9);
        assert!((m.fg_mse - 0.04 / 3.0 * 1e4).abs() < 1e-3);
        assert_eq!((m.bg_sad, m.alpha_sad, m.unknown_pixels), (0.0, 0.0, 1));
        let none = Trimap::filled(2, 1, TrimapLabel::Background);
        assert!(color_metrics_masked(&pred, &truth, &none).is_err());
    }

    #[test]
    fn baseline_is_positive_on_synthetic_data() {
        let s = crate::datagen::tests_support::tiny_sample(32, 2);
        let m = color_metrics(&input_image_baseline(&s), &s).unwrap();
        assert!(m.fg_sad > 0.0 && m.bg_sad > 0.0);
    }

    #[test]
    fn benchmark_tables() {
        let s = crate::datagen::tests_support::tiny_sample(32, 4);
        let cfg = IterationConfig::with_iterations(2);
        let r = benchmark(&[s], vec![("bad".into(), "missing alpha".into())], &weights(1), &cfg, &TileConfig::default()).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.aggregate.len(), 3);
        assert_eq!(r.skipped.len(), 1);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 + 3);
        assert!(csv.starts_with("sample,method,fg_sad"));
        let md = r.to_markdown();
        assert!(md.contains("| input_image |"));
        assert!(md.contains("| t2 "));

        let empty = benchmark(&[], Vec::new(), &weights(1), &cfg, &TileConfig::default()).unwrap();
        assert!(empty.rows.is_empty() && empty.aggregate.is_empty());
    }
}
