//! Reconstruction losses, the unrolled training step, and training
//! checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compositing::{MattingState, TrimapLabel};
use crate::datagen::MattingSample;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{find, read_tensors, write_tensors};
use crate::numerics::{adam_step, AdamConfig, AdamSlot, Moments, Tape, Tensor};
use crate::rim::{crop_window, rim_step_tape, IterationConfig, RimVars, RimWeights, Trajectory, HIDDEN_CHANNELS};

/// Losses of one step (or one evaluation).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub step: u64,
    /// `L_1 .. L_T`.
    pub per_iteration: Vec<f64>,
    /// `sum_t w_t L_t`.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub steps: u64,
    pub batch_size: usize,
    /// Square training crop; samples no larger than this are used whole.
    pub crop_size: usize,
    pub seed: u64,
    /// Treat the likelihood-gradient input as a constant.
    pub detach_likelihood: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub iteration: IterationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            steps: 20_000,
            batch_size: 4,
            crop_size: 256,
            seed: 0,
            detach_likelihood: false,
            checkpoint_every: 1_000,
            log_every: 1,
            iteration: IterationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.iteration.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.crop_size < 2 || self.crop_size % 2 != 0 {
            return Err(Error::Parameter(format!(
                "batch size must be positive and crop size even (got {} / {})",
                self.batch_size, self.crop_size
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

fn check_mask(mask: &Tensor, h: usize, w: usize) -> Result<usize> {
    if mask.dims() != [1, 1, h, w] {
        return Err(Error::Shape(format!(
            "unknown mask {:?} does not match {h}x{w}",
            mask.dims()
        )));
    }
    let count = mask.data().iter().filter(|&&m| m > 0.5).count();
    if count == 0 {
        return Err(Error::Parameter("unknown region is empty".into()));
    }
    Ok(count)
}

/// Mean over unknown pixels of the summed absolute error of all seven
/// channels.
pub fn reconstruction_loss(x: &MattingState, target: &MattingState, unknown_mask: &Tensor) -> Result<f64> {
    if x.space != target.space {
        return Err(Error::Contract(format!(
            "loss compares a {:?} state with a {:?} target",
            x.space, target.space
        )));
    }
    let (h, w) = x.dims()?;
    if target.dims()? != (h, w) {
        return Err(Error::Shape("prediction and target sizes differ".into()));
    }
    let count = check_mask(unknown_mask, h, w)?;
    let (xp, tp) = (x.packed(), target.packed());
    let m = unknown_mask.data();
    let hw = h * w;
    let mut acc = 0.0f64;
    for c in 0..7 {
        let (xs, ts) = (&xp.data()[c * hw..(c + 1) * hw], &tp.data()[c * hw..(c + 1) * hw]);
        for i in 0..hw {
            if m[i] > 0.5 {
                acc += (xs[i] as f64 - ts[i] as f64).abs();
            }
        }
    }
    Ok(acc / count as f64)
}

/// Weighted sum of the reconstruction losses of `x_1 .. x_T`.
pub fn total_loss(
    trajectory: &Trajectory,
    target: &MattingState,
    unknown_mask: &Tensor,
    weights: &[f32],
) -> Result<LossReport> {
    let t = trajectory.states.len().saturating_sub(1);
    if weights.len() != t {
        return Err(Error::Parameter(format!(
            "{} loss weights for {t} iterations",
            weights.len()
        )));
    }
    let per_iteration = trajectory.states[1..]
        .iter()
        .map(|x| reconstruction_loss(x, target, unknown_mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport {
        step: 0,
        total: combine(&per_iteration, weights),
        per_iteration,
    })
}

fn combine(losses: &[f64], weights: &[f32]) -> f64 {
    losses.iter().zip(weights).map(|(l, &w)| w as f64 * l).sum()
}

/// Weights, Adam moments and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub weights: RimWeights,
    /// One entry per parameter, in `PARAMETER_NAMES` order.
    pub moments: Vec<Moments>,
    pub step: u64,
}

impl TrainState {
    pub fn new(weights: RimWeights) -> Self {
        let moments = weights.params().iter().map(|(_, t)| Moments::zeros_like(t)).collect();
        TrainState {
            weights,
            moments,
            step: 0,
        }
    }
}

/// What happened to one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied(LossReport),
    /// The loss or a gradient was not finite; nothing was updated.
    Skipped { step: u64, reason: String },
}

/// One training example after cropping, ready for the unroll.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub id: String,
    pub image: Arc<Tensor>,
    pub x0: MattingState,
    pub target: MattingState,
    pub unknown_mask: Arc<Tensor>,
}

impl TrainingExample {
    pub fn from_sample(sample: &MattingSample) -> Result<Self> {
        Ok(TrainingExample {
            id: sample.id.clone(),
            image: Arc::new(sample.image.tensor().clone()),
            x0: sample.initial_state()?,
            target: sample.target(),
            unknown_mask: Arc::new(sample.trimap.unknown_mask()),
        })
    }

    /// A `size x size` window, chosen at random among windows that contain
    /// unknown pixels.
    pub fn random_crop(sample: &MattingSample, size: usize, rng: &mut impl Rng) -> Result<Self> {
        let (h, w) = (sample.image.height(), sample.image.width());
        if h <= size && w <= size {
            return TrainingExample::from_sample(sample);
        }
        let (ch, cw) = (size.min(h) & !1, size.min(w) & !1);
        let unknown: Vec<usize> = sample
            .trimap
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == TrimapLabel::Unknown)
            .map(|(i, _)| i)
            .collect();
        if unknown.is_empty() {
            return Err(Error::Parameter(format!("sample {} has no unknown pixels", sample.id)));
        }
        let centre = unknown[rng.random_range(0..unknown.len())];
        let (cy, cx) = (centre / w, centre % w);
        let top = cy.saturating_sub(ch / 2).min(h - ch);
        let left = cx.saturating_sub(cw / 2).min(w - cw);
        let crop = |t: &Tensor| crop_window(t, top, left, ch, cw);
        let x0 = sample.initial_state()?;
        let target = sample.target();
        let crop_state = |s: &MattingState| MattingState::from_packed(&crop(&s.packed()), s.space);
        Ok(TrainingExample {
            id: format!("{}@{top},{left}", sample.id),
            image: Arc::new(crop(sample.image.tensor())),
            x0: crop_state(&x0)?,
            target: crop_state(&target)?,
            unknown_mask: Arc::new(crop(&sample.trimap.unknown_mask())),
        })
    }
}

/// Differentiable unroll of one example. Returns the per-iteration losses
/// and the parameter gradients.
pub fn example_gradients(
    weights: &RimWeights,
    example: &TrainingExample,
    config: &IterationConfig,
    detach_likelihood: bool,
) -> Result<(Vec<f64>, f64, Vec<Tensor>)> {
    let (h, w) = example.x0.dims()?;
    check_mask(&example.unknown_mask, h, w)?;
    let mut tape = Tape::new();
    let vars = RimVars::bind(&mut tape, weights)?;
    let mut x = tape.constant(example.x0.to_network_space()?.packed());
    let mut h1 = tape.constant(Tensor::zeros(&[1, HIDDEN_CHANNELS, h / 2, w / 2]));
    let mut h2 = tape.constant(Tensor::zeros(&[1, HIDDEN_CHANNELS, h, w]));
    let target = Arc::new(example.target.packed());
    let mut total = None;
    let mut losses = Vec::with_capacity(config.iterations);
    for &wt in &config.weights() {
        let (dx, n1, n2) = rim_step_tape(&mut tape, &example.image, x, h1, h2, &vars, config, detach_likelihood)?;
        x = tape.add(x, dx)?;
        (h1, h2) = (n1, n2);
        let canonical = tape.affine(x, 0.5, 0.5);
        let l = tape.masked_l1_mean(canonical, target.clone(), example.unknown_mask.clone())?;
        losses.push(tape.value(l).item() as f64);
        let weighted = tape.affine(l, wt, 0.0);
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let total = total.expect("at least one iteration");
    let total_value = tape.value(total).item() as f64;
    let mut grads = tape.backward(total)?;
    let g = vars
        .params
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).dims())))
        .collect();
    Ok((losses, total_value, g))
}

/// Power iteration, batch-mean gradients through the full unroll, then
/// one Adam update.
pub fn train_step(state: &mut TrainState, batch: &[TrainingExample], config: &TrainConfig) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let step = state.step + 1;
    let mut weights = state.weights.clone();
    weights.advance_spectral()?;
    let mut sum_grads: Option<Vec<Tensor>> = None;
    let mut per_iteration = vec![0.0f64; config.iteration.iterations];
    let mut total = 0.0f64;
    for ex in batch {
        let (losses, t, grads) = example_gradients(&weights, ex, &config.iteration, config.detach_likelihood)?;
        if !t.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
            let reason = format!("non-finite loss on sample {} (batch {ids:?})", ex.id);
            log::warn!("step {step} skipped: {reason}");
            return Ok(StepOutcome::Skipped { step, reason });
        }
        for (acc, l) in per_iteration.iter_mut().zip(&losses) {
            *acc += l;
        }
        total += t;
        match &mut sum_grads {
            None => sum_grads = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g)?;
                }
            }
        }
    }
    let n = batch.len() as f32;
    let grads: Vec<Tensor> = sum_grads
        .expect("non-empty batch")
        .into_iter()
        .map(|g| g.map(|v| v / n))
        .collect();
    let mut slots: Vec<AdamSlot<'_>> = weights
        .params_mut()
        .into_iter()
        .zip(&grads)
        .zip(state.moments.iter_mut())
        .map(|(((name, param), grad), moments)| AdamSlot {
            name,
            param,
            grad,
            moments,
        })
        .collect();
    let snapshot: Vec<Moments> = slots.iter().map(|s| s.moments.clone()).collect();
    if let Err(e) = adam_step(&mut slots, &config.adam(), step) {
        drop(slots);
        state.moments = snapshot;
        let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
        let reason = format!("{e} (batch {ids:?})");
        log::warn!("step {step} skipped: {reason}");
        return Ok(StepOutcome::Skipped { step, reason });
    }
    drop(slots);
    state.weights = weights;
    state.step = step;
    let n = batch.len() as f64;
    Ok(StepOutcome::Applied(LossReport {
        step,
        per_iteration: per_iteration.into_iter().map(|v| v / n).collect(),
        total: total / n,
    }))
}

/// The examples used at `step` (1-based): a pure function of the seed, the
/// step and the dataset, so resumed runs see the same data.
pub fn batch_for_step(dataset: &[MattingSample], config: &TrainConfig, step: u64) -> Result<Vec<TrainingExample>> {
    if dataset.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(step);
    (0..config.batch_size)
        .map(|_| {
            let s = &dataset[rng.random_range(0..dataset.len())];
            TrainingExample::random_crop(s, config.crop_size, &mut rng)
        })
        .collect()
}

/// CSV training log: `step, loss_t1 .. loss_tT, total, wall_s`.
pub struct TrainLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> TrainLog<W> {
    pub fn new(out: W, iterations: usize) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_owned()];
        header.extend((1..=iterations).map(|t| format!("loss_t{t}")));
        header.push("total".into());
        header.push("wall_s".into());
        writer.write_record(&header).map_err(csv_err)?;
        Ok(TrainLog { writer })
    }

    /// Continue an existing log without a header.
    pub fn append(out: W) -> Self {
        TrainLog {
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(out),
        }
    }

    pub fn record(&mut self, report: &LossReport, wall_s: f64) -> Result<()> {
        let mut row = vec![report.step.to_string()];
        row.extend(report.per_iteration.iter().map(|l| format!("{l:.6}")));
        row.push(format!("{:.6}", report.total));
        row.push(format!("{wall_s:.3}"));
        self.writer.write_record(&row).map_err(csv_err)?;
        self.writer.flush().map_err(|e| Error::io("training log", e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("training log", std::io::Error::other(e))
}

/// Drive `train_step` until `config.steps`, logging and checkpointing.
/// Returns the applied reports.
pub fn train<W: Write>(
    state: &mut TrainState,
    dataset: &[MattingSample],
    config: &TrainConfig,
    mut log: Option<&mut TrainLog<W>>,
    checkpoint: Option<&Path>,
) -> Result<Vec<LossReport>> {
    config.validate()?;
    let start = Instant::now();
    let mut reports = Vec::new();
    while state.step < config.steps {
        let batch = batch_for_step(dataset, config, state.step + 1)?;
        match train_step(state, &batch, config)? {
            StepOutcome::Applied(report) => {
                let logged = config.log_every > 0 && report.step % config.log_every == 0;
                if let (Some(log), true) = (log.as_mut(), logged) {
                    log.record(&report, start.elapsed().as_secs_f64())?;
                }
                if logged {
                    log::info!("step {} total {:.5}", report.step, report.total);
                }
                reports.push(report);
            }
            StepOutcome::Skipped { step, .. } => {
                // advance past the bad batch so the run cannot stall
                state.step = step;
            }
        }
        if let Some(path) = checkpoint {
            let due = config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0;
            if due || state.step == config.steps {
                save_checkpoint(path, state)?;
            }
        }
    }
    Ok(reports)
}

const STEP_TENSOR: &str = "meta.step";
/// Largest step count stored exactly in the f32 step tensor.
const MAX_STEP: u64 = 1 << 24;

/// Weights, moments (`adam.m.<name>`, `adam.v.<name>`) and `meta.step`.
pub fn checkpoint_tensors(state: &TrainState) -> Result<Vec<(String, Tensor)>> {
    if state.step > MAX_STEP {
        return Err(Error::Parameter(format!("step {} too large to checkpoint", state.step)));
    }
    let mut out = state.weights.to_tensors();
    for ((name, _), m) in state.weights.params().iter().zip(&state.moments) {
        out.push((format!("adam.m.{name}"), m.m.clone()));
        out.push((format!("adam.v.{name}"), m.v.clone()));
    }
    out.push((STEP_TENSOR.into(), Tensor::scalar(state.step as f32)));
    Ok(out)
}

pub fn state_from_tensors(tensors: &[(String, Tensor)]) -> Result<TrainState> {
    let weights = RimWeights::from_tensors(tensors)?;
    let moments = weights
        .params()
        .iter()
        .map(|(name, p)| {
            let m = find(tensors, &format!("adam.m.{name}"))?;
            let v = find(tensors, &format!("adam.v.{name}"))?;
            if m.dims() != p.dims() || v.dims() != p.dims() {
                return Err(Error::Schema(format!("moments of {name} have the wrong shape")));
            }
            Ok(Moments {
                m: m.clone(),
                v: v.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let step = find(tensors, STEP_TENSOR)?;
    if step.len() != 1 || step.item() < 0.0 || step.item().fract() != 0.0 {
        return Err(Error::Schema("meta.step must be a non-negative integer scalar".into()));
    }
    Ok(TrainState {
        weights,
        moments,
        step: step.item() as u64,
    })
}

fn write_atomic(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        write_tensors(BufWriter::new(f), tensors).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Write atomically through a sibling temporary file.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    write_atomic(path, &checkpoint_tensors(state)?)
}

const SAMPLES_TENSOR: &str = "meta.samples";

/// How a final model was trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ModelInfo {
    pub step: u64,
    pub samples: u64,
}

/// Weights without optimizer state, tagged with the step count and the
/// size of the training set. Loads with `RimWeights::load`.
pub fn save_model(path: &Path, weights: &RimWeights, info: ModelInfo) -> Result<()> {
    if info.step > MAX_STEP || info.samples > MAX_STEP {
        return Err(Error::Parameter("model metadata too large".into()));
    }
    let mut tensors = weights.to_tensors();
    tensors.push((STEP_TENSOR.into(), Tensor::scalar(info.step as f32)));
    tensors.push((SAMPLES_TENSOR.into(), Tensor::scalar(info.samples as f32)));
    write_atomic(path, &tensors)
}

/// Metadata of a model written by [`save_model`].
pub fn load_model_info(path: &Path) -> Result<ModelInfo> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let tensors = read_tensors(BufReader::new(f))?;
    let get = |n: &str| -> Result<u64> {
        let t = find(&tensors, n)?;
        if t.len() != 1 || t.item() < 0.0 || t.item().fract() != 0.0 {
            return Err(Error::Schema(format!("{n} must be a non-negative integer scalar")));
        }
        Ok(t.item() as u64)
    };
    Ok(ModelInfo {
        step: get(STEP_TENSOR)?,
        samples: get(SAMPLES_TENSOR)?,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    state_from_tensors(&read_tensors(BufReader::new(f))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compositing::Space;
    use crate::rim::run_inference;

    fn state_with(h: usize, w: usize, value: f32) -> MattingState {
        MattingState::new(
            Space::Canonical,
            Tensor::full(&[1, 3, h, w], value),
            Tensor::full(&[1, 3, h, w], value),
            Tensor::full(&[1, 1, h, w], value),
        )
        .unwrap()
    }

    #[test]
    fn reconstruction_loss_cases() {
        let t = state_with(2, 2, 0.5);
        let mask = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(reconstruction_loss(&t, &t, &mask).unwrap(), 0.0);
        let x = state_with(2, 2, 0.6);
        let l = reconstruction_loss(&x, &t, &mask).unwrap();
        assert!((l - 0.7).abs() < 1e-6, "{l}");

        let mut known_only = t.clone();
        known_only.alpha.data_mut()[3] = 0.0;
        known_only.fg.data_mut()[1] = 1.0;
        assert_eq!(reconstruction_loss(&known_only, &t, &mask).unwrap(), 0.0);

        let empty = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(reconstruction_loss(&x, &t, &empty), Err(Error::Parameter(_))));
    }

    fn trajectory(states: Vec<MattingState>) -> Trajectory {
        let (h, w) = states[0].dims().unwrap();
        Trajectory {
            states,
            hidden: crate::rim::HiddenState::zeros(h, w),
        }
    }

    #[test]
    fn total_loss_cases() {
        let target = state_with(1, 1, 0.0);
        let mask = Tensor::full(&[1, 1, 1, 1], 1.0);
        // per-channel differences 0.5/7 and 0.3/7 give L = 0.5 and 0.3
        let traj = trajectory(vec![
            state_with(1, 1, 0.9),
            state_with(1, 1, 0.5 / 7.0),
            state_with(1, 1, 0.3 / 7.0),
        ]);
        let r = total_loss(&traj, &target, &mask, &[1.0, 1.0]).unwrap();
        assert!((r.total - 0.8).abs() < 1e-6);
        let doubled = total_loss(&traj, &target, &mask, &[2.0, 2.0]).unwrap();
        assert_eq!(doubled.total, 2.0 * r.total);
        let last = total_loss(&traj, &target, &mask, &[0.0, 1.0]).unwrap();
        assert_eq!(last.total, r.per_iteration[1]);
        assert!(matches!(total_loss(&traj, &target, &mask, &[1.0]), Err(Error::Parameter(_))));

        let exact = trajectory(vec![target.clone(), target.clone(), target.clone()]);
        assert_eq!(total_loss(&exact, &target, &mask, &[1.0, 1.0]).unwrap().total, 0.0);
    }

    #[test]
    fn unroll_losses_match_inference() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let weights = RimWeights::random(&mut rng);
        let sample = crate::datagen::tests_support::tiny_sample(16, 3);
        let ex = TrainingExample::from_sample(&sample).unwrap();
        let cfg = IterationConfig::with_iterations(2);
        let (losses, total, _) = example_gradients(&weights, &ex, &cfg, false).unwrap();
        let img = sample.image.clone();
        let traj = run_inference(&img, &ex.x0, &weights, &cfg, None).unwrap();
        let r = total_loss(&traj, &ex.target, &ex.unknown_mask, &[1.0, 1.0]).unwrap();
        // the unroll is unclamped, the trajectory is clamped
        assert!(r.total <= total + 1e-5);
        assert_eq!(losses.len(), 2);
    }
}
