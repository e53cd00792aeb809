//! The recurrent inference machine.
//!
//! ```text
//! [x, grad L(x)] (14ch)
//!   -> conv_in 3x3/2 + tanh  (32ch, half res)
//!   -> gru1                  (128ch, half res)
//!   -> conv_up 3x3/2^T + tanh (32ch, full res)
//!   -> gru2                  (128ch, full res)
//!   -> conv_out 3x3          (7ch) = dx
//! ```
//! `conv_in` and `conv_up` are spectrally normalized. Each iteration adds
//! `dx` to the network-space state.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compositing::{likelihood_features, GradientVariant, MattingState, ObservedImage, Space};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{find, read_tensors, write_tensors};
use crate::numerics::conv::{conv2d_geom, conv_transpose2d_geom};
use crate::numerics::gru::GruVars;
use crate::numerics::{
    gru_conv_cell, gru_conv_cell_tape, ConvGeometry, ConvParams, GruGates, SpectralState, Tape,
    Tensor, Var, WeightLayout,
};

pub const STATE_CHANNELS: usize = 7;
pub const INPUT_CHANNELS: usize = 2 * STATE_CHANNELS;
pub const FEATURE_CHANNELS: usize = 32;
pub const HIDDEN_CHANNELS: usize = 128;
/// Learnable scalars in [`RimWeights`].
pub const PARAMETER_COUNT: usize = 1_155_680;

const CONV_IN: ConvGeometry = ConvGeometry::new(3, 2, 1);
const CONV_UP: ConvGeometry = ConvGeometry::new(3, 2, 1);
const CONV_UP_OUTPUT_PADDING: usize = 1;
const CONV_OUT: ConvGeometry = ConvGeometry::new(3, 1, 1);

/// Canonical tensor names of the learnable parameters, in checkpoint order.
pub const PARAMETER_NAMES: [&str; 16] = [
    "conv_in.weight",
    "conv_in.bias",
    "gru1.z.weight",
    "gru1.z.bias",
    "gru1.r.weight",
    "gru1.r.bias",
    "gru1.h.weight",
    "gru1.h.bias",
    "conv_up.weight",
    "gru2.z.weight",
    "gru2.z.bias",
    "gru2.r.weight",
    "gru2.r.bias",
    "gru2.h.weight",
    "gru2.h.bias",
    "conv_out.weight",
];

/// Learnable parameters plus the power-iteration vectors of the two
/// spectrally normalized layers.
#[derive(Clone, Debug, PartialEq)]
pub struct RimWeights {
    /// `(32, 14, 3, 3)` with bias.
    pub conv_in: ConvParams,
    pub conv_in_sn: SpectralState,
    pub gru1: GruGates,
    /// `(128, 32, 3, 3)` transposed-convolution weight, no bias.
    pub conv_up: ConvParams,
    pub conv_up_sn: SpectralState,
    pub gru2: GruGates,
    /// `(7, 128, 3, 3)`, no bias.
    pub conv_out: ConvParams,
}

fn uniform_conv<R: Rng + ?Sized>(dims: [usize; 4], fan_in: usize, bias: bool, rng: &mut R) -> ConvParams {
    let bound = 1.0 / (fan_in as f32).sqrt();
    ConvParams {
        weight: Tensor::uniform(&dims, bound, rng),
        bias: bias.then(|| Tensor::uniform(&[dims[0]], bound, rng)),
    }
}

fn random_gates<R: Rng + ?Sized>(input: usize, rng: &mut R) -> GruGates {
    let dims = [HIDDEN_CHANNELS, input + HIDDEN_CHANNELS, 3, 3];
    let fan_in = (input + HIDDEN_CHANNELS) * 9;
    GruGates {
        update: uniform_conv(dims, fan_in, true, rng),
        reset: uniform_conv(dims, fan_in, true, rng),
        candidate: uniform_conv(dims, fan_in, true, rng),
    }
}

impl RimWeights {
    /// Uniform `+-1/sqrt(fan_in)` initialization.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let conv_in = uniform_conv([FEATURE_CHANNELS, INPUT_CHANNELS, 3, 3], INPUT_CHANNELS * 9, true, rng);
        let conv_in_sn = SpectralState::new(FEATURE_CHANNELS, WeightLayout::Conv, rng);
        let gru1 = random_gates(FEATURE_CHANNELS, rng);
        let conv_up = uniform_conv([HIDDEN_CHANNELS, FEATURE_CHANNELS, 3, 3], FEATURE_CHANNELS * 9, false, rng);
        let conv_up_sn = SpectralState::new(FEATURE_CHANNELS, WeightLayout::Transposed, rng);
        let gru2 = random_gates(FEATURE_CHANNELS, rng);
        let conv_out = uniform_conv([STATE_CHANNELS, HIDDEN_CHANNELS, 3, 3], HIDDEN_CHANNELS * 9, false, rng);
        RimWeights {
            conv_in,
            conv_in_sn,
            gru1,
            conv_up,
            conv_up_sn,
            gru2,
            conv_out,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters in [`PARAMETER_NAMES`] order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::with_capacity(PARAMETER_NAMES.len());
        out.push(&self.conv_in.weight);
        out.extend(self.conv_in.bias.as_ref());
        push_gates(&mut out, &self.gru1);
        out.push(&self.conv_up.weight);
        push_gates(&mut out, &self.gru2);
        out.push(&self.conv_out.weight);
        PARAMETER_NAMES.iter().copied().zip(out).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(PARAMETER_NAMES.len());
        out.push(&mut self.conv_in.weight);
        out.extend(self.conv_in.bias.as_mut());
        push_gates_mut(&mut out, &mut self.gru1);
        out.push(&mut self.conv_up.weight);
        push_gates_mut(&mut out, &mut self.gru2);
        out.push(&mut self.conv_out.weight);
        PARAMETER_NAMES.iter().copied().zip(out).collect()
    }

    /// Named tensors for a checkpoint, including `conv_in.sn_u` and
    /// `conv_up.sn_u`.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params()
            .into_iter()
            .map(|(n, t)| (n.to_owned(), t.clone()))
            .collect();
        for (name, sn) in [("conv_in.sn_u", &self.conv_in_sn), ("conv_up.sn_u", &self.conv_up_sn)] {
            let t = Tensor::from_vec(&[sn.u.len()], sn.u.clone()).expect("vector");
            out.push((name.to_owned(), t));
        }
        out
    }

    /// Rebuild from named tensors. Unknown names are ignored so that full
    /// training checkpoints load directly.
    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let shapes = expected_shapes();
        let get = |i: usize| -> Result<Tensor> {
            let (name, dims) = &shapes[i];
            let t = find(tensors, name)?;
            if t.dims() != dims.as_slice() {
                return Err(Error::Schema(format!(
                    "tensor {name} has shape {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
            Ok(t.clone())
        };
        let mut it = 0..;
        let mut next = || get(it.next().expect("unbounded"));
        let conv_in = ConvParams {
            weight: next()?,
            bias: Some(next()?),
        };
        let gates = |next: &mut dyn FnMut() -> Result<Tensor>| -> Result<GruGates> {
            let mut p = || -> Result<ConvParams> {
                Ok(ConvParams {
                    weight: next()?,
                    bias: Some(next()?),
                })
            };
            Ok(GruGates {
                update: p()?,
                reset: p()?,
                candidate: p()?,
            })
        };
        let gru1 = gates(&mut next)?;
        let conv_up = ConvParams {
            weight: next()?,
            bias: None,
        };
        let gru2 = gates(&mut next)?;
        let conv_out = ConvParams {
            weight: next()?,
            bias: None,
        };
        let sn = |name: &str, layout| -> Result<SpectralState> {
            let t = find(tensors, name)?;
            if t.dims() != [FEATURE_CHANNELS] {
                return Err(Error::Schema(format!(
                    "tensor {name} has shape {:?}, expected [{FEATURE_CHANNELS}]",
                    t.dims()
                )));
            }
            Ok(SpectralState {
                u: t.data().to_vec(),
                iterations_per_step: 1,
                layout,
            })
        };
        Ok(RimWeights {
            conv_in,
            conv_in_sn: sn("conv_in.sn_u", WeightLayout::Conv)?,
            gru1,
            conv_up,
            conv_up_sn: sn("conv_up.sn_u", WeightLayout::Transposed)?,
            gru2,
            conv_out,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        write_tensors(BufWriter::new(f), &self.to_tensors()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        RimWeights::from_tensors(&read_tensors(BufReader::new(f))?)
    }

    /// One power iteration on each normalized layer (a training step).
    pub fn advance_spectral(&mut self) -> Result<()> {
        self.conv_in_sn.step(&self.conv_in.weight)?;
        self.conv_up_sn.step(&self.conv_up.weight)
    }

    /// Normalized `conv_in` and `conv_up` weights with `u` frozen.
    pub fn normalized_weights(&self) -> Result<(Tensor, Tensor)> {
        Ok((
            self.conv_in_sn.normalized(&self.conv_in.weight)?,
            self.conv_up_sn.normalized(&self.conv_up.weight)?,
        ))
    }
}

fn push_gates<'a>(out: &mut Vec<&'a Tensor>, g: &'a GruGates) {
    for p in [&g.update, &g.reset, &g.candidate] {
        out.push(&p.weight);
        out.extend(p.bias.as_ref());
    }
}

fn push_gates_mut<'a>(out: &mut Vec<&'a mut Tensor>, g: &'a mut GruGates) {
    for p in [&mut g.update, &mut g.reset, &mut g.candidate] {
        out.push(&mut p.weight);
        out.extend(p.bias.as_mut());
    }
}

fn expected_shapes() -> Vec<(&'static str, Vec<usize>)> {
    let gate = vec![HIDDEN_CHANNELS, FEATURE_CHANNELS + HIDDEN_CHANNELS, 3, 3];
    let gate_bias = vec![HIDDEN_CHANNELS];
    let dims: [Vec<usize>; 16] = [
        vec![FEATURE_CHANNELS, INPUT_CHANNELS, 3, 3],
        vec![FEATURE_CHANNELS],
        gate.clone(),
        gate_bias.clone(),
        gate.clone(),
        gate_bias.clone(),
        gate.clone(),
        gate_bias.clone(),
        vec![HIDDEN_CHANNELS, FEATURE_CHANNELS, 3, 3],
        gate.clone(),
        gate_bias.clone(),
        gate.clone(),
        gate_bias.clone(),
        gate,
        gate_bias,
        vec![STATE_CHANNELS, HIDDEN_CHANNELS, 3, 3],
    ];
    PARAMETER_NAMES.iter().copied().zip(dims).collect()
}

/// The two spatial memories.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    /// `(1, 128, ceil(h/2), ceil(w/2))`
    pub h1: Tensor,
    /// `(1, 128, h, w)`
    pub h2: Tensor,
}

impl HiddenState {
    pub fn zeros(height: usize, width: usize) -> Self {
        HiddenState {
            h1: Tensor::zeros(&[1, HIDDEN_CHANNELS, height.div_ceil(2), width.div_ceil(2)]),
            h2: Tensor::zeros(&[1, HIDDEN_CHANNELS, height, width]),
        }
    }

    /// `(height, width)` of the full-resolution memory.
    pub fn dims(&self) -> (usize, usize) {
        let d = self.h2.dims();
        (d[2], d[3])
    }
}

/// Per-run iteration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterationConfig {
    pub iterations: usize,
    pub sigma: f32,
    pub gradient_variant: GradientVariant,
    /// Loss weight per iteration; empty means all ones.
    pub loss_weights: Vec<f32>,
}

impl Default for IterationConfig {
    fn default() -> Self {
        IterationConfig {
            iterations: 5,
            sigma: 1.0,
            gradient_variant: GradientVariant::Analytic,
            loss_weights: Vec::new(),
        }
    }
}

impl IterationConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        IterationConfig {
            iterations,
            ..IterationConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Parameter("iteration count must be at least 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Parameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !self.loss_weights.is_empty() && self.loss_weights.len() != self.iterations {
            return Err(Error::Parameter(format!(
                "{} loss weights given for {} iterations",
                self.loss_weights.len(),
                self.iterations
            )));
        }
        if let Some(w) = self.loss_weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::Parameter(format!("loss weights must be positive, got {w}")));
        }
        Ok(())
    }

    /// The effective per-iteration weights.
    pub fn weights(&self) -> Vec<f32> {
        if self.loss_weights.is_empty() {
            vec![1.0; self.iterations]
        } else {
            self.loss_weights.clone()
        }
    }
}

/// `x_0 .. x_T` in canonical space plus the final memories.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<MattingState>,
    pub hidden: HiddenState,
}

impl Trajectory {
    pub fn last(&self) -> &MattingState {
        self.states.last().expect("trajectory is never empty")
    }
}

pub fn to_network_space(x: &MattingState) -> Result<MattingState> {
    x.to_network_space()
}

pub fn to_canonical_space(x: &MattingState) -> Result<MattingState> {
    x.to_canonical_space()
}

fn check_step_inputs(image: &ObservedImage, x: &MattingState, h: &HiddenState) -> Result<(usize, usize)> {
    if x.space != Space::Network {
        return Err(Error::Contract("rim_step expects a network-space state".into()));
    }
    let (height, width) = x.dims()?;
    if height % 2 != 0 || width % 2 != 0 {
        return Err(Error::Contract(format!(
            "rim_step needs even spatial dimensions, got {height}x{width}; reflection-pad the input first"
        )));
    }
    if (image.height(), image.width()) != (height, width) {
        return Err(Error::Shape(format!(
            "image is {}x{} but state is {height}x{width}",
            image.height(),
            image.width()
        )));
    }
    let expect_h1 = [1, HIDDEN_CHANNELS, height / 2, width / 2];
    let expect_h2 = [1, HIDDEN_CHANNELS, height, width];
    if h.h1.dims() != expect_h1 || h.h2.dims() != expect_h2 {
        return Err(Error::Shape(format!(
            "hidden state {:?}/{:?} does not fit a {height}x{width} image",
            h.h1.dims(),
            h.h2.dims()
        )));
    }
    Ok((height, width))
}

fn tanh_in_place(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.tanh());
}

/// One network evaluation: returns the update `dx` (`(1, 7, h, w)`) and the
/// new memories. `u` vectors are frozen.
pub fn rim_step(
    image: &ObservedImage,
    x: &MattingState,
    h: &HiddenState,
    weights: &RimWeights,
    config: &IterationConfig,
) -> Result<(Tensor, HiddenState)> {
    check_step_inputs(image, x, h)?;
    let (w_in, w_up) = weights.normalized_weights()?;
    rim_step_with(image, x, h, weights, (&w_in, &w_up), config)
}

fn rim_step_with(
    image: &ObservedImage,
    x: &MattingState,
    h: &HiddenState,
    weights: &RimWeights,
    (w_in, w_up): (&Tensor, &Tensor),
    config: &IterationConfig,
) -> Result<(Tensor, HiddenState)> {
    let packed = x.packed();
    let input = {
        let feat = likelihood_features(&packed, image.tensor(), config.sigma, config.gradient_variant)?;
        Tensor::concat_channels(&[&packed, &feat])?
    };
    drop(packed);
    let mut c = conv2d_geom(&input, w_in, weights.conv_in.bias.as_ref(), CONV_IN)?;
    drop(input);
    tanh_in_place(&mut c);
    let h1 = gru_conv_cell(&c, &h.h1, &weights.gru1)?;
    drop(c);
    let mut u = conv_transpose2d_geom(&h1, w_up, None, CONV_UP, CONV_UP_OUTPUT_PADDING)?;
    tanh_in_place(&mut u);
    let h2 = gru_conv_cell(&u, &h.h2, &weights.gru2)?;
    drop(u);
    let dx = conv2d_geom(&h2, &weights.conv_out.weight, None, CONV_OUT)?;
    Ok((dx, HiddenState { h1, h2 }))
}

/// Zero the memories under a full-resolution mask `(1, 1, h, w)`.
///
/// `h2` is cleared at masked pixels and `h1` at every half-resolution cell
/// whose 2x2 footprint touches the mask.
pub fn zero_hidden(h: &HiddenState, mask: &Tensor) -> Result<HiddenState> {
    let (height, width) = h.dims();
    if mask.dims() != [1, 1, height, width] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match hidden state {height}x{width}",
            mask.dims()
        )));
    }
    let (h1h, h1w) = (h.h1.dims()[2], h.h1.dims()[3]);
    let m = mask.data();
    let mut coarse = vec![false; h1h * h1w];
    for y in 0..height {
        for x in 0..width {
            if m[y * width + x] > 0.5 {
                coarse[(y / 2) * h1w + x / 2] = true;
            }
        }
    }
    let mut out = h.clone();
    let fine: Vec<bool> = m.iter().map(|&v| v > 0.5).collect();
    for (t, sel) in [(&mut out.h2, &fine), (&mut out.h1, &coarse)] {
        for c in 0..HIDDEN_CHANNELS {
            for (v, &s) in t.plane_mut(0, c).iter_mut().zip(sel.iter()) {
                if s {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Callback invoked after iteration `t` (1-based, never after the last) on
/// the network-space state and memories.
pub type EditHook<'a> = dyn FnMut(usize, &mut MattingState, &mut HiddenState) -> Result<()> + 'a;

/// Run `config.iterations` steps from a canonical-space `x0`.
///
/// Odd image sizes are reflection-padded to even and every returned state is
/// cropped back. The hook sees the padded state.
pub fn run_inference(
    image: &ObservedImage,
    x0: &MattingState,
    weights: &RimWeights,
    config: &IterationConfig,
    mut hook: Option<&mut EditHook<'_>>,
) -> Result<Trajectory> {
    config.validate()?;
    if x0.space != Space::Canonical {
        return Err(Error::Contract("run_inference expects a canonical-space x0".into()));
    }
    let (height, width) = x0.dims()?;
    if (image.height(), image.width()) != (height, width) {
        return Err(Error::Shape(format!(
            "image is {}x{} but x0 is {height}x{width}",
            image.height(),
            image.width()
        )));
    }
    let padded = height % 2 != 0 || width % 2 != 0;
    let (work_image, work_x0) = if padded {
        let img = ObservedImage::new(pad_to_even(image.tensor()))?;
        let x = MattingState::from_packed(&pad_to_even(&x0.packed()), Space::Canonical)?;
        (img, x)
    } else {
        (image.clone(), x0.clone())
    };
    let (ph, pw) = work_x0.dims()?;
    let (w_in, w_up) = weights.normalized_weights()?;
    let mut x = work_x0.to_network_space()?;
    let mut h = HiddenState::zeros(ph, pw);
    let mut states = vec![x0.clone()];
    for t in 1..=config.iterations {
        check_step_inputs(&work_image, &x, &h)?;
        let (dx, h_next) = rim_step_with(&work_image, &x, &h, weights, (&w_in, &w_up), config)?;
        let mut packed = x.packed();
        packed.add_assign(&dx)?;
        if !packed.all_finite() || !h_next.h1.all_finite() || !h_next.h2.all_finite() {
            return Err(Error::NonFinite(format!("state diverged at iteration {t}")));
        }
        x = MattingState::from_packed(&packed, Space::Network)?;
        h = h_next;
        let canon = x.to_canonical_space()?;
        states.push(if padded { crop_state(&canon, height, width)? } else { canon });
        if t < config.iterations {
            if let Some(hook) = hook.as_mut() {
                hook(t, &mut x, &mut h)?;
            }
        }
    }
    if padded {
        h = HiddenState {
            h1: crop(&h.h1, height.div_ceil(2), width.div_ceil(2)),
            h2: crop(&h.h2, height, width),
        };
    }
    Ok(Trajectory { states, hidden: h })
}

fn crop_state(x: &MattingState, height: usize, width: usize) -> Result<MattingState> {
    MattingState::from_packed(&crop(&x.packed(), height, width), x.space)
}

/// Reflect the last row/column when the corresponding size is odd
/// (replicate for size 1).
pub fn pad_to_even(t: &Tensor) -> Tensor {
    let (n, c, h, w) = t.nchw().expect("4-d");
    let (ph, pw) = (h + h % 2, w + w % 2);
    let src_row = |y: usize| if y < h { y } else if h >= 2 { 2 * h - 2 - y } else { 0 };
    let src_col = |x: usize| if x < w { x } else if w >= 2 { 2 * w - 2 - x } else { 0 };
    let mut out = Tensor::zeros(&[n, c, ph, pw]);
    for b in 0..n {
        for ch in 0..c {
            let src = t.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..ph {
                for x in 0..pw {
                    dst[y * pw + x] = src[src_row(y) * w + src_col(x)];
                }
            }
        }
    }
    out
}

/// Top-left `height x width` window.
pub fn crop(t: &Tensor, height: usize, width: usize) -> Tensor {
    crop_window(t, 0, 0, height, width)
}

/// The `height x width` window at `(top, left)`.
pub fn crop_window(t: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Tensor {
    let (n, c, _, w) = t.nchw().expect("4-d");
    let mut out = Tensor::zeros(&[n, c, height, width]);
    for b in 0..n {
        for ch in 0..c {
            let src = t.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..height {
                let s = (top + y) * w + left;
                dst[y * width..(y + 1) * width].copy_from_slice(&src[s..s + width]);
            }
        }
    }
    out
}

/// Parameters recorded on a tape, with the normalized layers expressed
/// through differentiable scaling.
#[derive(Clone, Debug)]
pub struct RimVars {
    /// Raw parameter handles in [`PARAMETER_NAMES`] order.
    pub params: Vec<Var>,
    conv_in_w: Var,
    conv_in_b: Var,
    gru1: GruVars,
    conv_up_w: Var,
    gru2: GruVars,
    conv_out_w: Var,
}

impl RimVars {
    /// Record every parameter and the spectral scaling using the current
    /// `u` vectors.
    pub fn bind(tape: &mut Tape, weights: &RimWeights) -> Result<Self> {
        let params: Vec<Var> = weights
            .params()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        let est_in = weights.conv_in_sn.estimate(&weights.conv_in.weight)?;
        let est_up = weights.conv_up_sn.estimate(&weights.conv_up.weight)?;
        let gates = |o: usize| GruVars {
            update: (params[o], Some(params[o + 1])),
            reset: (params[o + 2], Some(params[o + 3])),
            candidate: (params[o + 4], Some(params[o + 5])),
        };
        let vars = RimVars {
            conv_in_w: tape.spectral_scale(params[0], est_in, WeightLayout::Conv),
            conv_in_b: params[1],
            gru1: gates(2),
            conv_up_w: tape.spectral_scale(params[8], est_up, WeightLayout::Transposed),
            gru2: gates(9),
            conv_out_w: params[15],
            params,
        };
        Ok(vars)
    }
}

/// Differentiable counterpart of [`rim_step`] on packed `(1, 7, h, w)`
/// network-space states. Returns `(dx, h1', h2')`.
#[allow(clippy::too_many_arguments)]
pub fn rim_step_tape(
    tape: &mut Tape,
    image: &Arc<Tensor>,
    x: Var,
    h1: Var,
    h2: Var,
    vars: &RimVars,
    config: &IterationConfig,
    detach_likelihood: bool,
) -> Result<(Var, Var, Var)> {
    let feat = if detach_likelihood {
        let v = likelihood_features(tape.value(x), image, config.sigma, config.gradient_variant)?;
        tape.constant(v)
    } else {
        tape.likelihood(x, image.clone(), config.sigma, config.gradient_variant)?
    };
    let input = tape.concat_channels(&[x, feat])?;
    let c = tape.conv2d(input, vars.conv_in_w, Some(vars.conv_in_b), CONV_IN)?;
    let c = tape.tanh(c);
    let h1 = gru_conv_cell_tape(tape, c, h1, &vars.gru1)?;
    let u = tape.conv_transpose2d(h1, vars.conv_up_w, None, CONV_UP, CONV_UP_OUTPUT_PADDING)?;
    let u = tape.tanh(u);
    let h2 = gru_conv_cell_tape(tape, u, h2, &vars.gru2)?;
    let dx = tape.conv2d(h2, vars.conv_out_w, None, CONV_OUT)?;
    Ok((dx, h1, h2))
}
