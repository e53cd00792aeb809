//! Convolutional GRU cell.
//!
//! ```text
//! z  = sigmoid(conv_z([x, h]))
//! r  = sigmoid(conv_r([x, h]))
//! h~ = tanh(conv_h([x, r * h]))
//! h' = (1 - z) * h + z * h~
//! ```
//! All gate convolutions are 3x3 with padding 1.

use crate::error::{Error, Result};
use crate::numerics::autodiff::{sigmoid, Tape, Var};
use crate::numerics::conv::{conv_forward_image, ConvGeometry, WeightMatrix};
use crate::numerics::Tensor;

pub const GATE_GEOMETRY: ConvGeometry = ConvGeometry::new(3, 1, 1);

/// Weight and optional bias of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvParams {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

/// Update, reset and candidate gate parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GruGates {
    pub update: ConvParams,
    pub reset: ConvParams,
    pub candidate: ConvParams,
}

impl GruGates {
    pub fn hidden_channels(&self) -> usize {
        self.update.weight.dims()[0]
    }

    pub fn input_channels(&self) -> usize {
        self.update.weight.dims()[1] - self.hidden_channels()
    }

    pub fn param_count(&self) -> usize {
        self.update.param_count() + self.reset.param_count() + self.candidate.param_count()
    }

    fn validate(&self, x: &Tensor, h: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (n, cx, hh, ww) = x.nchw()?;
        let (hn, ch, h2, w2) = h.nchw()?;
        if (hn, h2, w2) != (n, hh, ww) {
            return Err(Error::Shape(format!(
                "gru: input {:?} and hidden {:?} disagree spatially",
                x.dims(),
                h.dims()
            )));
        }
        for gate in [&self.update, &self.reset, &self.candidate] {
            let d = gate.weight.dims();
            if d != [ch, cx + ch, 3, 3] {
                return Err(Error::Shape(format!(
                    "gru: gate weight {d:?} incompatible with input {cx} / hidden {ch} channels"
                )));
            }
        }
        Ok((n, cx, ch, hh * ww))
    }
}

/// One GRU update on plain tensors.
///
/// An all-zero hidden state skips the hidden-channel half of the gate
/// convolutions, which is exact up to summation order.
pub fn gru_conv_cell(x: &Tensor, h: &Tensor, gates: &GruGates) -> Result<Tensor> {
    let (n, cx, ch, hw) = gates.validate(x, h)?;
    let (_, _, height, width) = x.nchw()?;
    let mut out = Tensor::zeros(h.dims());
    let kdim_full = (cx + ch) * 9;
    for b in 0..n {
        let xs = &x.data()[b * cx * hw..(b + 1) * cx * hw];
        let hs = &h.data()[b * ch * hw..(b + 1) * ch * hw];
        let h_is_zero = hs.iter().all(|&v| v == 0.0);
        let gate_conv = |params: &ConvParams, second: Option<&[f32]>, out: &mut [f32]| {
            let (sources, cols): (Vec<(&[f32], usize)>, usize) = match second {
                Some(s) => (vec![(xs, cx), (s, ch)], kdim_full),
                None => (vec![(xs, cx)], cx * 9),
            };
            let wm = WeightMatrix {
                data: params.weight.data(),
                rows: ch,
                cols,
                row_stride: kdim_full,
                col_offset: 0,
            };
            conv_forward_image(
                &sources,
                (height, width),
                wm,
                params.bias.as_ref().map(|t| t.data()),
                GATE_GEOMETRY,
                (height, width),
                out,
                false,
            );
        };
        let hidden = if h_is_zero { None } else { Some(hs) };

        let mut z = vec![0.0f32; ch * hw];
        gate_conv(&gates.update, hidden, &mut z);
        z.iter_mut().for_each(|v| *v = sigmoid(*v));

        let dst = &mut out.data_mut()[b * ch * hw..(b + 1) * ch * hw];
        let rh = if h_is_zero {
            None
        } else {
            let mut r = vec![0.0f32; ch * hw];
            gate_conv(&gates.reset, hidden, &mut r);
            for (rv, &hv) in r.iter_mut().zip(hs) {
                *rv = sigmoid(*rv) * hv;
            }
            Some(r)
        };
        gate_conv(&gates.candidate, rh.as_deref(), dst);
        drop(rh);
        for ((o, &zv), &hv) in dst.iter_mut().zip(&z).zip(hs) {
            let cand = o.tanh();
            *o = (1.0 - zv) * hv + zv * cand;
        }
    }
    Ok(out)
}

/// Gate parameters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub update: (Var, Option<Var>),
    pub reset: (Var, Option<Var>),
    pub candidate: (Var, Option<Var>),
}

impl GruVars {
    pub fn bind(tape: &mut Tape, gates: &GruGates) -> Self {
        let mut bind = |p: &ConvParams| (tape.param(p.weight.clone()), p.bias.clone().map(|b| tape.param(b)));
        GruVars {
            update: bind(&gates.update),
            reset: bind(&gates.reset),
            candidate: bind(&gates.candidate),
        }
    }
}

/// Differentiable GRU update.
pub fn gru_conv_cell_tape(tape: &mut Tape, x: Var, h: Var, gates: &GruVars) -> Result<Var> {
    let xh = tape.concat_channels(&[x, h])?;
    let zp = tape.conv2d(xh, gates.update.0, gates.update.1, GATE_GEOMETRY)?;
    let z = tape.sigmoid(zp);
    let rp = tape.conv2d(xh, gates.reset.0, gates.reset.1, GATE_GEOMETRY)?;
    let r = tape.sigmoid(rp);
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat_channels(&[x, rh])?;
    let cp = tape.conv2d(xrh, gates.candidate.0, gates.candidate.1, GATE_GEOMETRY)?;
    let cand = tape.tanh(cp);
    let keep = tape.affine(z, -1.0, 1.0);
    let kept = tape.mul(keep, h)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(kept, fresh)
}
