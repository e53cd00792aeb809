//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and the backward pass is a single reverse sweep.

use std::sync::Arc;

use crate::compositing::{likelihood_features, likelihood_features_backward, GradientVariant};
use crate::error::{Error, Result};
use crate::numerics::conv::{
    conv2d_geom, conv_backward_input_image, conv_backward_weight_image, conv_forward_image,
    conv_transpose2d_geom, ConvGeometry, WeightMatrix,
};
use crate::numerics::spectral::{outer_in_layout, SpectralEstimate, WeightLayout};
use crate::numerics::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f32 },
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Sum(Var),
    MaskedL1Mean { x: Var, target: Arc<Tensor>, mask: Arc<Tensor>, count: usize },
    SpectralScale { w: Var, est: SpectralEstimate, layout: WeightLayout },
    Likelihood { x: Var, image: Arc<Tensor>, sigma: f32, variant: GradientVariant },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::SliceChannels { x, .. }
            | Op::Sum(x)
            | Op::MaskedL1Mean { x, .. }
            | Op::Likelihood { x, .. } => vec![*x],
            Op::SpectralScale { w, .. } => vec![*w],
            Op::Concat(parts) => parts.clone(),
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// A recording of differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let v = self.value(x).map(|t| scale * t + shift);
        self.push(v, Op::Affine { x, scale })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f32::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_channels(&tensors)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_channels(start, len)?;
        Ok(self.push(v, Op::SliceChannels { x, start }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let v = conv2d_geom(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        output_padding: usize,
    ) -> Result<Var> {
        let v = conv_transpose2d_geom(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geom,
            output_padding,
        )?;
        Ok(self.push(v, Op::ConvTranspose2d { x, w, b, geom }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean absolute error over masked pixels, summed across channels.
    ///
    /// `mask` is `(n, 1, h, w)` with entries in {0, 1}; the divisor is the
    /// number of masked pixels.
    pub fn masked_l1_mean(&mut self, x: Var, target: Arc<Tensor>, mask: Arc<Tensor>) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_same_dims(&target, "masked_l1_mean")?;
        let (n, c, h, w) = xv.nchw()?;
        if mask.dims() != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "masked_l1_mean: mask {:?} does not match {:?}",
                mask.dims(),
                xv.dims()
            )));
        }
        let count = mask.data().iter().filter(|&&m| m > 0.5).count();
        if count == 0 {
            return Err(Error::Parameter("masked_l1_mean: empty mask".into()));
        }
        let hw = h * w;
        let mut acc = 0.0f64;
        for b in 0..n {
            let m = &mask.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let xs = &xv.data()[base..base + hw];
                let ts = &target.data()[base..base + hw];
                for i in 0..hw {
                    if m[i] > 0.5 {
                        acc += (xs[i] - ts[i]).abs() as f64;
                    }
                }
            }
        }
        let v = Tensor::scalar((acc / count as f64) as f32);
        Ok(self.push(
            v,
            Op::MaskedL1Mean {
                x,
                target,
                mask,
                count,
            },
        ))
    }

    /// `w / sigma` with `u`, `v` held constant.
    pub fn spectral_scale(&mut self, w: Var, est: SpectralEstimate, layout: WeightLayout) -> Var {
        let s = est.sigma.max(crate::numerics::spectral::SIGMA_FLOOR);
        let v = self.value(w).map(|x| x / s);
        self.push(v, Op::SpectralScale { w, est, layout })
    }

    /// Likelihood-gradient features of a network-space state.
    pub fn likelihood(
        &mut self,
        x: Var,
        image: Arc<Tensor>,
        sigma: f32,
        variant: GradientVariant,
    ) -> Result<Var> {
        let v = likelihood_features(self.value(x), &image, sigma, variant)?;
        Ok(self.push(
            v,
            Op::Likelihood {
                x,
                image,
                sigma,
                variant,
            },
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_len = self.value(root).len();
        if root_len != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got {root_len} values"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut seed = self.value(root).clone();
        seed.data_mut()[0] = 1.0;
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |g, y| g * y)?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |g, x| g * x)?)?;
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate(grads, *x, g.map(|v| v * s))?;
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Tanh(x) => {
                let d = g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).dims()[1];
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.slice_channels(start, c)?)?;
                    }
                    start += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let src = self.value(*x);
                let (n, c, h, w) = src.nchw()?;
                let len = g.dims()[1];
                let hw = h * w;
                let mut d = Tensor::zeros(src.dims());
                for b in 0..n {
                    let dst = (b * c + start) * hw;
                    let from = b * len * hw;
                    d.data_mut()[dst..dst + len * hw]
                        .copy_from_slice(&g.data()[from..from + len * hw]);
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, h, wd) = xv.nchw()?;
                let (_, o, ho, wo) = g.nchw()?;
                let kdim = c * geom.kernel * geom.kernel;
                let wm = WeightMatrix::dense(wv.data(), o, kdim);
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xv.dims());
                    for bi in 0..n {
                        conv_backward_input_image(
                            &g.data()[bi * o * ho * wo..(bi + 1) * o * ho * wo],
                            (ho, wo),
                            wm,
                            *geom,
                            (h, wd),
                            &mut dx.data_mut()[bi * c * h * wd..(bi + 1) * c * h * wd],
                        );
                    }
                    self.accumulate(grads, *x, dx)?;
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(wv.dims());
                    for bi in 0..n {
                        conv_backward_weight_image(
                            &xv.data()[bi * c * h * wd..(bi + 1) * c * h * wd],
                            c,
                            (h, wd),
                            &g.data()[bi * o * ho * wo..(bi + 1) * o * ho * wo],
                            o,
                            (ho, wo),
                            *geom,
                            dw.data_mut(),
                        );
                    }
                    self.accumulate(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.accumulate(grads, *b, channel_sums(g, self.value(*b).dims())?)?;
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                // x: (n, cin, hy, wy); weight (cin, cout, k, k); g: (n, cout, H, W)
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, cin, hy, wy) = xv.nchw()?;
                let (_, cout, ho, wo) = g.nchw()?;
                let kdim = cout * geom.kernel * geom.kernel;
                let wm = WeightMatrix::dense(wv.data(), cin, kdim);
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xv.dims());
                    for bi in 0..n {
                        let gs = &g.data()[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
                        conv_forward_image(
                            &[(gs, cout)],
                            (ho, wo),
                            wm,
                            None,
                            *geom,
                            (hy, wy),
                            &mut dx.data_mut()[bi * cin * hy * wy..(bi + 1) * cin * hy * wy],
                            false,
                        );
                    }
                    self.accumulate(grads, *x, dx)?;
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(wv.dims());
                    for bi in 0..n {
                        conv_backward_weight_image(
                            &g.data()[bi * cout * ho * wo..(bi + 1) * cout * ho * wo],
                            cout,
                            (ho, wo),
                            &xv.data()[bi * cin * hy * wy..(bi + 1) * cin * hy * wy],
                            cin,
                            (hy, wy),
                            *geom,
                            dw.data_mut(),
                        );
                    }
                    self.accumulate(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.accumulate(grads, *b, channel_sums(g, self.value(*b).dims())?)?;
                    }
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).dims(), s))?;
            }
            Op::MaskedL1Mean {
                x,
                target,
                mask,
                count,
            } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.nchw()?;
                let hw = h * w;
                let scale = g.item() / *count as f32;
                let mut d = Tensor::zeros(xv.dims());
                for b in 0..n {
                    let m = &mask.data()[b * hw..(b + 1) * hw];
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in 0..hw {
                            if m[i] > 0.5 {
                                let diff = xv.data()[base + i] - target.data()[base + i];
                                d.data_mut()[base + i] = if diff > 0.0 {
                                    scale
                                } else if diff < 0.0 {
                                    -scale
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::SpectralScale { w, est, layout } => {
                let wv = self.value(*w);
                let s = est.sigma.max(crate::numerics::spectral::SIGMA_FLOOR);
                let inner = g.dot(wv)? as f32;
                let outer = outer_in_layout(*layout, wv.dims(), &est.u, &est.v);
                let mut d = g.map(|v| v / s);
                for (dv, ov) in d.data_mut().iter_mut().zip(outer) {
                    *dv -= inner / (s * s) * ov;
                }
                self.accumulate(grads, *w, d)?;
            }
            Op::Likelihood {
                x,
                image,
                sigma,
                variant,
            } => {
                let d = likelihood_features_backward(self.value(*x), image, *sigma, *variant, g)?;
                self.accumulate(grads, *x, d)?;
            }
        }
        Ok(())
    }
}

/// Sum a `(n, c, h, w)` gradient over everything but the channel axis.
fn channel_sums(g: &Tensor, dims: &[usize]) -> Result<Tensor> {
    let (n, c, h, w) = g.nchw()?;
    let hw = h * w;
    let mut out = vec![0.0f32; c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (b * c + ch) * hw;
            *o += g.data()[base..base + hw].iter().sum::<f32>();
        }
    }
    Tensor::from_vec(dims, out)
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
