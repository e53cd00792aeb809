//! The compositing forward model `I = alpha * F + (1 - alpha) * B`, its
//! Gaussian log-likelihood, the likelihood gradient, and state
//! initialization from a trimap or an initial alpha.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Value range a [`MattingState`] lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Space {
    /// `[0, 1]` per channel.
    Canonical,
    /// `2x - 1`, unclamped between iterations.
    Network,
}

/// An observed RGB image in `[0, 1]`, stored as `(1, 3, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedImage(Tensor);

impl ObservedImage {
    pub fn new(t: Tensor) -> Result<Self> {
        let (n, c, _, _) = t.nchw()?;
        if n != 1 || c != 3 {
            return Err(Error::Shape(format!(
                "observed image must be (1, 3, h, w), got {:?}",
                t.dims()
            )));
        }
        let bad = t
            .data()
            .iter()
            .filter(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
            .count();
        if bad > 0 {
            return Err(Error::Validation(format!(
                "{bad} image values outside [0, 1]"
            )));
        }
        Ok(ObservedImage(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }
}

/// Per-pixel trimap label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrimapLabel {
    Background,
    Unknown,
    Foreground,
}

impl TrimapLabel {
    /// Decode an 8-bit gray value with tolerance bands: 0..=25 background,
    /// 230..=255 foreground, anything else unknown.
    pub fn from_gray(v: u8) -> Self {
        match v {
            0..=25 => TrimapLabel::Background,
            230..=255 => TrimapLabel::Foreground,
            _ => TrimapLabel::Unknown,
        }
    }

    pub fn to_gray(self) -> u8 {
        match self {
            TrimapLabel::Background => 0,
            TrimapLabel::Unknown => 128,
            TrimapLabel::Foreground => 255,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trimap {
    width: usize,
    height: usize,
    labels: Vec<TrimapLabel>,
}

impl Trimap {
    pub fn new(width: usize, height: usize, labels: Vec<TrimapLabel>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "trimap {width}x{height} needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(Trimap {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, label: TrimapLabel) -> Self {
        Trimap {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[TrimapLabel] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> TrimapLabel {
        self.labels[y * self.width + x]
    }

    /// `(1, 1, h, w)` indicator of the unknown region.
    pub fn unknown_mask(&self) -> Tensor {
        let data = self
            .labels
            .iter()
            .map(|&l| if l == TrimapLabel::Unknown { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(&[1, 1, self.height, self.width], data).expect("sized")
    }

    pub fn count(&self, label: TrimapLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// The 7-channel solution `[F, B, alpha]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MattingState {
    pub space: Space,
    /// `(1, 3, h, w)`
    pub fg: Tensor,
    /// `(1, 3, h, w)`
    pub bg: Tensor,
    /// `(1, 1, h, w)`
    pub alpha: Tensor,
}

impl MattingState {
    pub fn new(space: Space, fg: Tensor, bg: Tensor, alpha: Tensor) -> Result<Self> {
        let s = MattingState {
            space,
            fg,
            bg,
            alpha,
        };
        s.dims()?;
        Ok(s)
    }

    /// `(height, width)` after checking the three maps agree.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let (n, c, h, w) = self.fg.nchw()?;
        if n != 1 || c != 3 || self.bg.dims() != self.fg.dims() || self.alpha.dims() != [1, 1, h, w]
        {
            return Err(Error::Shape(format!(
                "state maps disagree: fg {:?}, bg {:?}, alpha {:?}",
                self.fg.dims(),
                self.bg.dims(),
                self.alpha.dims()
            )));
        }
        Ok((h, w))
    }

    /// Pack as a `(1, 7, h, w)` tensor in `[F, B, alpha]` channel order.
    pub fn packed(&self) -> Tensor {
        Tensor::concat_channels(&[&self.fg, &self.bg, &self.alpha]).expect("validated state")
    }

    pub fn from_packed(t: &Tensor, space: Space) -> Result<Self> {
        let (n, c, _, _) = t.nchw()?;
        if n != 1 || c != 7 {
            return Err(Error::Shape(format!(
                "packed state must be (1, 7, h, w), got {:?}",
                t.dims()
            )));
        }
        MattingState::new(
            space,
            t.slice_channels(0, 3)?,
            t.slice_channels(3, 3)?,
            t.slice_channels(6, 1)?,
        )
    }

    fn expect_space(&self, space: Space, what: &str) -> Result<()> {
        if self.space != space {
            return Err(Error::Contract(format!(
                "{what} expects a {space:?}-space state, got {:?}",
                self.space
            )));
        }
        Ok(())
    }

    /// `x -> 2x - 1` on all seven channels.
    pub fn to_network_space(&self) -> Result<MattingState> {
        self.expect_space(Space::Canonical, "to_network_space")?;
        let f = |v: f32| 2.0 * v - 1.0;
        Ok(MattingState {
            space: Space::Network,
            fg: self.fg.map(f),
            bg: self.bg.map(f),
            alpha: self.alpha.map(f),
        })
    }

    /// `x -> (x + 1) / 2`, clamped into `[0, 1]`.
    pub fn to_canonical_space(&self) -> Result<MattingState> {
        self.expect_space(Space::Network, "to_canonical_space")?;
        let f = |v: f32| ((v + 1.0) * 0.5).clamp(0.0, 1.0);
        Ok(MattingState {
            space: Space::Canonical,
            fg: self.fg.map(f),
            bg: self.bg.map(f),
            alpha: self.alpha.map(f),
        })
    }
}

/// Which formula the likelihood gradient follows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientVariant {
    /// The derivative of the Gaussian log-likelihood.
    #[default]
    Analytic,
    /// The published printed expression, including its sign pattern and
    /// absolute-value channel sum.
    PaperVerbatim,
}

impl std::str::FromStr for GradientVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(GradientVariant::Analytic),
            "paper_verbatim" | "paper-verbatim" | "verbatim" => Ok(GradientVariant::PaperVerbatim),
            other => Err(Error::Parameter(format!("unknown gradient variant {other:?}"))),
        }
    }
}

/// Gradient of the log-likelihood with respect to `F`, `B` and `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodGradient {
    pub d_fg: Tensor,
    pub d_bg: Tensor,
    pub d_alpha: Tensor,
    pub sigma: f32,
}

impl LikelihoodGradient {
    /// `(1, 7, h, w)` in the state's channel order.
    pub fn packed(&self) -> Tensor {
        Tensor::concat_channels(&[&self.d_fg, &self.d_bg, &self.d_alpha]).expect("consistent")
    }
}

fn check_sigma(sigma: f32) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

fn check_pair(image: &ObservedImage, state: &MattingState) -> Result<(usize, usize)> {
    let (h, w) = state.dims()?;
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "image is {}x{} but state is {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    Ok((h, w))
}

/// `alpha * F + (1 - alpha) * B` of a canonical-space state.
pub fn composite(state: &MattingState) -> Result<Tensor> {
    state.expect_space(Space::Canonical, "composite")?;
    composite_over(state, &state.bg)
}

/// Composite the state's foreground over an arbitrary `(1, 3, h, w)`
/// background.
pub fn composite_over(state: &MattingState, background: &Tensor) -> Result<Tensor> {
    let (h, w) = state.dims()?;
    state.fg.expect_same_dims(background, "composite background")?;
    let hw = h * w;
    let a = state.alpha.data();
    let mut out = Tensor::zeros(state.fg.dims());
    for c in 0..3 {
        let f = state.fg.plane(0, c);
        let b = background.plane(0, c);
        for (i, o) in out.plane_mut(0, c).iter_mut().enumerate().take(hw) {
            *o = a[i] * f[i] + (1.0 - a[i]) * b[i];
        }
    }
    Ok(out)
}

/// `I - (alpha * F + (1 - alpha) * B)`.
pub fn residual(image: &ObservedImage, state: &MattingState) -> Result<Tensor> {
    check_pair(image, state)?;
    let comp = composite_over(state, &state.bg)?;
    image.tensor().zip_map(&comp, |i, c| i - c)
}

/// `-||R||^2 / sigma^2` summed over pixels and channels.
pub fn log_likelihood(image: &ObservedImage, state: &MattingState, sigma: f32) -> Result<f64> {
    check_sigma(sigma)?;
    let (h, w) = check_pair(image, state)?;
    let a = state.alpha.data();
    let mut acc = 0.0f64;
    for c in 0..3 {
        let (i, f, b) = (
            image.tensor().plane(0, c),
            state.fg.plane(0, c),
            state.bg.plane(0, c),
        );
        for p in 0..h * w {
            let av = a[p] as f64;
            let r = i[p] as f64 - av * f[p] as f64 - (1.0 - av) * b[p] as f64;
            acc += r * r;
        }
    }
    Ok(-acc / (sigma as f64 * sigma as f64))
}

/// Per-pixel gradient: returns `(dF, dB, dAlpha)`.
fn pixel_gradient(
    i: [f64; 3],
    f: [f64; 3],
    b: [f64; 3],
    a: f64,
    sigma: f64,
    variant: GradientVariant,
) -> ([f64; 3], [f64; 3], f64) {
    let inv = 1.0 / (sigma * sigma);
    let mut df = [0.0; 3];
    let mut db = [0.0; 3];
    let mut da = 0.0;
    for c in 0..3 {
        match variant {
            GradientVariant::Analytic => {
                let r = i[c] - a * f[c] - (1.0 - a) * b[c];
                df[c] = 2.0 * inv * a * r;
                db[c] = 2.0 * inv * (1.0 - a) * r;
                da += 2.0 * inv * (f[c] - b[c]) * r;
            }
            GradientVariant::PaperVerbatim => {
                let q = i[c] - a * f[c] + b[c] - a * b[c];
                df[c] = inv * 2.0 * a * q;
                db[c] = inv * (-2.0 + 2.0 * a) * q;
                da += inv * ((2.0 * f[c] + 2.0 * b[c]) * q).abs();
            }
        }
    }
    (df, db, da)
}

/// Adjoint of [`pixel_gradient`]: given upstream gradients on
/// `(dF, dB, dAlpha)`, return gradients on `(F, B, alpha)`.
#[allow(clippy::too_many_arguments)]
fn pixel_gradient_adjoint(
    i: [f64; 3],
    f: [f64; 3],
    b: [f64; 3],
    a: f64,
    sigma: f64,
    variant: GradientVariant,
    g_f: [f64; 3],
    g_b: [f64; 3],
    g_a: f64,
) -> ([f64; 3], [f64; 3], f64) {
    let inv = 1.0 / (sigma * sigma);
    let mut out_f = [0.0; 3];
    let mut out_b = [0.0; 3];
    let mut out_a = 0.0;
    for c in 0..3 {
        match variant {
            GradientVariant::Analytic => {
                let s = 2.0 * inv;
                let r = i[c] - a * f[c] - (1.0 - a) * b[c];
                let g_r = s * (a * g_f[c] + (1.0 - a) * g_b[c] + g_a * (f[c] - b[c]));
                out_f[c] = -a * g_r + s * g_a * r;
                out_b[c] = -(1.0 - a) * g_r - s * g_a * r;
                out_a += s * r * (g_f[c] - g_b[c]) - (f[c] - b[c]) * g_r;
            }
            GradientVariant::PaperVerbatim => {
                let q = i[c] - a * f[c] + b[c] - a * b[c];
                let p = (2.0 * f[c] + 2.0 * b[c]) * q;
                let sgn = if p > 0.0 {
                    1.0
                } else if p < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let g_q = inv
                    * (2.0 * a * g_f[c]
                        + (2.0 * a - 2.0) * g_b[c]
                        + g_a * sgn * (2.0 * f[c] + 2.0 * b[c]));
                out_f[c] = -a * g_q + inv * g_a * sgn * 2.0 * q;
                out_b[c] = (1.0 - a) * g_q + inv * g_a * sgn * 2.0 * q;
                out_a += inv * 2.0 * q * (g_f[c] + g_b[c]) - (f[c] + b[c]) * g_q;
            }
        }
    }
    (out_f, out_b, out_a)
}

/// Gradient of [`log_likelihood`] with respect to the state.
pub fn likelihood_gradient(
    image: &ObservedImage,
    state: &MattingState,
    sigma: f32,
    variant: GradientVariant,
) -> Result<LikelihoodGradient> {
    check_sigma(sigma)?;
    let (h, w) = check_pair(image, state)?;
    let mut d_fg = Tensor::zeros(state.fg.dims());
    let mut d_bg = Tensor::zeros(state.bg.dims());
    let mut d_alpha = Tensor::zeros(state.alpha.dims());
    let hw = h * w;
    let (it, ft, bt, at) = (image.tensor().data(), state.fg.data(), state.bg.data(), state.alpha.data());
    for p in 0..hw {
        let get = |t: &[f32]| [t[p] as f64, t[hw + p] as f64, t[2 * hw + p] as f64];
        let (df, db, da) = pixel_gradient(get(it), get(ft), get(bt), at[p] as f64, sigma as f64, variant);
        for c in 0..3 {
            d_fg.data_mut()[c * hw + p] = df[c] as f32;
            d_bg.data_mut()[c * hw + p] = db[c] as f32;
        }
        d_alpha.data_mut()[p] = da as f32;
    }
    Ok(LikelihoodGradient {
        d_fg,
        d_bg,
        d_alpha,
        sigma,
    })
}

fn check_features_input(x: &Tensor, image: &Tensor) -> Result<(usize, usize)> {
    let (n, c, h, w) = x.nchw()?;
    if c != 7 {
        return Err(Error::Shape(format!(
            "state must have 7 channels, got {c}"
        )));
    }
    if image.dims() != [n, 3, h, w] {
        return Err(Error::Shape(format!(
            "image {:?} does not match state {:?}",
            image.dims(),
            x.dims()
        )));
    }
    Ok((n, h * w))
}

/// Likelihood gradient of a packed network-space state `(n, 7, h, w)`.
///
/// The state is mapped back through `(x + 1) / 2` without clamping and the
/// gradient is evaluated against the canonical-space image.
pub fn likelihood_features(
    x: &Tensor,
    image: &Tensor,
    sigma: f32,
    variant: GradientVariant,
) -> Result<Tensor> {
    check_sigma(sigma)?;
    let (n, hw) = check_features_input(x, image)?;
    let mut out = Tensor::zeros(x.dims());
    let canon = |v: f32| (v as f64 + 1.0) * 0.5;
    for bi in 0..n {
        let xs = &x.data()[bi * 7 * hw..(bi + 1) * 7 * hw];
        let is = &image.data()[bi * 3 * hw..(bi + 1) * 3 * hw];
        let os = &mut out.data_mut()[bi * 7 * hw..(bi + 1) * 7 * hw];
        for p in 0..hw {
            let i = [is[p] as f64, is[hw + p] as f64, is[2 * hw + p] as f64];
            let f = [canon(xs[p]), canon(xs[hw + p]), canon(xs[2 * hw + p])];
            let b = [canon(xs[3 * hw + p]), canon(xs[4 * hw + p]), canon(xs[5 * hw + p])];
            let a = canon(xs[6 * hw + p]);
            let (df, db, da) = pixel_gradient(i, f, b, a, sigma as f64, variant);
            for c in 0..3 {
                os[c * hw + p] = df[c] as f32;
                os[(3 + c) * hw + p] = db[c] as f32;
            }
            os[6 * hw + p] = da as f32;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`likelihood_features`] with respect to `x`.
pub fn likelihood_features_backward(
    x: &Tensor,
    image: &Tensor,
    sigma: f32,
    variant: GradientVariant,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (n, hw) = check_features_input(x, image)?;
    x.expect_same_dims(grad_out, "likelihood backward")?;
    let mut out = Tensor::zeros(x.dims());
    let canon = |v: f32| (v as f64 + 1.0) * 0.5;
    for bi in 0..n {
        let xs = &x.data()[bi * 7 * hw..(bi + 1) * 7 * hw];
        let gs = &grad_out.data()[bi * 7 * hw..(bi + 1) * 7 * hw];
        let is = &image.data()[bi * 3 * hw..(bi + 1) * 3 * hw];
        let os = &mut out.data_mut()[bi * 7 * hw..(bi + 1) * 7 * hw];
        for p in 0..hw {
            let i = [is[p] as f64, is[hw + p] as f64, is[2 * hw + p] as f64];
            let f = [canon(xs[p]), canon(xs[hw + p]), canon(xs[2 * hw + p])];
            let b = [canon(xs[3 * hw + p]), canon(xs[4 * hw + p]), canon(xs[5 * hw + p])];
            let a = canon(xs[6 * hw + p]);
            let g_f = [gs[p] as f64, gs[hw + p] as f64, gs[2 * hw + p] as f64];
            let g_b = [gs[3 * hw + p] as f64, gs[4 * hw + p] as f64, gs[5 * hw + p] as f64];
            let g_a = gs[6 * hw + p] as f64;
            let (of, ob, oa) =
                pixel_gradient_adjoint(i, f, b, a, sigma as f64, variant, g_f, g_b, g_a);
            // chain rule through (x + 1) / 2
            for c in 0..3 {
                os[c * hw + p] = (0.5 * of[c]) as f32;
                os[(3 + c) * hw + p] = (0.5 * ob[c]) as f32;
            }
            os[6 * hw + p] = (0.5 * oa) as f32;
        }
    }
    Ok(out)
}

/// Build the canonical-space starting state `x_0`.
///
/// With a trimap, `F` copies the image on known-foreground pixels and `B` on
/// known-background pixels. Without one, pixels where `alpha0` is exactly 1
/// or 0 serve as the respective masks. Everything else starts at zero.
pub fn init_state(
    image: &ObservedImage,
    trimap: Option<&Trimap>,
    alpha0: &Tensor,
) -> Result<MattingState> {
    let (h, w) = (image.height(), image.width());
    if alpha0.dims() != [1, 1, h, w] {
        return Err(Error::Shape(format!(
            "initial alpha {:?} does not match image {h}x{w}",
            alpha0.dims()
        )));
    }
    let bad = alpha0
        .data()
        .iter()
        .filter(|v| !(0.0..=1.0).contains(*v))
        .count();
    if bad > 0 {
        return Err(Error::Validation(format!(
            "initial alpha has {bad} pixels outside [0, 1]"
        )));
    }
    if let Some(t) = trimap {
        if (t.height(), t.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "trimap is {}x{} but image is {h}x{w}",
                t.height(),
                t.width()
            )));
        }
    }
    let hw = h * w;
    let mut fg = Tensor::zeros(&[1, 3, h, w]);
    let mut bg = Tensor::zeros(&[1, 3, h, w]);
    for p in 0..hw {
        let (is_fg, is_bg) = match trimap {
            Some(t) => (
                t.labels()[p] == TrimapLabel::Foreground,
                t.labels()[p] == TrimapLabel::Background,
            ),
            None => (alpha0.data()[p] == 1.0, alpha0.data()[p] == 0.0),
        };
        for c in 0..3 {
            let v = image.tensor().data()[c * hw + p];
            if is_fg {
                fg.data_mut()[c * hw + p] = v;
            }
            if is_bg {
                bg.data_mut()[c * hw + p] = v;
            }
        }
    }
    MattingState::new(Space::Canonical, fg, bg, alpha0.clone())
}
