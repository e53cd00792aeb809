//! Convolution kernels built on im2col + sgemm.
//!
//! Every kernel works on one image at a time and processes output rows in
//! bands so the column buffer stays bounded regardless of image size.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Column-buffer budget in floats (16 MiB).
const BAND_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
        }
    }

    /// `floor((n + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
    pub fn output_size(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        if self.stride == 0 || self.kernel == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Spatial size produced by the transposed convolution.
    pub fn transposed_output_size(&self, n: usize, output_padding: usize) -> Option<usize> {
        if n == 0 {
            return None;
        }
        ((n - 1) * self.stride + self.kernel + output_padding).checked_sub(2 * self.padding)
    }

    /// Range of output indices `o` whose input tap `o*s + kk - p` lands in `[0, n)`.
    fn valid_range(&self, kk: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        let lo = if p > kk { (p - kk).div_ceil(s) } else { 0 };
        let hi = if n + p > kk { (n - 1 + p - kk) / s + 1 } else { 0 };
        (lo.min(n_out), hi.min(n_out).max(lo.min(n_out)))
    }
}

/// A row-major matrix view into a weight buffer. `col_offset` lets a
/// caller use a contiguous subset of input channels.
#[derive(Clone, Copy)]
pub(crate) struct WeightMatrix<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_offset: usize,
}

impl<'a> WeightMatrix<'a> {
    pub fn dense(data: &'a [f32], rows: usize, cols: usize) -> Self {
        WeightMatrix {
            data,
            rows,
            cols,
            row_stride: cols,
            col_offset: 0,
        }
    }
}

/// `c = alpha * a * b + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs + 1;
    if k > 0 {
        assert!(a.len() >= extent(m, k, rsa, csa), "sgemm: a too short");
        assert!(b.len() >= extent(k, n, rsb, csb), "sgemm: b too short");
    }
    assert!(c.len() >= extent(m, n, rsc, csc), "sgemm: c too short");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn band_rows(kdim: usize, wo: usize, ho: usize) -> usize {
    (BAND_BUDGET / (kdim * wo).max(1)).clamp(1, ho.max(1))
}

/// Unfold output rows `[oy0, oy1)` of one source into `cols`, whose rows are
/// `(c, ky, kx)` triples and whose columns are output pixels.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f32],
    channels: usize,
    (h, w): (usize, usize),
    geom: ConvGeometry,
    wo: usize,
    (oy0, oy1): (usize, usize),
    cols: &mut [f32],
) {
    let k = geom.kernel;
    let s = geom.stride;
    let npx = (oy1 - oy0) * wo;
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npx..(row + 1) * npx];
                let (lo, hi) = geom.valid_range(kx, w, wo);
                for (i, oy) in (oy0..oy1).enumerate() {
                    let out = &mut dst[i * wo..(i + 1) * wo];
                    let iy = (oy * s + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    if hi > lo {
                        let ix0 = lo * s + kx - geom.padding;
                        if s == 1 {
                            out[lo..hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (j, o) in out[lo..hi].iter_mut().enumerate() {
                                *o = src_row[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into the image planes.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    channels: usize,
    (h, w): (usize, usize),
    geom: ConvGeometry,
    wo: usize,
    (oy0, oy1): (usize, usize),
    dst: &mut [f32],
) {
    let k = geom.kernel;
    let s = geom.stride;
    let npx = (oy1 - oy0) * wo;
    for c in 0..channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npx..(row + 1) * npx];
                let (lo, hi) = geom.valid_range(kx, w, wo);
                if hi <= lo {
                    continue;
                }
                for (i, oy) in (oy0..oy1).enumerate() {
                    let iy = (oy * s + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let ix0 = lo * s + kx - geom.padding;
                    for (j, v) in src[i * wo + lo..i * wo + hi].iter().enumerate() {
                        dst_row[ix0 + j * s] += v;
                    }
                }
            }
        }
    }
}

/// Forward convolution of one image whose input channels are the
/// concatenation of `sources` (each `(data, channels)`).
///
/// `out` holds `weight.rows` planes of `ho * wo`; when `accumulate` is set
/// the result is added to its contents.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward_image(
    sources: &[(&[f32], usize)],
    (h, w): (usize, usize),
    weight: WeightMatrix<'_>,
    bias: Option<&[f32]>,
    geom: ConvGeometry,
    (ho, wo): (usize, usize),
    out: &mut [f32],
    accumulate: bool,
) {
    let kk = geom.kernel * geom.kernel;
    let channels: usize = sources.iter().map(|s| s.1).sum();
    let kdim = channels * kk;
    debug_assert_eq!(kdim, weight.cols);
    let plane = ho * wo;
    let rows_per_band = band_rows(kdim, wo, ho);
    let mut cols = vec![0.0f32; kdim * rows_per_band * wo];
    let mut oy0 = 0;
    while oy0 < ho {
        let oy1 = (oy0 + rows_per_band).min(ho);
        let npx = (oy1 - oy0) * wo;
        let mut row = 0;
        for &(data, c) in sources {
            im2col(
                data,
                c,
                (h, w),
                geom,
                wo,
                (oy0, oy1),
                &mut cols[row * npx..(row + c * kk) * npx],
            );
            row += c * kk;
        }
        sgemm(
            weight.rows,
            kdim,
            npx,
            1.0,
            &weight.data[weight.col_offset..],
            (weight.row_stride, 1),
            &cols[..kdim * npx],
            (npx, 1),
            if accumulate { 1.0 } else { 0.0 },
            &mut out[oy0 * wo..],
            (plane, 1),
        );
        oy0 = oy1;
    }
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            for v in &mut out[o * plane..(o + 1) * plane] {
                *v += bv;
            }
        }
    }
}

/// Gradient w.r.t. the input of a single-source convolution, accumulated
/// into `grad_in` (`channels * h * w`).
pub(crate) fn conv_backward_input_image(
    grad_out: &[f32],
    (ho, wo): (usize, usize),
    weight: WeightMatrix<'_>,
    geom: ConvGeometry,
    (h, w): (usize, usize),
    grad_in: &mut [f32],
) {
    let kk = geom.kernel * geom.kernel;
    let kdim = weight.cols;
    let channels = kdim / kk;
    let plane = ho * wo;
    let rows_per_band = band_rows(kdim, wo, ho);
    let mut cols = vec![0.0f32; kdim * rows_per_band * wo];
    let mut oy0 = 0;
    while oy0 < ho {
        let oy1 = (oy0 + rows_per_band).min(ho);
        let npx = (oy1 - oy0) * wo;
        // dcols = W^T * dout
        sgemm(
            kdim,
            weight.rows,
            npx,
            1.0,
            &weight.data[weight.col_offset..],
            (1, weight.row_stride),
            &grad_out[oy0 * wo..],
            (plane, 1),
            0.0,
            &mut cols[..kdim * npx],
            (npx, 1),
        );
        col2im(&cols, channels, (h, w), geom, wo, (oy0, oy1), grad_in);
        oy0 = oy1;
    }
}

/// Gradient w.r.t. a dense `(rows, channels*k*k)` weight matrix, accumulated
/// into `grad_w`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_weight_image(
    input: &[f32],
    channels: usize,
    (h, w): (usize, usize),
    grad_out: &[f32],
    out_ch: usize,
    (ho, wo): (usize, usize),
    geom: ConvGeometry,
    grad_w: &mut [f32],
) {
    let kdim = channels * geom.kernel * geom.kernel;
    let plane = ho * wo;
    let rows_per_band = band_rows(kdim, wo, ho);
    let mut cols = vec![0.0f32; kdim * rows_per_band * wo];
    let mut oy0 = 0;
    while oy0 < ho {
        let oy1 = (oy0 + rows_per_band).min(ho);
        let npx = (oy1 - oy0) * wo;
        im2col(
            input,
            channels,
            (h, w),
            geom,
            wo,
            (oy0, oy1),
            &mut cols[..kdim * npx],
        );
        sgemm(
            out_ch,
            npx,
            kdim,
            1.0,
            &grad_out[oy0 * wo..],
            (plane, 1),
            &cols[..kdim * npx],
            (1, npx),
            1.0,
            grad_w,
            (kdim, 1),
        );
        oy0 = oy1;
    }
}

fn check_weight(weight: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *weight.dims() {
        [a, b, k1, k2] if k1 == k2 => Ok((a, b, k1)),
        _ => Err(Error::Shape(format!(
            "{what}: weight must be (a, b, k, k), got {:?}",
            weight.dims()
        ))),
    }
}

fn check_bias(bias: Option<&Tensor>, n: usize, what: &str) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != n {
            return Err(Error::Shape(format!(
                "{what}: bias has {} values, expected {n}",
                b.len()
            )));
        }
    }
    Ok(())
}

/// Output spatial size of [`conv2d`] after validating shapes.
pub(crate) fn conv2d_shape(
    input: &Tensor,
    weight: &Tensor,
    geom: ConvGeometry,
) -> Result<[usize; 4]> {
    let (n, c, h, w) = input.nchw()?;
    let (o, i, k) = check_weight(weight, "conv2d")?;
    if i != c {
        return Err(Error::Shape(format!(
            "conv2d: input has {c} channels but weight expects {i}"
        )));
    }
    if k != geom.kernel {
        return Err(Error::Shape(format!(
            "conv2d: kernel {k} does not match geometry {}",
            geom.kernel
        )));
    }
    let (ho, wo) = match (geom.output_size(h), geom.output_size(w)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d: kernel {k} does not fit input {h}x{w} with padding {}",
                geom.padding
            )))
        }
    };
    Ok([n, o, ho, wo])
}

/// Cross-correlation of an `(n, c, h, w)` input with an `(o, c, k, k)`
/// weight.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::Parameter("conv2d: stride must be positive".into()));
    }
    let k = weight.dims().get(2).copied().unwrap_or(0);
    let geom = ConvGeometry::new(k, stride, padding);
    conv2d_geom(input, weight, bias, geom)
}

pub(crate) fn conv2d_geom(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let dims = conv2d_shape(input, weight, geom)?;
    let [n, o, ho, wo] = dims;
    check_bias(bias, o, "conv2d")?;
    let (_, c, h, w) = input.nchw()?;
    let mut out = Tensor::zeros(&dims);
    let kdim = c * geom.kernel * geom.kernel;
    let wm = WeightMatrix::dense(weight.data(), o, kdim);
    for b in 0..n {
        let src = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let dst = &mut out.data_mut()[b * o * ho * wo..(b + 1) * o * ho * wo];
        conv_forward_image(
            &[(src, c)],
            (h, w),
            wm,
            bias.map(|t| t.data()),
            geom,
            (ho, wo),
            dst,
            false,
        );
    }
    Ok(out)
}

pub(crate) fn conv_transpose2d_shape(
    input: &Tensor,
    weight: &Tensor,
    geom: ConvGeometry,
    output_padding: usize,
) -> Result<[usize; 4]> {
    let (n, c, h, w) = input.nchw()?;
    let (i, o, k) = check_weight(weight, "conv_transpose2d")?;
    if i != c {
        return Err(Error::Shape(format!(
            "conv_transpose2d: input has {c} channels but weight expects {i}"
        )));
    }
    if k != geom.kernel {
        return Err(Error::Shape(format!(
            "conv_transpose2d: kernel {k} does not match geometry {}",
            geom.kernel
        )));
    }
    if output_padding >= geom.stride.max(1) {
        return Err(Error::Parameter(format!(
            "conv_transpose2d: output padding {output_padding} must be below stride {}",
            geom.stride
        )));
    }
    let (ho, wo) = match (
        geom.transposed_output_size(h, output_padding),
        geom.transposed_output_size(w, output_padding),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "conv_transpose2d: empty output for input {h}x{w}"
            )))
        }
    };
    Ok([n, o, ho, wo])
}

/// Transposed convolution (the adjoint of [`conv2d`] with the same
/// geometry) with an `(in, out, k, k)` weight.
pub fn conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::Parameter(
            "conv_transpose2d: stride must be positive".into(),
        ));
    }
    let k = weight.dims().get(2).copied().unwrap_or(0);
    conv_transpose2d_geom(
        input,
        weight,
        bias,
        ConvGeometry::new(k, stride, padding),
        output_padding,
    )
}

pub(crate) fn conv_transpose2d_geom(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeometry,
    output_padding: usize,
) -> Result<Tensor> {
    let dims = conv_transpose2d_shape(input, weight, geom, output_padding)?;
    let [n, o, ho, wo] = dims;
    check_bias(bias, o, "conv_transpose2d")?;
    let (_, c, h, w) = input.nchw()?;
    let mut out = Tensor::zeros(&dims);
    let kdim = o * geom.kernel * geom.kernel;
    let wm = WeightMatrix::dense(weight.data(), c, kdim);
    for b in 0..n {
        let src = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let dst = &mut out.data_mut()[b * o * ho * wo..(b + 1) * o * ho * wo];
        conv_backward_input_image(src, (h, w), wm, geom, (ho, wo), dst);
        if let Some(bias) = bias {
            let plane = ho * wo;
            for (oc, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst[oc * plane..(oc + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Seven nested loops, written independently of the im2col path.
    fn naive_conv(x: &Tensor, wt: &Tensor, bias: Option<&Tensor>, s: usize, p: usize) -> Tensor {
        let (n, c, h, w) = x.nchw().unwrap();
        let (o, _, k, _) = wt.nchw().unwrap();
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0f64; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map_or(0.0, |t| t.data()[oc] as f64);
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((b * c + ic) * h + iy as usize) * w + ix as usize];
                                    let wv = wt.data()[((oc * c + ic) * k + ky) * k + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, o, ho, wo], out.into_iter().map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn ones_sum_to_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[1, 1, 5, 7], 1.0, &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[2, 3, 8, 8], 1.0, &mut rng);
        let w = Tensor::uniform(&[4, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::uniform(&[4], 1.0, &mut rng);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let fast = conv2d(&x, &w, Some(&b), s, p).unwrap();
            let slow = naive_conv(&x, &w, Some(&b), s, p);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-5, "s={s} p={p}");
        }
    }

    #[test]
    fn transposed_doubles_spatial_size() {
        let x = Tensor::full(&[1, 1, 4, 4], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv_transpose2d(&x, &w, None, 2, 1, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 8, 8]);
    }

    #[test]
    fn transposed_zero_weight_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 2, 4, 4], 1.0, &mut rng);
        let w = Tensor::zeros(&[2, 3, 3, 3]);
        let y = conv_transpose2d(&x, &w, None, 2, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let b = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv_transpose2d(&x, &w, Some(&b), 2, 1, 1).unwrap();
        for c in 0..3 {
            assert!(y.plane(0, c).iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (h, s, p, op) in [(8, 2, 1, 1), (7, 1, 1, 0), (9, 2, 0, 0), (6, 3, 1, 2)] {
            let geom = ConvGeometry::new(3, s, p);
            let x = Tensor::uniform(&[1, 3, h, h], 1.0, &mut rng);
            let w = Tensor::uniform(&[4, 3, 3, 3], 1.0, &mut rng);
            let y_dims = conv2d_shape(&x, &w, geom).unwrap();
            let y = Tensor::uniform(&y_dims, 1.0, &mut rng);
            let lhs = conv2d(&x, &w, None, s, p).unwrap().dot(&y).unwrap();
            // (o, c, k, k) is exactly the (in, out, k, k) layout of the transpose.
            let xt = conv_transpose2d(&y, &w, None, s, p, op).unwrap();
            // output padding only appends rows/cols that conv2d never reads
            let mut cropped = Tensor::zeros(x.dims());
            for c in 0..3 {
                for r in 0..h {
                    for col in 0..h {
                        let th = xt.dims()[3];
                        cropped.plane_mut(0, c)[r * h + col] = xt.plane(0, c)[r * th + col];
                    }
                }
            }
            let rhs = x.dot(&cropped).unwrap();
            assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, 1, 1), Err(Error::Shape(_))));
        assert!(matches!(
            conv_transpose2d(&x, &w, None, 2, 1, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn banded_path_matches_single_band() {
        // Large enough that the column buffer is split into several bands.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[1, 64, 130, 70], 1.0, &mut rng);
        let w = Tensor::uniform(&[2, 64, 3, 3], 0.1, &mut rng);
        let kdim = 64 * 9;
        assert!(band_rows(kdim, 70, 130) < 130);
        let fast = conv2d(&x, &w, None, 1, 1).unwrap();
        let slow = naive_conv(&x, &w, None, 1, 1);
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-4);
    }
}
