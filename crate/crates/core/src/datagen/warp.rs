//! Affine warps and resizing of foreground layers.

use rand::Rng;

use crate::numerics::Tensor;

/// Rotation, isotropic scale, horizontal shear and an optional horizontal
/// flip, all about the image centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_deg: f64,
    pub flip: bool,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        scale: 1.0,
        shear_deg: 0.0,
        flip: false,
    };

    /// Forward matrix `R * Sh * S * Flip`.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let f = if self.flip { -1.0 } else { 1.0 };
        // R * [[1, k], [0, 1]] * diag(scale * f, scale)
        let sh = [[self.scale * f, k * self.scale], [0.0, self.scale]];
        [
            [c * sh[0][0] - s * sh[1][0], c * sh[0][1] - s * sh[1][1]],
            [s * sh[0][0] + c * sh[1][0], s * sh[0][1] + c * sh[1][1]],
        ]
    }
}

/// Sample parameters uniformly from symmetric rotation/shear ranges, a
/// scale interval and a flip probability.
pub fn random_affine_params<R: Rng + ?Sized>(
    rng: &mut R,
    rotation_deg: f64,
    scale: (f64, f64),
    shear_deg: f64,
    flip_prob: f64,
) -> AffineParams {
    let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let rotation_deg = sym(rotation_deg);
    let shear_deg = sym(shear_deg);
    let scale = if scale.1 > scale.0 { rng.random_range(scale.0..=scale.1) } else { scale.0 };
    AffineParams {
        rotation_deg,
        scale,
        shear_deg,
        flip: rng.random_bool(flip_prob.clamp(0.0, 1.0)),
    }
}

/// Warp `fg` (`(1, 3, h, w)`) and `alpha` (`(1, 1, h, w)`) with bilinear
/// sampling; everything sampled from outside the frame is zero.
pub fn warp_affine(fg: &Tensor, alpha: &Tensor, params: AffineParams) -> (Tensor, Tensor) {
    let (_, _, h, w) = alpha.nchw().expect("4-d");
    let m = params.matrix();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out_fg = Tensor::zeros(fg.dims());
    let mut out_a = Tensor::zeros(alpha.dims());
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cx + inv[0][0] * dx + inv[0][1] * dy;
            let sy = cy + inv[1][0] * dx + inv[1][1] * dy;
            let p = y * w + x;
            out_a.data_mut()[p] = bilinear(alpha.data(), h, w, sx, sy);
            for c in 0..3 {
                out_fg.data_mut()[c * hw + p] = bilinear(&fg.data()[c * hw..(c + 1) * hw], h, w, sx, sy);
            }
        }
    }
    (out_fg, out_a)
}

fn bilinear(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let at = |xi: f64, yi: f64| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    let (a, b) = (at(x0, y0), at(x0 + 1.0, y0));
    let (c, d) = (at(x0, y0 + 1.0), at(x0 + 1.0, y0 + 1.0));
    if fx == 0.0 && fy == 0.0 {
        return a;
    }
    let top = a * (1.0 - fx) + b * fx;
    let bottom = c * (1.0 - fx) + d * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize of every plane with half-pixel centres.
pub fn resize(t: &Tensor, height: usize, width: usize) -> Tensor {
    let (n, c, h, w) = t.nchw().expect("4-d");
    if (h, w) == (height, width) {
        return t.clone();
    }
    let mut out = Tensor::zeros(&[n, c, height, width]);
    let (sy, sx) = (h as f64 / height as f64, w as f64 / width as f64);
    for b in 0..n {
        for ch in 0..c {
            let src = t.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..height {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                for x in 0..width {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
                    let top = src[y0 * w + x0] * (1.0 - ax) + src[y0 * w + x1] * ax;
                    let bottom = src[y1 * w + x0] * (1.0 - ax) + src[y1 * w + x1] * ax;
                    dst[y * width + x] = top * (1.0 - ay) + bottom * ay;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::uniform(&[1, 3, h, w], 1.0, &mut rng).map(f32::abs),
            Tensor::uniform(&[1, 1, h, w], 1.0, &mut rng).map(f32::abs),
        )
    }

    #[test]
    fn identity_is_exact() {
        let (f, a) = random_layer(9, 12, 1);
        let (f2, a2) = warp_affine(&f, &a, AffineParams::IDENTITY);
        assert!(f2.max_abs_diff(&f).unwrap() <= 1e-6);
        assert!(a2.max_abs_diff(&a).unwrap() <= 1e-6);
    }

    #[test]
    fn flip_is_an_involution() {
        let (f, a) = random_layer(10, 7, 2);
        let flip = AffineParams {
            flip: true,
            ..AffineParams::IDENTITY
        };
        let (f1, a1) = warp_affine(&f, &a, flip);
        assert_ne!(a1, a);
        let (f2, a2) = warp_affine(&f1, &a1, flip);
        assert!(f2.max_abs_diff(&f).unwrap() <= 1e-6);
        assert!(a2.max_abs_diff(&a).unwrap() <= 1e-6);
    }

    #[test]
    fn quarter_turn_preserves_centred_square() {
        let n = 21;
        let mut a = Tensor::zeros(&[1, 1, n, n]);
        for y in 6..15 {
            for x in 6..15 {
                a.data_mut()[y * n + x] = 1.0;
            }
        }
        let f = Tensor::zeros(&[1, 3, n, n]);
        let (_, r) = warp_affine(
            &f,
            &a,
            AffineParams {
                rotation_deg: 90.0,
                ..AffineParams::IDENTITY
            },
        );
        assert!(r.max_abs_diff(&a).unwrap() < 1e-5);
    }

    #[test]
    fn out_of_frame_is_transparent() {
        let a = Tensor::full(&[1, 1, 8, 8], 1.0);
        let f = Tensor::full(&[1, 3, 8, 8], 0.5);
        let (_, r) = warp_affine(
            &f,
            &a,
            AffineParams {
                scale: 0.5,
                ..AffineParams::IDENTITY
            },
        );
        assert_eq!(r.data()[0], 0.0);
        assert_eq!(r.data()[4 * 8 + 4], 1.0);
    }

    #[test]
    fn resize_keeps_constants() {
        let t = Tensor::full(&[1, 2, 5, 7], 0.25);
        let r = resize(&t, 12, 3);
        assert_eq!(r.dims(), [1, 2, 12, 3]);
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-7));
    }
}
