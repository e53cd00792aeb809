//! RGB/HSV conversion and HSV jitter.

use rand::Rng;

use crate::numerics::Tensor;

/// `(h, s, v)` with hue in `[0, 1)`.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h.rem_euclid(1.0), s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Jitter amounts: hue shift as a fraction of the circle, saturation and
/// value as relative scale changes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsvShift {
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
}

impl HsvShift {
    pub const NONE: HsvShift = HsvShift {
        hue: 0.0,
        saturation: 0.0,
        value: 0.0,
    };

    pub fn random<R: Rng + ?Sized>(rng: &mut R, hue: f64, saturation: f64, value: f64) -> Self {
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        HsvShift {
            hue: sym(hue),
            saturation: sym(saturation),
            value: sym(value),
        }
    }
}

/// Apply `shift` to a `(1, 3, h, w)` RGB tensor; output clamped to `[0, 1]`.
pub fn apply_hsv_shift(image: &Tensor, shift: HsvShift) -> Tensor {
    let mut out = image.clone();
    if shift == HsvShift::NONE {
        return out;
    }
    let hw = image.len() / 3;
    let d = out.data_mut();
    for p in 0..hw {
        let rgb = [d[p] as f64, d[hw + p] as f64, d[2 * hw + p] as f64];
        let [h, s, v] = rgb_to_hsv(rgb);
        let hsv = [
            h + shift.hue,
            (s * (1.0 + shift.saturation)).clamp(0.0, 1.0),
            (v * (1.0 + shift.value)).clamp(0.0, 1.0),
        ];
        let rgb = hsv_to_rgb(hsv);
        for c in 0..3 {
            d[c * hw + p] = (rgb[c] as f32).clamp(0.0, 1.0);
        }
    }
    out
}
