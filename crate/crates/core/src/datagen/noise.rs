//! Lattice value noise and fractal sums of it.

use rand::Rng;

/// Random values on a square lattice with quintic interpolation.
pub struct ValueNoise {
    grid: Vec<f32>,
    cols: usize,
    cell: f32,
}

impl ValueNoise {
    /// Covers `[0, width] x [0, height]` with lattice spacing `cell`.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, cell: f32) -> Self {
        let cell = cell.max(1.0);
        let cols = (width as f32 / cell).ceil() as usize + 2;
        let rows = (height as f32 / cell).ceil() as usize + 2;
        let grid = (0..cols * rows).map(|_| rng.random::<f32>()).collect();
        ValueNoise { grid, cols, cell }
    }

    /// Value in `[0, 1]` at pixel coordinates inside the covered area.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let (gx, gy) = (x.max(0.0) / self.cell, y.max(0.0) / self.cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (fade(gx - ix as f32), fade(gy - iy as f32));
        let rows = self.grid.len() / self.cols;
        let (ix, iy) = (ix.min(self.cols - 2), iy.min(rows - 2));
        let at = |c: usize, r: usize| self.grid[r * self.cols + c];
        let top = at(ix, iy) + (at(ix + 1, iy) - at(ix, iy)) * fx;
        let bottom = at(ix, iy + 1) + (at(ix + 1, iy + 1) - at(ix, iy + 1)) * fx;
        top + (bottom - top) * fy
    }
}

fn fade(t: f32) -> f32 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Octave sum with halving cell size and amplitude, rescaled into `[0, 1]`.
pub fn fbm<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, cell: f32, octaves: usize) -> Vec<f32> {
    let layers: Vec<(ValueNoise, f32)> = (0..octaves.max(1))
        .map(|o| {
            let scale = 0.5f32.powi(o as i32);
            (ValueNoise::new(rng, width, height, cell * scale), scale)
        })
        .collect();
    let norm: f32 = layers.iter().map(|l| l.1).sum();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let s: f32 = layers.iter().map(|(n, a)| a * n.sample(x as f32, y as f32)).sum();
            out.push((s / norm).clamp(0.0, 1.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_is_bounded_and_continuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = ValueNoise::new(&mut rng, 64, 48, 8.0);
        let mut prev = n.sample(0.0, 10.0);
        for i in 1..640 {
            let v = n.sample(i as f32 * 0.1, 10.0);
            assert!((0.0..=1.0).contains(&v));
            assert!((v - prev).abs() < 0.05);
            prev = v;
        }
        let f = fbm(&mut rng, 32, 32, 8.0, 3);
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
