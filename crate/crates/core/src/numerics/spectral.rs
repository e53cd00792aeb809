//! Spectral normalization by power iteration.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Smallest singular-value estimate used as a divisor.
pub const SIGMA_FLOOR: f32 = 1e-12;

/// How a 4-D weight is flattened into the `(out, rest)` matrix whose top
/// singular value is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightLayout {
    /// `(out, in, k, k)`: rows are contiguous.
    Conv,
    /// `(in, out, k, k)`: transposed-convolution weights, rows gathered
    /// across the leading axis.
    Transposed,
}

impl WeightLayout {
    fn matrix_dims(self, dims: &[usize]) -> Result<(usize, usize)> {
        let total: usize = dims.iter().product();
        let rows = match (self, dims) {
            (WeightLayout::Conv, [o, ..]) => *o,
            (WeightLayout::Transposed, [_, o, ..]) => *o,
            _ => {
                return Err(Error::Shape(format!(
                    "weight dims {dims:?} cannot be viewed as a matrix"
                )))
            }
        };
        if rows == 0 {
            return Err(Error::Shape("weight matrix has no rows".into()));
        }
        Ok((rows, total / rows))
    }

    /// Flat weight index of matrix entry `(row, col)`.
    fn index(self, dims: &[usize], row: usize, col: usize) -> usize {
        match self {
            WeightLayout::Conv => row * (dims.iter().product::<usize>() / dims[0]) + col,
            WeightLayout::Transposed => {
                let kk: usize = dims[2..].iter().product();
                let (i, r) = (col / kk, col % kk);
                (i * dims[1] + row) * kk + r
            }
        }
    }
}

/// Persisted power-iteration vector for one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    /// Unit vector of length out-channels.
    pub u: Vec<f32>,
    pub iterations_per_step: usize,
    pub layout: WeightLayout,
}

/// The quantities a normalized forward pass depends on. `u` and `v` are
/// treated as constants by the gradient.
#[derive(Clone, Debug)]
pub struct SpectralEstimate {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub sigma: f32,
}

impl SpectralState {
    pub fn new<R: Rng + ?Sized>(out_channels: usize, layout: WeightLayout, rng: &mut R) -> Self {
        let mut u: Vec<f32> = (0..out_channels)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        normalize(&mut u);
        SpectralState {
            u,
            iterations_per_step: 1,
            layout,
        }
    }

    /// Run `iterations_per_step` power iterations on `weight`, updating `u`.
    pub fn step(&mut self, weight: &Tensor) -> Result<()> {
        for _ in 0..self.iterations_per_step {
            self.power_iteration(weight)?;
        }
        Ok(())
    }

    pub fn power_iteration(&mut self, weight: &Tensor) -> Result<()> {
        let (rows, _) = self.check(weight)?;
        let mut v = self.mat_t_vec(weight, &self.u);
        if !normalize(&mut v) {
            return Ok(());
        }
        let mut u = self.mat_vec(weight, &v);
        if normalize(&mut u) {
            debug_assert_eq!(u.len(), rows);
            self.u = u;
        }
        Ok(())
    }

    /// `v = normalize(W^T u)`, `sigma = u^T W v` with `u` frozen.
    pub fn estimate(&self, weight: &Tensor) -> Result<SpectralEstimate> {
        self.check(weight)?;
        let mut v = self.mat_t_vec(weight, &self.u);
        normalize(&mut v);
        let wv = self.mat_vec(weight, &v);
        let sigma: f64 = self
            .u
            .iter()
            .zip(&wv)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        Ok(SpectralEstimate {
            u: self.u.clone(),
            v,
            sigma: sigma as f32,
        })
    }

    /// The normalized weight without touching `u` (inference).
    pub fn normalized(&self, weight: &Tensor) -> Result<Tensor> {
        let est = self.estimate(weight)?;
        let s = est.sigma.max(SIGMA_FLOOR);
        Ok(weight.map(|w| w / s))
    }

    fn check(&self, weight: &Tensor) -> Result<(usize, usize)> {
        let (rows, cols) = self.layout.matrix_dims(weight.dims())?;
        if rows != self.u.len() {
            return Err(Error::Shape(format!(
                "spectral state has {} rows, weight {:?} has {rows}",
                self.u.len(),
                weight.dims()
            )));
        }
        Ok((rows, cols))
    }

    fn mat_vec(&self, weight: &Tensor, v: &[f32]) -> Vec<f32> {
        let dims = weight.dims();
        let (rows, cols) = self.layout.matrix_dims(dims).expect("checked");
        let w = weight.data();
        (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|c| w[self.layout.index(dims, r, c)] as f64 * v[c] as f64)
                    .sum::<f64>() as f32
            })
            .collect()
    }

    fn mat_t_vec(&self, weight: &Tensor, u: &[f32]) -> Vec<f32> {
        let dims = weight.dims();
        let (rows, cols) = self.layout.matrix_dims(dims).expect("checked");
        let w = weight.data();
        let mut out = vec![0.0f64; cols];
        for (r, &ur) in u.iter().enumerate().take(rows) {
            for (c, o) in out.iter_mut().enumerate() {
                *o += w[self.layout.index(dims, r, c)] as f64 * ur as f64;
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }
}

/// `u v^T` scattered into the layout of `dims`.
pub(crate) fn outer_in_layout(layout: WeightLayout, dims: &[usize], u: &[f32], v: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; dims.iter().product()];
    for (r, &ur) in u.iter().enumerate() {
        for (c, &vc) in v.iter().enumerate() {
            out[layout.index(dims, r, c)] = ur * vc;
        }
    }
    out
}

/// Returns false (leaving `x` untouched) for a zero vector.
fn normalize(x: &mut [f32]) -> bool {
    let norm = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    if norm <= SIGMA_FLOOR as f64 || !norm.is_finite() {
        return false;
    }
    for v in x.iter_mut() {
        *v = (*v as f64 / norm) as f32;
    }
    true
}

/// Advance `state` by its per-step power iterations and return the
/// normalized weight.
pub fn spectral_normalize(weight: &Tensor, state: &mut SpectralState) -> Result<Tensor> {
    state.step(weight)?;
    state.normalized(weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn top_singular_value(weight: &Tensor, layout: WeightLayout) -> f64 {
        let dims = weight.dims();
        let (rows, cols) = layout.matrix_dims(dims).unwrap();
        let m = DMatrix::from_fn(rows, cols, |r, c| {
            weight.data()[layout.index(dims, r, c)] as f64
        });
        m.singular_values().max()
    }

    #[test]
    fn diagonal_scaled_by_largest_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::from_vec(&[2, 2, 1, 1], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut state = SpectralState::new(2, WeightLayout::Conv, &mut rng);
        state.iterations_per_step = 50;
        let out = spectral_normalize(&w, &mut state).unwrap();
        let expected = [1.0, 0.0, 0.0, 1.0 / 3.0];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn fixed_point_is_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 0.5]).unwrap();
        let mut state = SpectralState::new(2, WeightLayout::Conv, &mut rng);
        state.iterations_per_step = 100;
        state.step(&w).unwrap();
        let out = state.normalized(&w).unwrap();
        assert!(out.max_abs_diff(&w).unwrap() < 1e-4);
    }

    #[test]
    fn zero_weight_returns_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let mut state = SpectralState::new(4, WeightLayout::Conv, &mut rng);
        let out = spectral_normalize(&w, &mut state).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let n: f32 = state.u.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn normalized_top_singular_value_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (dims, layout) in [
            (vec![8, 5, 3, 3], WeightLayout::Conv),
            (vec![16, 4, 3, 3], WeightLayout::Transposed),
            (vec![64, 7, 3, 3], WeightLayout::Conv),
            (vec![6, 64, 1, 1], WeightLayout::Transposed),
        ] {
            let w = Tensor::uniform(&dims, 1.0, &mut rng);
            let rows = layout.matrix_dims(&dims).unwrap().0;
            let mut state = SpectralState::new(rows, layout, &mut rng);
            state.iterations_per_step = 50;
            let out = spectral_normalize(&w, &mut state).unwrap();
            let s = top_singular_value(&out, layout);
            assert!((s - 1.0).abs() <= 1e-3, "{dims:?}: {s}");
            let n: f32 = state.u.iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn rejects_mismatched_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let mut state = SpectralState::new(3, WeightLayout::Conv, &mut rng);
        assert!(spectral_normalize(&w, &mut state).is_err());
    }
}
