use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

impl Moments {
    pub fn zeros_like(t: &Tensor) -> Self {
        Moments {
            m: Tensor::zeros(t.dims()),
            v: Tensor::zeros(t.dims()),
        }
    }
}

/// A parameter paired with its gradient and moment buffers.
pub struct AdamSlot<'a> {
    pub name: &'a str,
    pub param: &'a mut Tensor,
    pub grad: &'a Tensor,
    pub moments: &'a mut Moments,
}

/// One bias-corrected Adam update at step `t` (1-based).
///
/// Every gradient is checked before anything is written, so a rejected
/// step leaves parameters and moments untouched.
pub fn adam_step(slots: &mut [AdamSlot<'_>], cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Parameter("adam step index starts at 1".into()));
    }
    for s in slots.iter() {
        if s.grad.dims() != s.param.dims()
            || s.moments.m.dims() != s.param.dims()
            || s.moments.v.dims() != s.param.dims()
        {
            return Err(Error::Shape(format!(
                "adam: shapes disagree for parameter {}",
                s.name
            )));
        }
        if !s.grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {}", s.name)));
        }
    }
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - (b1 as f64).powf(t as f64);
    let bc2 = 1.0 - (b2 as f64).powf(t as f64);
    let step = (cfg.lr as f64 / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    for s in slots.iter_mut() {
        let m = s.moments.m.data_mut();
        let v = s.moments.v.data_mut();
        for (((p, &g), m), v) in s
            .param
            .data_mut()
            .iter_mut()
            .zip(s.grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() / bc2_sqrt + cfg.eps);
        }
    }
    Ok(())
}
