//! Adam with bias correction, and the piecewise-constant learning-rate
//! schedule driven by the outer training iteration.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment buffers per parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update of every parameter that has a gradient in `grads`.
///
/// Moments are kept in `f64` regardless of the parameter precision.
pub fn adam_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState,
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
    }
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("`{name}`: parameter {} vs gradient {}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite { op: format!("gradient of `{name}`") });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.to_f64().unwrap();
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            let th = theta.to_f64().unwrap() - lr * m_hat / (v_hat.sqrt() + hp.eps);
            *theta = T::from_f64_lossy(th);
        }
    }
    Ok(())
}

/// Consecutive `(iterations, rate)` segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule {
    pub segments: Vec<(usize, f64)>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { segments: vec![(400, 1e-3), (100, 1e-4)] }
    }
}

impl LrSchedule {
    pub fn new(segments: Vec<(usize, f64)>) -> Result<Self> {
        let s = LrSchedule { segments };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(rate: f64) -> Self {
        LrSchedule { segments: vec![(1, rate)] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Config("learning-rate schedule is empty".into()));
        }
        for &(n, r) in &self.segments {
            if n == 0 || !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("invalid schedule segment ({n}, {r})")));
            }
        }
        Ok(())
    }

    /// Rate at `iteration`; the last rate persists past the final segment.
    pub fn lr_at(&self, iteration: usize) -> Result<f64> {
        let mut start = 0;
        for &(n, r) in &self.segments {
            if iteration < start + n {
                return Ok(r);
            }
            start += n;
        }
        self.segments.last().map(|s| s.1).ok_or_else(|| Error::Config("learning-rate schedule is empty".into()))
    }

    pub fn total_iterations(&self) -> usize {
        self.segments.iter().map(|s| s.0).sum()
    }
}
