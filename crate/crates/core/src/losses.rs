//! Overlap metrics and the segmentation losses.
//!
//! * Dice similarity on binary masks: `(2 Σ p g + ε) / (Σ p + Σ g + ε)`.
//! * Soft Dice on probabilities: `(2 Σ p g + ε) / (Σ p² + Σ g² + ε)`.
//! * Weighted cross entropy on `logit(p)`, averaged over voxels.
//! * Exponential logarithmic loss:
//!   `w_dsc (-ln softdice)^γ_dsc + w_wcel wcel^γ_wcel`.
//!
//! The `*_var` functions record onto a [`Graph`]; the plain functions
//! evaluate the same expressions in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{cst, Element, Tensor};

pub const DEFAULT_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EllConfig {
    pub w_dsc: f64,
    pub w_wcel: f64,
    pub gamma_dsc: f64,
    pub gamma_wcel: f64,
    pub pos_weight: f64,
    pub eps: f64,
    pub prob_clamp: f64,
}

impl Default for EllConfig {
    fn default() -> Self {
        EllConfig {
            w_dsc: 0.8,
            w_wcel: 0.2,
            gamma_dsc: 0.3,
            gamma_wcel: 0.3,
            pos_weight: 1.0,
            eps: DEFAULT_EPS,
            prob_clamp: DEFAULT_EPS,
        }
    }
}

impl EllConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_dsc < 0.0 || self.w_wcel < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.gamma_dsc <= 0.0 || self.gamma_wcel <= 0.0 {
            return Err(Error::Config("loss exponents must be > 0".into()));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::Config("prob_clamp must lie in (0, 0.5)".into()));
        }
        if self.eps <= 0.0 || self.pos_weight <= 0.0 {
            return Err(Error::Config("eps and pos_weight must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dice,
    Ell,
}

// ── Differentiable ──────────────────────────────────────────────────────

pub fn soft_dsc_var<T: Element>(g: &mut Graph<T>, p: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
    g.soft_dice(p, target, cst(eps))
}

/// `1 - soft_dsc`.
pub fn dice_loss_var<T: Element>(g: &mut Graph<T>, p: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
    let sd = soft_dsc_var(g, p, target, eps)?;
    g.affine(sd, -T::one(), T::one())
}

pub fn wcel_var<T: Element>(g: &mut Graph<T>, p: Var, target: &Tensor<T>, pos_weight: f64, clamp: f64) -> Result<Var> {
    g.wcel(p, target, cst(pos_weight), cst(clamp))
}

/// Each base is floored at `eps` before exponentiation so the fractional
/// power keeps a bounded derivative.
pub fn ell_var<T: Element>(g: &mut Graph<T>, p: Var, target: &Tensor<T>, cfg: &EllConfig) -> Result<Var> {
    let sd = soft_dsc_var(g, p, target, cfg.eps)?;
    let ln = g.ln(sd)?;
    let neg = g.affine(ln, -T::one(), T::zero())?;
    let base = g.clamp_min(neg, cst(cfg.eps))?;
    let dsc_term = g.powf(base, cst(cfg.gamma_dsc))?;

    let ce = wcel_var(g, p, target, cfg.pos_weight, cfg.prob_clamp)?;
    let base = g.clamp_min(ce, cst(cfg.eps))?;
    let ce_term = g.powf(base, cst(cfg.gamma_wcel))?;

    let a = g.affine(dsc_term, cst(cfg.w_dsc), T::zero())?;
    let b = g.affine(ce_term, cst(cfg.w_wcel), T::zero())?;
    g.add(a, b)
}

pub fn loss_var<T: Element>(g: &mut Graph<T>, kind: LossKind, p: Var, target: &Tensor<T>, cfg: &EllConfig) -> Result<Var> {
    match kind {
        LossKind::Dice => dice_loss_var(g, p, target, cfg.eps),
        LossKind::Ell => ell_var(g, p, target, cfg),
    }
}

// ── Plain evaluation ────────────────────────────────────────────────────

fn eval<T: Element>(p: &Tensor<T>, f: impl FnOnce(&mut Graph<f64>, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let pv = g.constant(p.cast());
    let out = f(&mut g, pv)?;
    g.value(out).item()
}

fn check_same_shape<T: Element>(op: &'static str, p: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::shape(op, format!("{} vs {}", p.shape(), g.shape())));
    }
    Ok(())
}

fn check_binary<T: Element>(t: &Tensor<T>) -> Result<()> {
    if t.data().iter().all(|&v| v == T::zero() || v == T::one()) {
        Ok(())
    } else {
        Err(Error::Invalid("dsc expects binary masks".into()))
    }
}

/// Dice similarity coefficient of two binary masks.
pub fn dsc<T: Element>(p: &Tensor<T>, g: &Tensor<T>, eps: f64) -> Result<f64> {
    check_same_shape("dsc", p, g)?;
    check_binary(p)?;
    check_binary(g)?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.data().iter().zip(g.data()) {
        let (a, b) = (a.to_f64().unwrap(), b.to_f64().unwrap());
        inter += a * b;
        sp += a;
        sg += b;
    }
    Ok((2.0 * inter + eps) / (sp + sg + eps))
}

pub fn soft_dsc<T: Element>(p: &Tensor<T>, g: &Tensor<T>, eps: f64) -> Result<f64> {
    check_same_shape("soft_dsc", p, g)?;
    let target = g.cast();
    eval(p, |gr, pv| soft_dsc_var(gr, pv, &target, eps))
}

pub fn dice_loss<T: Element>(p: &Tensor<T>, g: &Tensor<T>, eps: f64) -> Result<f64> {
    Ok(1.0 - soft_dsc(p, g, eps)?)
}

pub fn wcel<T: Element>(p: &Tensor<T>, g: &Tensor<T>, pos_weight: f64, clamp: f64) -> Result<f64> {
    check_same_shape("wcel", p, g)?;
    let target = g.cast();
    eval(p, |gr, pv| wcel_var(gr, pv, &target, pos_weight, clamp))
}

pub fn ell<T: Element>(p: &Tensor<T>, g: &Tensor<T>, cfg: &EllConfig) -> Result<f64> {
    check_same_shape("ell", p, g)?;
    let target = g.cast();
    eval(p, |gr, pv| ell_var(gr, pv, &target, cfg))
}

/// 1 where `p >= tau`, else 0.
pub fn threshold<T: Element>(p: &Tensor<T>, tau: f64) -> Tensor<T> {
    let tau: T = cst(tau);
    p.map(|v| if v >= tau { T::one() } else { T::zero() })
}
