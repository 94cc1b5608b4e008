//! Central-difference gradient checking in 64-bit precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Relative step: `h = step * max(1, |θ|)`.
    pub step: f64,
    /// Upper bound on coordinates checked per input; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Backward rule to corrupt while checking (see [`Graph::inject_fault`]).
    pub fault: Option<OpKind>,
    /// Coordinates whose left and right one-sided slopes differ by more
    /// than this fraction straddle a non-differentiable point (a ReLU or a
    /// max-pool switch) and are skipped. `None` checks every coordinate.
    pub kink_tol: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4, max_coords: None, seed: 0, fault: None, kink_tol: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    /// Coordinates excluded because the step crossed a kink.
    pub kinks_skipped: usize,
}

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_above(analytic, numeric, 0.0)
}

/// As [`relative_error`], but disagreement up to `noise` (the rounding
/// uncertainty of the difference quotient) is not counted.
pub fn relative_error_above(analytic: f64, numeric: f64, noise: f64) -> f64 {
    let diff = ((analytic - numeric).abs() - noise).max(0.0);
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Rounding uncertainty of a difference quotient over `2h` whose function
/// values have magnitude about `f`.
fn quotient_noise(f: f64, h: f64) -> f64 {
    8.0 * f64::EPSILON * f.abs().max(1.0) / h
}

/// Compares the tape gradient of the scalar program `f` with central
/// differences at every (or a seeded sample of) input coordinate, and
/// returns the maximum relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    if let Some(kind) = opts.fault {
        g.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    if g.value(root).numel() != 1 {
        return Err(Error::NonScalarRoot(g.value(root).numel()));
    }
    let f0 = g.value(root).item()?;
    let grads = g.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: 0, kinks_skipped: 0 };
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("variables always receive a gradient");
        let len = inputs[i].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        for c in coords {
            let theta = inputs[i].data()[c];
            let h = opts.step * theta.abs().max(1.0);
            work[i].data_mut()[c] = theta + h;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = theta - h;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = theta;
            let noise = quotient_noise(f0.abs().max(plus.abs()).max(minus.abs()), h);
            if let Some(tol) = opts.kink_tol {
                let (right, left) = ((plus - f0) / h, (f0 - minus) / h);
                if (right - left).abs() > tol * right.abs().max(left.abs()) + 4.0 * noise {
                    report.kinks_skipped += 1;
                    continue;
                }
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error_above(analytic.data()[c], numeric, noise);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}
