//! The gradient-fidelity suite: finite-difference checks of every
//! primitive, every block, both losses and a small end-to-end model, all
//! evaluated in `f64`.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::graph::{Graph, OpKind, Var};
use crate::losses::{self, EllConfig, DEFAULT_EPS};
use crate::model::{Architecture, ModelConfig};
use crate::nn::{
    Bound, DownsampleConfig, DownsampleStage, Drrcu, ParamDecl, ParamStore, Rrcu, RrcuConfig, SeConfig, SeResidual,
    UpsampleStage,
};
use crate::ops::{ConvSpec, Padding};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;
const KINK_TOL: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub tolerance: f64,
    pub seed: u64,
    /// Backward rule to corrupt, for demonstrating that the suite notices.
    pub fault: Option<OpKind>,
    /// Only run checks whose name contains this string.
    pub filter: Option<String>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { tolerance: DEFAULT_TOLERANCE, seed: 0, fault: None, filter: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub kinks_skipped: usize,
    pub passed: bool,
    pub seconds: f64,
    /// Set when the check could not run at all.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        match &self.error {
            Some(e) => write!(f, "{tag} {:<28} error: {e}", self.name),
            None => write!(
                f,
                "{tag} {:<28} max_rel_err {:.3e}  coords {:>5}  kinks {:>2}  {:.2}s",
                self.name, self.max_rel_error, self.coords, self.kinks_skipped, self.seconds
            ),
        }
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(
            f,
            "{} of {} checks passed (tolerance {:.0e}, worst {:.3e})",
            self.checks.len() - failed,
            self.checks.len(),
            self.tolerance,
            self.max_rel_error()
        )
    }
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: Builder,
    /// Coordinates sampled per input; `None` checks all.
    max_coords: Option<usize>,
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(salt))
}

/// Contracts `y` against a fixed random probe so each output coordinate
/// receives a distinct upstream gradient.
fn probe_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let probe = Tensor::randn(g.shape(y), 1.0, &mut rng(seed, 99));
    let p = g.constant(probe);
    let m = g.mul(y, p)?;
    g.sum(m)
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { name, inputs, f: Box::new(f), max_coords: None }
}

/// A block case: input `x` followed by every parameter of `decls`.
fn block_case(
    name: &'static str,
    x: Tensor<f64>,
    decls: Vec<ParamDecl>,
    seed: u64,
    max_coords: Option<usize>,
    f: impl Fn(&mut Graph<f64>, &Bound, Var) -> Result<Var> + 'static,
) -> Case {
    let mut r = rng(seed, 7);
    let store = ParamStore::<f64>::init_from(&decls, &mut r).expect("declarations have unique names");
    // Non-zero biases so their gradients are exercised away from zero.
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs = vec![x];
    for (d, (_, t)) in decls.iter().zip(store.iter()) {
        inputs.push(if d.fan_in == 0 { Tensor::randn(d.shape, 0.1, &mut r) } else { t.clone() });
    }
    Case {
        name,
        inputs,
        f: Box::new(move |g, v| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            f(g, &bound, v[0])
        }),
        max_coords,
    }
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed, 1);
    let mut v = Vec::new();

    for (name, s, d, pad) in [
        ("conv3d", 1, 1, Padding::Same),
        ("conv3d/stride2", 2, 1, Padding::Same),
        ("conv3d/dilation2", 1, 2, Padding::Same),
        ("conv3d/valid", 2, 2, Padding::Valid),
    ] {
        let spec = ConvSpec::new(2, 2, [3, 2, 3]).with_stride([s; 3]).with_dilation([d; 3]).with_padding(pad);
        let inputs = vec![
            Tensor::randn([1, 2, 5, 5, 5], 1.0, &mut r),
            Tensor::randn(spec.weight_shape(), 1.0, &mut r),
            Tensor::randn(spec.bias_shape(), 1.0, &mut r),
        ];
        v.push(case(name, inputs, move |g, x| {
            let y = g.conv3d(x[0], x[1], Some(x[2]), &spec)?;
            probe_sum(g, y, seed)
        }));
    }

    let spec = ConvSpec::new(2, 3, [2; 3]).with_stride([2; 3]);
    let inputs = vec![
        Tensor::randn([1, 2, 3, 2, 3], 1.0, &mut r),
        Tensor::randn(spec.transposed_weight_shape(), 1.0, &mut r),
        Tensor::randn(spec.bias_shape(), 1.0, &mut r),
    ];
    v.push(case("conv_transpose3d", inputs, move |g, x| {
        let y = g.conv_transpose3d(x[0], x[1], Some(x[2]), &spec)?;
        probe_sum(g, y, seed)
    }));

    v.push(case("maxpool3d", vec![Tensor::randn([1, 2, 4, 4, 4], 1.0, &mut r)], move |g, x| {
        let y = g.maxpool3d(x[0], [2; 3], [2; 3])?;
        probe_sum(g, y, seed)
    }));
    v.push(case("global_avg_pool", vec![Tensor::randn([2, 3, 3, 2, 2], 1.0, &mut r)], move |g, x| {
        let y = g.global_avg_pool(x[0])?;
        probe_sum(g, y, seed)
    }));
    let dense_in = vec![
        Tensor::randn([2, 5, 1, 1, 1], 1.0, &mut r),
        Tensor::randn([3, 5, 1, 1, 1], 1.0, &mut r),
        Tensor::randn([3, 1, 1, 1, 1], 1.0, &mut r),
    ];
    v.push(case("dense", dense_in, move |g, x| {
        let y = g.dense(x[0], x[1], Some(x[2]))?;
        probe_sum(g, y, seed)
    }));

    let pair = || -> Vec<Tensor<f64>> {
        let mut r = rng(seed, 2);
        vec![Tensor::randn([1, 2, 2, 3, 2], 1.0, &mut r), Tensor::randn([1, 2, 2, 3, 2], 1.0, &mut r)]
    };
    v.push(case("add", pair(), move |g, x| {
        let y = g.add(x[0], x[1])?;
        probe_sum(g, y, seed)
    }));
    v.push(case("mul", pair(), move |g, x| {
        let y = g.mul(x[0], x[1])?;
        probe_sum(g, y, seed)
    }));
    // Keep inputs away from the kink so the difference quotient is valid.
    let mut relu_in = Tensor::randn([1, 2, 2, 3, 2], 1.0, &mut r);
    relu_in.data_mut().iter_mut().for_each(|x| *x += 0.05f64.copysign(*x));
    v.push(case("relu", vec![relu_in], move |g, x| {
        let y = g.relu(x[0])?;
        probe_sum(g, y, seed)
    }));
    v.push(case("sigmoid", vec![Tensor::randn([1, 2, 2, 3, 2], 2.0, &mut r)], move |g, x| {
        let y = g.sigmoid(x[0])?;
        probe_sum(g, y, seed)
    }));
    let sc = vec![Tensor::randn([2, 3, 2, 2, 1], 1.0, &mut r), Tensor::randn([2, 3, 1, 1, 1], 1.0, &mut r)];
    v.push(case("scale_channels", sc, move |g, x| {
        let y = g.scale_channels(x[0], x[1])?;
        probe_sum(g, y, seed)
    }));
    let cat = vec![Tensor::randn([1, 2, 2, 2, 3], 1.0, &mut r), Tensor::randn([1, 1, 2, 2, 3], 1.0, &mut r)];
    v.push(case("concat_channels", cat, move |g, x| {
        let y = g.concat_channels(&[x[0], x[1], x[0]])?;
        probe_sum(g, y, seed)
    }));
    v.push(case("sum/mean/affine", vec![Tensor::randn([1, 1, 2, 2, 3], 1.0, &mut r)], |g, x| {
        let s = g.sum(x[0])?;
        let m = g.mean(x[0])?;
        let a = g.affine(s, 0.7, -0.2)?;
        let p = g.mul(a, m)?;
        g.add(p, m)
    }));
    v.push(case("ln/powf/clamp_min", vec![Tensor::uniform([1, 1, 1, 2, 3], 0.2, 2.0, &mut r)], |g, x| {
        let l = g.ln(x[0])?;
        let a = g.affine(l, -1.5, 2.0)?;
        let c = g.clamp_min(a, 0.1)?;
        let p = g.powf(c, 0.3)?;
        g.sum(p)
    }));

    let target = random_mask([1, 1, 3, 3, 3], &mut r);
    let p = Tensor::uniform([1, 1, 3, 3, 3], 0.05, 0.95, &mut r);
    let t = target.clone();
    v.push(case("soft_dice", vec![p.clone()], move |g, x| g.soft_dice(x[0], &t, 1e-7)));
    let t = target.clone();
    v.push(case("wcel", vec![p], move |g, x| g.wcel(x[0], &t, 2.0, 1e-7)));
    v
}

fn random_mask(shape: impl Into<Shape>, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut m = Tensor::<f64>::uniform(shape, 0.0, 1.0, r).map(|v| if v < 0.5 { 1.0 } else { 0.0 });
    m.data_mut()[0] = 1.0;
    m
}

fn block_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed, 3);
    let mut v = Vec::new();

    let rrcu = Rrcu::new(
        "rrcu",
        2,
        RrcuConfig { filters: 3, depth: 2, dilation: [2; 3], layers_per_unit: 2 },
    )
    .expect("valid block");
    let x = Tensor::randn([1, 2, 4, 4, 4], 1.0, &mut r);
    v.push(block_case("rrcu", x, rrcu.params(), seed, None, move |g, p, x| {
        let y = rrcu.forward(g, p, x)?;
        probe_sum(g, y, seed)
    }));

    let se = SeResidual::new("se", SeConfig { channels: 4, reduction: 2 }).expect("valid block");
    let x = Tensor::randn([1, 4, 2, 3, 2], 1.0, &mut r);
    v.push(block_case("se_residual", x, se.params(), seed, None, move |g, p, x| {
        let y = se.forward(g, p, x)?;
        probe_sum(g, y, seed)
    }));

    let drrcu = Drrcu::new(
        "drrcu",
        1,
        RrcuConfig { filters: 4, depth: 3, dilation: [1; 3], layers_per_unit: 1 },
        SeConfig { channels: 4, reduction: 2 },
    )
    .expect("valid block");
    let x = Tensor::randn([1, 1, 4, 4, 4], 1.0, &mut r);
    v.push(block_case("drrcu", x, drrcu.params(), seed, None, move |g, p, x| {
        let y = drrcu.forward(g, p, x)?;
        probe_sum(g, y, seed)
    }));

    for (name, cfg) in [
        ("downsample/add_branches", DownsampleConfig::add_branches()),
        ("downsample/inception_concat", DownsampleConfig::inception_concat()),
    ] {
        let stage = DownsampleStage::new("down", 1, cfg).expect("valid stage");
        let x = Tensor::randn([1, 1, 6, 4, 6], 1.0, &mut r);
        v.push(block_case(name, x, stage.params(), seed, None, move |g, p, x| {
            let y = stage.forward(g, p, x)?;
            probe_sum(g, y, seed)
        }));
    }

    let up = UpsampleStage::new("up", 3);
    let x = Tensor::randn([1, 3, 2, 3, 2], 1.0, &mut r);
    v.push(block_case("upsample", x, up.params(), seed, None, move |g, p, x| {
        let y = up.forward(g, p, x)?;
        probe_sum(g, y, seed)
    }));
    v
}

fn loss_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed, 4);
    let target = random_mask([1, 1, 2, 4, 4], &mut r);
    let p = Tensor::uniform([1, 1, 2, 4, 4], 0.05, 0.95, &mut r);
    let t = target.clone();
    let dice = case("loss/dice", vec![p.clone()], move |g, x| losses::dice_loss_var(g, x[0], &t, DEFAULT_EPS));
    let t = target;
    let ell = case("loss/ell", vec![p], move |g, x| losses::ell_var(g, x[0], &t, &EllConfig::default()));
    vec![dice, ell]
}

/// Toy model used by the end-to-end check: Dynamic variant, no stem,
/// filters (2, 3, 4, 5).
pub fn toy_check_config() -> ModelConfig {
    ModelConfig {
        filters: [2, 3, 4, 5],
        stem_stages: 0,
        layers_per_unit: 1,
        se_reduction: 2,
        ..ModelConfig::dynamic_preset()
    }
}

fn model_case(seed: u64) -> Case {
    let arch = Architecture::new(&toy_check_config()).expect("toy config is valid");
    let mut r = rng(seed, 5);
    let x = Tensor::uniform([1, 1, 8, 8, 8], 0.0, 1.0, &mut r);
    let target = random_mask([1, 1, 8, 8, 8], &mut r);
    let decls = arch.param_decls();
    block_case("model/toy_end_to_end", x, decls, seed, Some(6), move |g, p, x| {
        let y = arch.forward(g, p, x)?;
        losses::ell_var(g, y, &target, &EllConfig::default())
    })
}

fn all_cases(seed: u64) -> Vec<Case> {
    let mut v = primitive_cases(seed);
    v.extend(block_cases(seed));
    v.extend(loss_cases(seed));
    v.push(model_case(seed));
    v
}

/// Names of every check, in run order.
pub fn check_names() -> Vec<&'static str> {
    all_cases(0).iter().map(|c| c.name).collect()
}

pub fn run_gradcheck_suite(opts: &VerifyOptions) -> VerifyReport {
    run_with_progress(opts, |_| {})
}

/// As [`run_gradcheck_suite`], reporting each result as soon as it is known.
pub fn run_with_progress(opts: &VerifyOptions, mut on_result: impl FnMut(&CheckResult)) -> VerifyReport {
    let mut checks = Vec::new();
    for c in all_cases(opts.seed) {
        if opts.filter.as_deref().is_some_and(|f| !c.name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let go = GradCheckOptions {
            step: 1e-6,
            max_coords: c.max_coords,
            seed: opts.seed,
            fault: opts.fault,
            kink_tol: Some(KINK_TOL),
        };
        let result = match grad_check(&c.f, &c.inputs, &go) {
            Ok(r) => CheckResult {
                name: c.name.to_string(),
                max_rel_error: r.max_rel_error,
                coords: r.coords_checked,
                kinks_skipped: r.kinks_skipped,
                passed: r.max_rel_error < opts.tolerance && r.coords_checked > 0,
                seconds: start.elapsed().as_secs_f64(),
                error: None,
            },
            Err(e) => CheckResult {
                name: c.name.to_string(),
                max_rel_error: f64::INFINITY,
                coords: 0,
                kinks_skipped: 0,
                passed: false,
                seconds: start.elapsed().as_secs_f64(),
                error: Some(e.to_string()),
            },
        };
        on_result(&result);
        checks.push(result);
    }
    VerifyReport { tolerance: opts.tolerance, checks }
}
