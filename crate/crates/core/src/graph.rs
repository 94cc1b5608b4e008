//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a Wengert tape: every primitive appends one node holding
//! its output value and the context its backward rule needs. Nodes are only
//! ever appended, so node order is a topological order and
//! [`Graph::backward`] replays the tape once in reverse.
//!
//! ```
//! use r2u3d_core::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.variable(Tensor::from_vec([1, 1, 1, 1, 3], vec![-1.0, 2.0, 3.0]).unwrap());
//! let y = g.relu(x).unwrap();
//! let s = g.sum(y).unwrap();
//! let grads = g.backward(s).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0]);
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvAlgo, ConvGeom, ConvSpec};
use crate::ops::pool;
use crate::tensor::{cst, Element, Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv3d,
    ConvTranspose3d,
    MaxPool3d,
    GlobalAvgPool,
    Dense,
    Add,
    Mul,
    Relu,
    Sigmoid,
    ScaleChannels,
    ConcatChannels,
    Sum,
    Affine,
    Ln,
    Powf,
    ClampMin,
    SoftDice,
    Wcel,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv3d => "conv3d",
            OpKind::ConvTranspose3d => "conv_transpose3d",
            OpKind::MaxPool3d => "maxpool3d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Dense => "dense",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::ScaleChannels => "scale_channels",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Sum => "sum",
            OpKind::Affine => "affine",
            OpKind::Ln => "ln",
            OpKind::Powf => "powf",
            OpKind::ClampMin => "clamp_min",
            OpKind::SoftDice => "soft_dice",
            OpKind::Wcel => "wcel",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use OpKind::*;
        [
            Leaf, Conv3d, ConvTranspose3d, MaxPool3d, GlobalAvgPool, Dense, Add, Mul, Relu, Sigmoid,
            ScaleChannels, ConcatChannels, Sum, Affine, Ln, Powf, ClampMin, SoftDice, Wcel,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var },
    Dense { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    ScaleChannels { x: Var, s: Var },
    Concat(Vec<Var>),
    Sum(Var),
    Affine { x: Var, scale: T },
    Ln(Var),
    Powf { x: Var, exponent: T },
    ClampMin { x: Var, floor: T },
    SoftDice { p: Var, target: Tensor<T>, eps: T },
    Wcel { p: Var, target: Tensor<T>, pos_weight: T, clamp: T },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv { .. } => OpKind::Conv3d,
            Op::ConvT { .. } => OpKind::ConvTranspose3d,
            Op::MaxPool { .. } => OpKind::MaxPool3d,
            Op::AvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Dense { .. } => OpKind::Dense,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::Concat(_) => OpKind::ConcatChannels,
            Op::Sum(_) => OpKind::Sum,
            Op::Affine { .. } => OpKind::Affine,
            Op::Ln(_) => OpKind::Ln,
            Op::Powf { .. } => OpKind::Powf,
            Op::ClampMin { .. } => OpKind::ClampMin,
            Op::SoftDice { .. } => OpKind::SoftDice,
            Op::Wcel { .. } => OpKind::Wcel,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::ConvT { x, w, b, .. } | Op::Dense { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MaxPool { x, .. }
            | Op::AvgPool { x }
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Sum(x)
            | Op::Affine { x, .. }
            | Op::Ln(x)
            | Op::Powf { x, .. }
            | Op::ClampMin { x, .. }
            | Op::SoftDice { p: x, .. }
            | Op::Wcel { p: x, .. } => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) | Op::ScaleChannels { x: a, s: b } => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    conv_algo: ConvAlgo,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false, conv_algo: ConvAlgo::Direct, fault: None }
    }

    pub fn with_conv_algo(mut self, algo: ConvAlgo) -> Self {
        self.conv_algo = algo;
        self
    }

    /// Scales the backward contribution of every `kind` node by 1.5. Only
    /// meant for exercising the gradient checker against a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.kind().name().to_string() });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn expect_shape(&self, op: &'static str, v: Var, want: Shape) -> Result<()> {
        let got = self.shape(v);
        if got != want {
            return Err(Error::shape(op, format!("expected {want}, found {got}")));
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa} vs {sb}")));
        }
        Ok(sa)
    }

    fn check_bias(&self, op: &'static str, spec: &ConvSpec, b: Option<Var>) -> Result<()> {
        match (spec.bias, b) {
            (true, Some(b)) => self.expect_shape(op, b, spec.bias_shape()),
            (false, None) => Ok(()),
            (true, None) => Err(Error::shape(op, "spec declares a bias but none was given")),
            (false, Some(_)) => Err(Error::shape(op, "bias given for a bias-free spec")),
        }
    }

    // ── Primitives ──────────────────────────────────────────────────────

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let xs = self.shape(x);
        if xs.channels() != spec.in_channels {
            return Err(Error::shape(
                "conv3d",
                format!("input has {} channels, spec expects {}", xs.channels(), spec.in_channels),
            ));
        }
        self.expect_shape("conv3d", w, spec.weight_shape())?;
        self.check_bias("conv3d", spec, b)?;
        let geom = ConvGeom::forward(spec, xs.spatial())?;
        let bias = b.map(|b| self.value(b).data());
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let n = xs.batch();
        let data = match self.conv_algo {
            ConvAlgo::Direct => conv::conv3d_forward(xd, n, spec.in_channels, wd, spec.out_channels, bias, &geom),
            ConvAlgo::Im2col => {
                conv::conv3d_forward_im2col(xd, n, spec.in_channels, wd, spec.out_channels, bias, &geom)
            }
        };
        let out = Tensor::from_vec(xs.with_channels(spec.out_channels).with_spatial(geom.output), data)?;
        self.push(out, Op::Conv { x, w, b, geom })
    }

    /// Transposed convolution. `spec.in_channels` is the channel count of
    /// `x`; the weight is `[in_channels, out_channels, kernel...]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let xs = self.shape(x);
        if xs.channels() != spec.in_channels {
            return Err(Error::shape(
                "conv_transpose3d",
                format!("input has {} channels, spec expects {}", xs.channels(), spec.in_channels),
            ));
        }
        self.expect_shape("conv_transpose3d", w, spec.transposed_weight_shape())?;
        self.check_bias("conv_transpose3d", spec, b)?;
        let geom = ConvGeom::transposed(spec, xs.spatial())?;
        let n = xs.batch();
        let mut data = conv::conv3d_backward_input(
            self.value(x).data(),
            n,
            spec.in_channels,
            self.value(w).data(),
            spec.out_channels,
            &geom,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            let sp: usize = geom.input.iter().product();
            for (i, chunk) in data.chunks_mut(sp).enumerate() {
                let bv = bias[i % spec.out_channels];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let out = Tensor::from_vec(xs.with_channels(spec.out_channels).with_spatial(geom.input), data)?;
        self.push(out, Op::ConvT { x, w, b, geom })
    }

    pub fn maxpool3d(&mut self, x: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x);
        let (data, argmax, shape) = pool::maxpool3d_forward(self.value(x).data(), xs, window, stride)?;
        let out = Tensor::from_vec(shape, data)?;
        self.push(out, Op::MaxPool { x, argmax })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let data = pool::global_avg_pool_forward(self.value(x).data(), xs)?;
        let out = Tensor::from_vec(Shape::new(xs.batch(), xs.channels(), 1, 1, 1), data)?;
        self.push(out, Op::AvgPool { x })
    }

    /// Affine map over the flattened non-batch axes: `x` is read as
    /// `[N, F_in]`, `w` is `[F_out, F_in, 1, 1, 1]`, `b` is `[F_out, 1, 1, 1, 1]`.
    /// Output is `[N, F_out, 1, 1, 1]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let n = xs.batch();
        let f_in = xs.numel() / n.max(1);
        let [f_out, w_in, a, bb, c] = ws.0;
        if w_in != f_in || a * bb * c != 1 {
            return Err(Error::shape("dense", format!("input {xs} vs weight {ws}")));
        }
        if let Some(b) = b {
            self.expect_shape("dense", b, Shape::new(f_out, 1, 1, 1, 1))?;
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        let mut data = vec![T::zero(); n * f_out];
        for r in 0..n {
            let xr = &xd[r * f_in..][..f_in];
            for o in 0..f_out {
                let s: T = wd[o * f_in..][..f_in].iter().zip(xr).map(|(&a, &b)| a * b).sum();
                data[r * f_out + o] = s + bias.map_or(T::zero(), |b| b[o]);
            }
        }
        let out = Tensor::from_vec(Shape::new(n, f_out, 1, 1, 1), data)?;
        self.push(out, Op::Dense { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        self.push(Tensor::from_vec(shape, data)?, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        self.push(Tensor::from_vec(shape, data)?, Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Multiplies every channel of `x` by the matching entry of
    /// `s: [N, C, 1, 1, 1]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x);
        self.expect_shape("scale_channels", s, Shape::new(xs.batch(), xs.channels(), 1, 1, 1))?;
        let sp = xs.spatial_len();
        let sd = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(sp)
            .zip(sd)
            .flat_map(|(c, &k)| c.iter().map(move |&v| v * k))
            .collect();
        self.push(Tensor::from_vec(xs, data)?, Op::ScaleChannels { x, s })
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let base = self.shape(first);
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.batch() != base.batch() || s.spatial() != base.spatial() {
                return Err(Error::shape("concat_channels", format!("{s} vs {base}")));
            }
            channels += s.channels();
        }
        let sp = base.spatial_len();
        let mut data = Vec::with_capacity(base.batch() * channels * sp);
        for n in 0..base.batch() {
            for &v in xs {
                let t = self.value(v);
                let block = t.shape().channels() * sp;
                data.extend_from_slice(&t.data()[n * block..][..block]);
            }
        }
        let out = Tensor::from_vec(base.with_channels(channels), data)?;
        self.push(out, Op::Concat(xs.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.affine(s, T::one() / T::from_usize(n).unwrap(), T::zero())
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale })
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(T::ln);
        self.push(out, Op::Ln(x))
    }

    /// `x^exponent`; fractional exponents need `x >= 0`.
    pub fn powf(&mut self, x: Var, exponent: T) -> Result<Var> {
        let out = self.value(x).map(|v| v.powf(exponent));
        self.push(out, Op::Powf { x, exponent })
    }

    /// `max(x, floor)`; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor));
        self.push(out, Op::ClampMin { x, floor })
    }

    /// Smoothed soft Dice coefficient `(2 Σ p g + eps) / (Σ p² + Σ g² + eps)`
    /// against a constant target.
    pub fn soft_dice(&mut self, p: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        self.expect_shape("soft_dice", p, target.shape())?;
        let (inter, denom) = dice_terms(self.value(p).data(), target.data(), eps);
        let v = (cst::<T>(2.0) * inter + eps) / denom;
        self.push(Tensor::scalar(v), Op::SoftDice { p, target: target.clone(), eps })
    }

    /// Mean weighted cross entropy computed on `logit(clamp(p))`.
    pub fn wcel(&mut self, p: Var, target: &Tensor<T>, pos_weight: T, clamp: T) -> Result<Var> {
        self.expect_shape("wcel", p, target.shape())?;
        let pd = self.value(p).data();
        let total: T = pd
            .iter()
            .zip(target.data())
            .map(|(&pv, &gv)| {
                let x = logit(pv.max(clamp).min(T::one() - clamp));
                wcel_term(x, gv, pos_weight)
            })
            .sum();
        let v = total / T::from_usize(pd.len()).unwrap();
        self.push(Tensor::scalar(v), Op::Wcel { p, target: target.clone(), pos_weight, clamp })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Propagates `d root / d node` back through the tape. `root` must hold
    /// a single value. A tape can be differentiated once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let n_root = self.value(root).numel();
        if n_root != 1 {
            return Err(Error::NonScalarRoot(n_root));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_vec(node.value.shape(), g)?);
                continue;
            }
            let mut contributions = self.node_backward(i, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, c) in &mut contributions {
                    c.iter_mut().for_each(|v| *v = *v * cst(1.5));
                }
            }
            for (parent, c) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(c).for_each(|(a, v)| *a = *a + v),
                    slot @ None => *slot = Some(c),
                }
            }
        }

        for (i, slot) in leaves.iter_mut().enumerate() {
            let node = &self.nodes[i];
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let t = slot.get_or_insert_with(|| Tensor::zeros(node.value.shape()));
                if !t.all_finite() {
                    return Err(Error::NonFinite { op: "backward".into() });
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    /// Gradient contributions of node `i` to each of its parents given the
    /// upstream gradient `g`.
    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let xs = val(*x).shape();
                let (n, c_in, c_out) = (xs.batch(), xs.channels(), out_shape.channels());
                if wants(*x) {
                    res.push((*x, conv::conv3d_backward_input(g, n, c_out, val(*w).data(), c_in, geom)));
                }
                if wants(*w) {
                    res.push((*w, conv::conv3d_backward_weight(val(*x).data(), g, n, c_in, c_out, geom)));
                }
                if let Some(b) = b {
                    res.push((*b, conv::bias_grad(g, n, c_out, out_shape.spatial_len())));
                }
            }
            Op::ConvT { x, w, b, geom } => {
                let xs = val(*x).shape();
                let (n, c_in, c_out) = (xs.batch(), xs.channels(), out_shape.channels());
                if wants(*x) {
                    res.push((*x, conv::conv3d_forward(g, n, c_out, val(*w).data(), c_in, None, geom)));
                }
                if wants(*w) {
                    res.push((*w, conv::conv3d_backward_weight(g, val(*x).data(), n, c_out, c_in, geom)));
                }
                if let Some(b) = b {
                    res.push((*b, conv::bias_grad(g, n, c_out, out_shape.spatial_len())));
                }
            }
            Op::MaxPool { x, argmax } => {
                res.push((*x, pool::maxpool3d_backward(g, argmax, val(*x).numel())));
            }
            Op::AvgPool { x } => {
                res.push((*x, pool::global_avg_pool_backward(g, val(*x).shape())));
            }
            Op::Dense { x, w, b } => {
                let xd = val(*x).data();
                let wd = val(*w).data();
                let n = out_shape.batch();
                let f_out = out_shape.channels();
                let f_in = xd.len() / n;
                if wants(*x) {
                    let mut dx = vec![T::zero(); xd.len()];
                    for r in 0..n {
                        for o in 0..f_out {
                            let go = g[r * f_out + o];
                            for k in 0..f_in {
                                dx[r * f_in + k] = dx[r * f_in + k] + go * wd[o * f_in + k];
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); wd.len()];
                    for r in 0..n {
                        for o in 0..f_out {
                            let go = g[r * f_out + o];
                            for k in 0..f_in {
                                dw[o * f_in + k] = dw[o * f_in + k] + go * xd[r * f_in + k];
                            }
                        }
                    }
                    res.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); f_out];
                    for r in 0..n {
                        for o in 0..f_out {
                            db[o] = db[o] + g[r * f_out + o];
                        }
                    }
                    res.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                res.push((*a, g.iter().zip(bd).map(|(&u, &v)| u * v).collect()));
                res.push((*b, g.iter().zip(ad).map(|(&u, &v)| u * v).collect()));
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                res.push((*x, g.iter().zip(xd).map(|(&u, &v)| if v > T::zero() { u } else { T::zero() }).collect()));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                res.push((*x, g.iter().zip(y).map(|(&u, &s)| u * s * (T::one() - s)).collect()));
            }
            Op::ScaleChannels { x, s } => {
                let sp = out_shape.spatial_len();
                let (xd, sd) = (val(*x).data(), val(*s).data());
                if wants(*x) {
                    let dx = g.chunks(sp).zip(sd).flat_map(|(c, &k)| c.iter().map(move |&u| u * k)).collect();
                    res.push((*x, dx));
                }
                if wants(*s) {
                    let ds = g
                        .chunks(sp)
                        .zip(xd.chunks(sp))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&u, &v)| u * v).sum())
                        .collect();
                    res.push((*s, ds));
                }
            }
            Op::Concat(xs) => {
                let sp = out_shape.spatial_len();
                let total = out_shape.channels() * sp;
                let mut offset = 0;
                for &v in xs {
                    let block = val(v).shape().channels() * sp;
                    if wants(v) {
                        let mut dv = Vec::with_capacity(block * out_shape.batch());
                        for n in 0..out_shape.batch() {
                            dv.extend_from_slice(&g[n * total + offset..][..block]);
                        }
                        res.push((v, dv));
                    }
                    offset += block;
                }
            }
            Op::Sum(x) => {
                res.push((*x, vec![g[0]; val(*x).numel()]));
            }
            Op::Affine { x, scale } => {
                res.push((*x, g.iter().map(|&u| u * *scale).collect()));
            }
            Op::Ln(x) => {
                res.push((*x, g.iter().zip(val(*x).data()).map(|(&u, &v)| u / v).collect()));
            }
            Op::Powf { x, exponent } => {
                let e = *exponent;
                let dx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&u, &v)| if v == T::zero() && e < T::one() { T::zero() } else { u * e * v.powf(e - T::one()) })
                    .collect();
                res.push((*x, dx));
            }
            Op::ClampMin { x, floor } => {
                let dx = g.iter().zip(val(*x).data()).map(|(&u, &v)| if v > *floor { u } else { T::zero() }).collect();
                res.push((*x, dx));
            }
            Op::SoftDice { p, target, eps } => {
                let pd = val(*p).data();
                let (inter, denom) = dice_terms(pd, target.data(), *eps);
                let two = cst::<T>(2.0);
                let num = two * inter + *eps;
                let d2 = denom * denom;
                let dp = pd
                    .iter()
                    .zip(target.data())
                    .map(|(&pv, &gv)| g[0] * (two * gv * denom - num * two * pv) / d2)
                    .collect();
                res.push((*p, dp));
            }
            Op::Wcel { p, target, pos_weight, clamp } => {
                let pd = val(*p).data();
                let scale = g[0] / T::from_usize(pd.len()).unwrap();
                let hi = T::one() - *clamp;
                let dp = pd
                    .iter()
                    .zip(target.data())
                    .map(|(&pv, &gv)| {
                        if pv <= *clamp || pv >= hi {
                            return T::zero();
                        }
                        let x = logit(pv);
                        let q = T::one() + (*pos_weight - T::one()) * gv;
                        let dl_dx = (T::one() - gv) - q * sigmoid(-x);
                        scale * dl_dx / (pv * (T::one() - pv))
                    })
                    .collect();
                res.push((*p, dp));
            }
        }
        res
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a [`Graph::variable`] leaf; `None` for constants and
    /// interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[inline]
/// Logistic function, kept inside the open interval `(0, 1)`: for large
/// `|v|` the exact value rounds to 0 or 1, so it is pinned to the nearest
/// representable interior value instead.
pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let top = T::one() - T::epsilon() / cst(2.0);
    s.max(T::min_positive_value()).min(top)
}

#[inline]
pub(crate) fn logit<T: Element>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// Per-voxel weighted cross entropy on a logit `x`:
/// `(1 - g) x + (1 + (q - 1) g) (log(1 + e^{-|x|}) + max(-x, 0))`.
#[inline]
pub(crate) fn wcel_term<T: Element>(x: T, g: T, pos_weight: T) -> T {
    let q = T::one() + (pos_weight - T::one()) * g;
    let softplus_neg = (T::one() + (-x.abs()).exp()).ln() + (-x).max(T::zero());
    (T::one() - g) * x + q * softplus_neg
}

fn dice_terms<T: Element>(p: &[T], g: &[T], eps: T) -> (T, T) {
    let mut inter = T::zero();
    let mut pp = T::zero();
    let mut gg = T::zero();
    for (&a, &b) in p.iter().zip(g) {
        inter = inter + a * b;
        pp = pp + a * a;
        gg = gg + b * b;
    }
    (inter, pp + gg + eps)
}
