//! Composite units: recurrent residual convolution, squeeze-and-excitation
//! residual, their dynamic combination, and the one-filter resampling
//! stages used around the U-Net body.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::ConvSpec;
use crate::tensor::Element;

use super::{Bound, ConvLayer, DenseLayer, LayerRow, ParamDecl, RELU_GAIN};

/// `z_0 = relu(conv(x))`, `z_k = relu(conv(x + z_{k-1}))` for `k = 1..=depth`,
/// all steps sharing one weight set. Returns `z_depth`.
pub fn recurrent_conv_layer<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    spec: &ConvSpec,
    depth: usize,
) -> Result<Var> {
    let c = g.shape(x).channels();
    if depth > 0 && (c != spec.out_channels || c != spec.in_channels) {
        return Err(Error::shape(
            "recurrent_conv_layer",
            format!("input has {c} channels, recurrent layer maps {} -> {}", spec.in_channels, spec.out_channels),
        ));
    }
    let y = g.conv3d(x, w, b, spec)?;
    let mut z = g.relu(y)?;
    for _ in 0..depth {
        let s = g.add(x, z)?;
        let y = g.conv3d(s, w, b, spec)?;
        z = g.relu(y)?;
    }
    Ok(z)
}

/// The recurrent weights are applied `depth + 1` times to a running sum,
/// so their init gain is shrunk by that factor to keep activations from
/// compounding with depth.
pub fn recurrent_gain(depth: usize) -> f64 {
    RELU_GAIN / (depth + 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RrcuConfig {
    pub filters: usize,
    /// Recurrence steps after the first application.
    pub depth: usize,
    pub dilation: [usize; 3],
    pub layers_per_unit: usize,
}

impl RrcuConfig {
    pub fn new(filters: usize, depth: usize) -> Self {
        RrcuConfig { filters, depth, dilation: [1; 3], layers_per_unit: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 {
            return Err(Error::Config("RRCU filters must be >= 1".into()));
        }
        if self.layers_per_unit == 0 {
            return Err(Error::Config("RRCU needs at least one recurrent layer".into()));
        }
        if self.dilation.contains(&0) {
            return Err(Error::Config("dilation must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentConv {
    pub conv: ConvLayer,
    pub depth: usize,
}

impl RecurrentConv {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.conv.weight_name())?;
        let b = if self.conv.spec.bias { Some(p.get(&self.conv.bias_name())?) } else { None };
        recurrent_conv_layer(g, x, w, b, &self.conv.spec, self.depth)
    }
}

/// Recurrent residual convolutional unit: a 1x1x1 projection `h` to the
/// unit's width, `layers_per_unit` stacked recurrent 3x3x3 layers over
/// `h`, and the residual sum `h + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rrcu {
    pub name: String,
    pub cfg: RrcuConfig,
    pub proj: ConvLayer,
    pub layers: Vec<RecurrentConv>,
}

impl Rrcu {
    pub fn new(name: impl Into<String>, in_channels: usize, cfg: RrcuConfig) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let f = cfg.filters;
        let proj = ConvLayer::new(format!("{name}.proj"), ConvSpec::cube(in_channels, f, 1)).linear();
        let layers = (0..cfg.layers_per_unit)
            .map(|i| RecurrentConv {
                conv: ConvLayer::new(format!("{name}.rcl{i}"), ConvSpec::cube(f, f, 3).with_dilation(cfg.dilation))
                    .with_gain(recurrent_gain(cfg.depth)),
                depth: cfg.depth,
            })
            .collect();
        Ok(Rrcu { name, cfg, proj, layers })
    }

    /// Projection and recurrent branch, before the residual sum.
    pub fn forward_parts<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let h = self.proj.forward(g, p, x)?;
        let mut y = h;
        for layer in &self.layers {
            y = layer.forward(g, p, y)?;
        }
        Ok((h, y))
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let (h, y) = self.forward_parts(g, p, x)?;
        g.add(h, y)
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        let mut v = self.proj.params();
        for l in &self.layers {
            v.extend(l.conv.params());
        }
        v
    }

    pub fn rows(&self) -> Vec<LayerRow> {
        std::iter::once(self.proj.row()).chain(self.layers.iter().map(|l| l.conv.row())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeConfig {
    pub channels: usize,
    pub reduction: usize,
}

impl SeConfig {
    pub fn reduced_width(&self) -> usize {
        (self.channels / self.reduction.max(1)).max(1)
    }
}

/// Squeeze-and-excitation residual module:
/// `s = sigmoid(fc2(relu(fc1(gap(x)))))`, output `relu(x + x * s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeResidual {
    pub name: String,
    pub cfg: SeConfig,
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

impl SeResidual {
    pub fn new(name: impl Into<String>, cfg: SeConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.reduction == 0 {
            return Err(Error::Config(format!("SE channels and reduction must be >= 1: {cfg:?}")));
        }
        let name = name.into();
        let r = cfg.reduced_width();
        Ok(SeResidual {
            fc1: DenseLayer::new(format!("{name}.fc1"), cfg.channels, r),
            fc2: DenseLayer::new(format!("{name}.fc2"), r, cfg.channels).linear(),
            name,
            cfg,
        })
    }

    /// Per-channel excitation `s`, shaped `[N, C, 1, 1, 1]`.
    pub fn excitation<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = g.shape(x).channels();
        if c != self.cfg.channels {
            return Err(Error::shape("se_residual", format!("input has {c} channels, block expects {}", self.cfg.channels)));
        }
        let squeezed = g.global_avg_pool(x)?;
        let a = self.fc1.forward(g, p, squeezed)?;
        let a = g.relu(a)?;
        let s = self.fc2.forward(g, p, a)?;
        g.sigmoid(s)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = self.excitation(g, p, x)?;
        let scaled = g.scale_channels(x, s)?;
        let sum = g.add(x, scaled)?;
        g.relu(sum)
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    pub fn rows(&self) -> Vec<LayerRow> {
        vec![self.fc1.row(), self.fc2.row()]
    }
}

/// Dynamic RRCU: an RRCU followed by an SE residual module.
#[derive(Debug, Clone, PartialEq)]
pub struct Drrcu {
    pub rrcu: Rrcu,
    pub se: SeResidual,
}

impl Drrcu {
    pub fn new(name: impl Into<String>, in_channels: usize, rrcu: RrcuConfig, se: SeConfig) -> Result<Self> {
        if se.channels != rrcu.filters {
            return Err(Error::Config(format!(
                "SE module width {} must equal RRCU filters {}",
                se.channels, rrcu.filters
            )));
        }
        let name = name.into();
        Ok(Drrcu {
            rrcu: Rrcu::new(format!("{name}.rrcu"), in_channels, rrcu)?,
            se: SeResidual::new(format!("{name}.se"), se)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let r = self.rrcu.forward(g, p, x)?;
        self.se.forward(g, p, r)
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        let mut v = self.rrcu.params();
        v.extend(self.se.params());
        v
    }

    pub fn rows(&self) -> Vec<LayerRow> {
        let mut v = self.rrcu.rows();
        v.extend(self.se.rows());
        v
    }
}

/// The per-level unit of the U-Net body.
#[derive(Debug, Clone, PartialEq)]
pub enum LevelUnit {
    Rrcu(Rrcu),
    Drrcu(Drrcu),
}

impl LevelUnit {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            LevelUnit::Rrcu(u) => u.forward(g, p, x),
            LevelUnit::Drrcu(u) => u.forward(g, p, x),
        }
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        match self {
            LevelUnit::Rrcu(u) => u.params(),
            LevelUnit::Drrcu(u) => u.params(),
        }
    }

    pub fn rows(&self) -> Vec<LayerRow> {
        match self {
            LevelUnit::Rrcu(u) => u.rows(),
            LevelUnit::Drrcu(u) => u.rows(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            LevelUnit::Rrcu(u) => u.cfg.filters,
            LevelUnit::Drrcu(u) => u.rrcu.cfg.filters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    /// Sum of the one-filter strided branch convolutions.
    AddBranches,
    /// Concatenation of the branches (plus an optional max-pool branch)
    /// fused back to one channel by a 1x1x1 convolution.
    InceptionConcat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownsampleConfig {
    pub mode: DownsampleMode,
    pub branch_kernels: Vec<[usize; 3]>,
    pub stride: [usize; 3],
    pub include_maxpool_branch: bool,
}

impl DownsampleConfig {
    pub fn add_branches() -> Self {
        DownsampleConfig {
            mode: DownsampleMode::AddBranches,
            branch_kernels: vec![[1; 3], [3; 3], [5; 3]],
            stride: [2; 3],
            include_maxpool_branch: false,
        }
    }

    pub fn inception_concat() -> Self {
        DownsampleConfig { mode: DownsampleMode::InceptionConcat, include_maxpool_branch: true, ..Self::add_branches() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch_kernels.is_empty() {
            return Err(Error::Config("downsampler needs at least one branch".into()));
        }
        if self.branch_kernels.iter().flatten().chain(&self.stride).any(|&v| v == 0) {
            return Err(Error::Config("downsampler kernels and stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// One-filter strided stage that shrinks every spatial extent by the stride.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleStage {
    pub name: String,
    pub cfg: DownsampleConfig,
    pub in_channels: usize,
    pub branches: Vec<ConvLayer>,
    pub fuse: Option<ConvLayer>,
}

impl DownsampleStage {
    pub fn new(name: impl Into<String>, in_channels: usize, cfg: DownsampleConfig) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let branches = cfg
            .branch_kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                ConvLayer::new(format!("{name}.branch{i}"), ConvSpec::new(in_channels, 1, k).with_stride(cfg.stride)).linear()
            })
            .collect::<Vec<_>>();
        let fuse = match cfg.mode {
            DownsampleMode::AddBranches => None,
            DownsampleMode::InceptionConcat => {
                let width = branches.len() + if cfg.include_maxpool_branch { in_channels } else { 0 };
                Some(ConvLayer::new(format!("{name}.fuse"), ConvSpec::cube(width, 1, 1)).linear())
            }
        };
        Ok(DownsampleStage { name, cfg, in_channels, branches, fuse })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let extents = g.shape(x).spatial();
        for a in 0..3 {
            if extents[a] % self.cfg.stride[a] != 0 {
                return Err(Error::Indivisible { extents, divisor: self.cfg.stride[a] });
            }
        }
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        for b in &self.branches {
            outs.push(b.forward(g, p, x)?);
        }
        match &self.fuse {
            None => {
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = g.add(acc, o)?;
                }
                Ok(acc)
            }
            Some(fuse) => {
                if self.cfg.include_maxpool_branch {
                    outs.push(g.maxpool3d(x, self.cfg.stride, self.cfg.stride)?);
                }
                let cat = g.concat_channels(&outs)?;
                fuse.forward(g, p, cat)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        self.branches.iter().chain(&self.fuse).flat_map(ConvLayer::params).collect()
    }

    pub fn rows(&self) -> Vec<LayerRow> {
        self.branches.iter().chain(&self.fuse).map(ConvLayer::row).collect()
    }
}

/// One-filter 2x2x2 transposed convolution with stride 2.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleStage {
    pub conv: ConvLayer,
}

impl UpsampleStage {
    pub fn new(name: impl Into<String>, in_channels: usize) -> Self {
        UpsampleStage { conv: ConvLayer::transposed(name, ConvSpec::new(in_channels, 1, [2; 3]).with_stride([2; 3])).linear() }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.conv.forward(g, p, x)
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        self.conv.params()
    }

    pub fn rows(&self) -> Vec<LayerRow> {
        vec![self.conv.row()]
    }
}
