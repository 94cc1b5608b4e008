//! Full network assembly, shape checks, parameter audit, and inference.
//!
//! Topology, for `s = stem_stages`:
//!
//! ```text
//! input (1 ch) ─ s × downsample (1 ch) ─ L1 unit (f1)
//!   ─ [maxpool 2 → 1x1x1 conv → Lk unit (fk)] for k = 2..4
//!   ─ [2x2x2 up-conv → concat skip k → 1x1x1 conv → Lk unit (fk)] for k = 3..1
//!   ─ s × upsample (1 ch) ─ 1x1x1 conv (1 ch) ─ sigmoid
//! ```

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    Bound, ConvLayer, DownsampleConfig, DownsampleStage, Drrcu, LayerRow, LevelUnit, ParamDecl, ParamStore, RowOutput,
    Rrcu, RrcuConfig, SeConfig, UpsampleStage,
};
use crate::ops::ConvSpec;
use crate::tensor::{Element, Shape, Tensor};

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Published parameter total of the default configuration.
pub const DEFAULT_REFERENCE_PARAMS: usize = 20_306_691;
/// Published parameter total of the dynamic configuration.
pub const DYNAMIC_REFERENCE_PARAMS: usize = 12_953_330;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// RRCU level units, additive downsampler.
    Default,
    /// DRRCU level units with per-level recurrence depth, inception downsampler.
    Dynamic,
}

impl Variant {
    pub fn reference_params(self) -> usize {
        match self {
            Variant::Default => DEFAULT_REFERENCE_PARAMS,
            Variant::Dynamic => DYNAMIC_REFERENCE_PARAMS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub filters: [usize; 4],
    pub depths: [usize; 4],
    pub stem_stages: usize,
    /// Dilation rate of the encoder's 3x3x3 recurrent convolutions.
    pub encoder_dilation: usize,
    pub downsample: DownsampleConfig,
    pub se_reduction: usize,
    pub layers_per_unit: usize,
    /// Whether each encoder max-pool is followed by a 1x1x1 convolution.
    pub transition_conv: bool,
}

impl ModelConfig {
    pub fn default_preset() -> Self {
        ModelConfig {
            variant: Variant::Default,
            filters: [40, 80, 160, 320],
            depths: [3, 3, 3, 3],
            stem_stages: 3,
            encoder_dilation: 2,
            downsample: DownsampleConfig::add_branches(),
            se_reduction: 16,
            layers_per_unit: 2,
            transition_conv: true,
        }
    }

    pub fn dynamic_preset() -> Self {
        ModelConfig {
            variant: Variant::Dynamic,
            filters: [20, 60, 120, 240],
            depths: [1, 2, 3, 4],
            downsample: DownsampleConfig::inception_concat(),
            ..Self::default_preset()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_preset()),
            "dynamic" => Ok(Self::dynamic_preset()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected `default` or `dynamic`)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.contains(&0) {
            return Err(Error::Config(format!("filter counts must be >= 1: {:?}", self.filters)));
        }
        if self.encoder_dilation == 0 {
            return Err(Error::Config("encoder dilation must be >= 1".into()));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("SE reduction must be >= 1".into()));
        }
        if self.layers_per_unit == 0 {
            return Err(Error::Config("layers_per_unit must be >= 1".into()));
        }
        self.downsample.validate()
    }

    /// Per-axis factor every input extent must be divisible by.
    pub fn required_divisor(&self) -> [usize; 3] {
        let mut d = [8; 3];
        for (a, v) in d.iter_mut().enumerate() {
            *v *= self.downsample.stride[a].pow(self.stem_stages as u32);
        }
        d
    }
}

/// Parameter-free description of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub config: ModelConfig,
    stem: Vec<DownsampleStage>,
    encoder: Vec<LevelUnit>,
    transitions: Vec<Option<ConvLayer>>,
    ups: Vec<ConvLayer>,
    fuses: Vec<ConvLayer>,
    decoder: Vec<LevelUnit>,
    head: Vec<UpsampleStage>,
    final_conv: ConvLayer,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let f = cfg.filters;
        let unit = |name: String, cin: usize, level: usize, encoder: bool| -> Result<LevelUnit> {
            let dil = if encoder { cfg.encoder_dilation } else { 1 };
            let rc = RrcuConfig {
                filters: f[level],
                depth: cfg.depths[level],
                dilation: [dil; 3],
                layers_per_unit: cfg.layers_per_unit,
            };
            Ok(match cfg.variant {
                Variant::Default => LevelUnit::Rrcu(Rrcu::new(name, cin, rc)?),
                Variant::Dynamic => LevelUnit::Drrcu(Drrcu::new(
                    name,
                    cin,
                    rc,
                    SeConfig { channels: f[level], reduction: cfg.se_reduction },
                )?),
            })
        };

        let stem = (0..cfg.stem_stages)
            .map(|i| DownsampleStage::new(format!("stem.{i}"), 1, cfg.downsample.clone()))
            .collect::<Result<Vec<_>>>()?;

        let mut encoder = vec![unit("enc1".into(), 1, 0, true)?];
        let mut transitions = Vec::new();
        for k in 1..4 {
            transitions.push(
                cfg.transition_conv
                    .then(|| ConvLayer::new(format!("enc{}.transition", k + 1), ConvSpec::cube(f[k - 1], f[k - 1], 1))),
            );
            encoder.push(unit(format!("enc{}", k + 1), f[k - 1], k, true)?);
        }

        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut decoder = Vec::new();
        for k in 0..3 {
            let up_spec = ConvSpec::new(f[k + 1], f[k], [2; 3]).with_stride([2; 3]);
            ups.push(ConvLayer::transposed(format!("dec{}.up", k + 1), up_spec).linear());
            fuses.push(ConvLayer::new(format!("dec{}.fuse", k + 1), ConvSpec::cube(2 * f[k], f[k], 1)));
            decoder.push(unit(format!("dec{}", k + 1), f[k], k, false)?);
        }

        let head = (0..cfg.stem_stages)
            .map(|i| UpsampleStage::new(format!("head.{i}"), if i == 0 { f[0] } else { 1 }))
            .collect::<Vec<_>>();
        let final_in = if cfg.stem_stages == 0 { f[0] } else { 1 };
        let final_conv = ConvLayer::new("final", ConvSpec::cube(final_in, 1, 1)).linear();

        Ok(Architecture { config: cfg, stem, encoder, transitions, ups, fuses, decoder, head, final_conv })
    }

    /// Every parameter in deterministic declaration order.
    pub fn param_decls(&self) -> Vec<ParamDecl> {
        let mut v = Vec::new();
        for s in &self.stem {
            v.extend(s.params());
        }
        v.extend(self.encoder[0].params());
        for k in 0..3 {
            if let Some(t) = &self.transitions[k] {
                v.extend(t.params());
            }
            v.extend(self.encoder[k + 1].params());
        }
        for k in (0..3).rev() {
            v.extend(self.ups[k].params());
            v.extend(self.fuses[k].params());
            v.extend(self.decoder[k].params());
        }
        for h in &self.head {
            v.extend(h.params());
        }
        v.extend(self.final_conv.params());
        v
    }

    pub fn count_parameters(&self) -> usize {
        self.param_decls().iter().map(ParamDecl::numel).sum()
    }

    /// Layer rows in forward order, each tagged with its output resolution
    /// as a power-of-two reduction of the input.
    fn rows(&self) -> Vec<(LayerRow, usize)> {
        let s = self.config.stem_stages;
        let mut v = Vec::new();
        for (i, st) in self.stem.iter().enumerate() {
            v.extend(st.rows().into_iter().map(|r| (r, i + 1)));
        }
        v.extend(self.encoder[0].rows().into_iter().map(|r| (r, s)));
        for k in 0..3 {
            if let Some(t) = &self.transitions[k] {
                v.push((t.row(), s + k + 1));
            }
            v.extend(self.encoder[k + 1].rows().into_iter().map(|r| (r, s + k + 1)));
        }
        for k in (0..3).rev() {
            v.push((self.ups[k].row(), s + k));
            v.push((self.fuses[k].row(), s + k));
            v.extend(self.decoder[k].rows().into_iter().map(|r| (r, s + k)));
        }
        for (i, h) in self.head.iter().enumerate() {
            v.extend(h.rows().into_iter().map(|r| (r, s - 1 - i)));
        }
        v.push((self.final_conv.row(), 0));
        v
    }

    /// Per-layer table for an input of the given spatial extents.
    pub fn summarize(&self, input: [usize; 3]) -> Summary {
        let rows = self
            .rows()
            .into_iter()
            .map(|(row, scale)| {
                let shape = match row.output {
                    RowOutput::Volume { channels } => {
                        let sp = input.map(|e| e >> scale);
                        Shape::new(1, channels, sp[0], sp[1], sp[2])
                    }
                    RowOutput::Vector { features } => Shape::new(1, features, 1, 1, 1),
                };
                SummaryRow { name: row.name, kind: row.kind, output: shape, params: row.params }
            })
            .collect();
        Summary { variant: self.config.variant, input, rows, total: self.count_parameters() }
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.channels() != 1 {
            return Err(Error::shape("model", format!("expected a single-channel input, got {shape}")));
        }
        let extents = shape.spatial();
        let div = self.config.required_divisor();
        for a in 0..3 {
            if extents[a] % div[a] != 0 {
                return Err(Error::Indivisible { extents, divisor: div[a] });
            }
        }
        Ok(())
    }

    /// Records the forward pass on `g`; `p` must bind every parameter.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let mut cur = x;
        for st in &self.stem {
            cur = st.forward(g, p, cur)?;
        }
        cur = self.encoder[0].forward(g, p, cur)?;
        let mut skips = vec![cur];
        for k in 0..3 {
            let mut down = g.maxpool3d(cur, [2; 3], [2; 3])?;
            if let Some(t) = &self.transitions[k] {
                let y = t.forward(g, p, down)?;
                down = g.relu(y)?;
            }
            cur = self.encoder[k + 1].forward(g, p, down)?;
            skips.push(cur);
        }
        for k in (0..3).rev() {
            let up = self.ups[k].forward(g, p, cur)?;
            let cat = g.concat_channels(&[up, skips[k]])?;
            let fused = self.fuses[k].forward(g, p, cat)?;
            let fused = g.relu(fused)?;
            cur = self.decoder[k].forward(g, p, fused)?;
        }
        for h in &self.head {
            cur = h.forward(g, p, cur)?;
        }
        let logits = self.final_conv.forward(g, p, cur)?;
        g.sigmoid(logits)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub kind: &'static str,
    pub output: Shape,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub variant: Variant,
    pub input: [usize; 3],
    pub rows: Vec<SummaryRow>,
    pub total: usize,
}

impl Summary {
    pub fn row_sum(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn reference(&self) -> usize {
        self.variant.reference_params()
    }

    /// `total - reference`.
    pub fn delta(&self) -> i64 {
        self.total as i64 - self.reference() as i64
    }
}

fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        writeln!(f, "{:<name_w$}  {:<16}  {:<24}  {:>12}", "layer", "kind", "output", "params")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<name_w$}  {:<16}  {:<24}  {:>12}",
                r.name,
                r.kind,
                r.output.to_string(),
                group_thousands(r.params)
            )?;
        }
        writeln!(f, "total parameters:     {}", group_thousands(self.total))?;
        writeln!(f, "reference ({:?}): {}", self.variant, group_thousands(self.reference()))?;
        let d = self.delta();
        let sign = if d >= 0 { "+" } else { "-" };
        write!(f, "delta:                {sign}{}", group_thousands(d.unsigned_abs() as usize))
    }
}

/// Architecture plus materialised parameters.
#[derive(Clone, PartialEq)]
pub struct Model<T> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Element> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model").field("config", &self.arch.config).field("params", &self.params).finish()
    }
}

impl<T: Element> Model<T> {
    /// He-normal weights and zero biases drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::init_from(&arch.param_decls(), &mut rng)?;
        Ok(Model { arch, params })
    }

    pub fn from_parts(arch: Architecture, params: ParamStore<T>) -> Result<Self> {
        let decls = arch.param_decls();
        if decls.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter store holds {} tensors, architecture declares {}",
                params.len(),
                decls.len()
            )));
        }
        for (d, (name, t)) in decls.iter().zip(params.iter()) {
            if d.name != name || d.shape != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` {} does not match declaration `{}` {}",
                    t.shape(),
                    d.name,
                    d.shape
                )));
            }
        }
        Ok(Model { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn summarize(&self, input: [usize; 3]) -> Summary {
        self.arch.summarize(input)
    }

    /// Inference without recording gradients.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = self.arch.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model { arch: self.arch.clone(), params: self.params.cast() }
    }
}
