//! Named parameter storage and the network's building blocks.

mod blocks;
mod layers;

use indexmap::IndexMap;
use rand::Rng;

pub use blocks::{
    recurrent_conv_layer, DownsampleConfig, DownsampleMode, DownsampleStage, Drrcu, LevelUnit, RecurrentConv, Rrcu,
    RrcuConfig, SeConfig, SeResidual, UpsampleStage,
};
pub use layers::{ConvLayer, DenseLayer};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Shape, Tensor};

/// A parameter a layer needs. Weights are drawn from `N(0, gain / fan_in)`;
/// `fan_in == 0` marks a zero-initialised tensor (biases).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub fan_in: usize,
    pub gain: f64,
}

/// He gain, for layers whose output goes through a ReLU.
pub const RELU_GAIN: f64 = 2.0;
/// Unit gain, for layers whose output is used linearly.
pub const LINEAR_GAIN: f64 = 1.0;

impl ParamDecl {
    pub fn weight(name: impl Into<String>, shape: Shape, fan_in: usize, gain: f64) -> Self {
        ParamDecl { name: name.into(), shape, fan_in, gain }
    }

    pub fn zeros(name: impl Into<String>, shape: Shape) -> Self {
        ParamDecl { name: name.into(), shape, fan_in: 0, gain: 0.0 }
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }
}

/// Output extent of a summary row relative to the block it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowOutput {
    /// `[N, channels, D, H, W]` at the block's resolution.
    Volume { channels: usize },
    /// `[N, features, 1, 1, 1]`.
    Vector { features: usize },
}

/// One parameterised layer as it appears in a model summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    pub kind: &'static str,
    pub output: RowOutput,
    pub params: usize,
}

/// Parameters keyed by stable dotted path names, in declaration order.
#[derive(Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Element> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.tensors.iter().map(|(k, v)| (k, v.shape()))).finish()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter path `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    /// Materialises `decls` with fan-in scaled normal weights and zero biases.
    pub fn init_from<R: Rng + ?Sized>(decls: &[ParamDecl], rng: &mut R) -> Result<Self> {
        let mut store = Self::new();
        for d in decls {
            let t = if d.fan_in == 0 {
                Tensor::zeros(d.shape)
            } else {
                Tensor::randn(d.shape, (d.gain / d.fan_in as f64).sqrt(), rng)
            };
            store.insert(d.name.clone(), t)?;
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Places every parameter on the tape as a gradient-carrying leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, v)| (k.clone(), g.variable(v.clone()))).collect() }
    }

    /// Places every parameter on the tape as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect() }
    }
}

/// Parameter name to tape handle for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Binds an explicit set of handles, e.g. ones created by a gradient
    /// checker.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: pairs.into_iter().collect() }
    }
}
