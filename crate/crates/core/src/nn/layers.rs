use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::ConvSpec;
use crate::tensor::{Element, Shape};

use super::{Bound, LayerRow, ParamDecl, RowOutput, LINEAR_GAIN, RELU_GAIN};

/// A convolution (or transposed convolution) with parameters
/// `<name>.weight` and, when the spec has one, `<name>.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub transposed: bool,
    /// Initialisation gain, see [`ParamDecl`].
    pub gain: f64,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        ConvLayer { name: name.into(), spec, transposed: false, gain: RELU_GAIN }
    }

    pub fn transposed(name: impl Into<String>, spec: ConvSpec) -> Self {
        ConvLayer { name: name.into(), spec, transposed: true, gain: RELU_GAIN }
    }

    /// Marks the layer as not followed by a ReLU (unit init gain).
    pub fn linear(mut self) -> Self {
        self.gain = LINEAR_GAIN;
        self
    }

    /// Overrides the init gain.
    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        let k = self.spec.kernel_volume();
        let (shape, fan_in) = if self.transposed {
            let taps = (k / self.spec.stride.iter().product::<usize>()).max(1);
            (self.spec.transposed_weight_shape(), self.spec.in_channels * taps)
        } else {
            (self.spec.weight_shape(), self.spec.in_channels * k)
        };
        let mut v = vec![ParamDecl::weight(self.weight_name(), shape, fan_in, self.gain)];
        if self.spec.bias {
            v.push(ParamDecl::zeros(self.bias_name(), self.spec.bias_shape()));
        }
        v
    }

    pub fn row(&self) -> LayerRow {
        LayerRow {
            name: self.name.clone(),
            kind: if self.transposed { "conv_transpose3d" } else { "conv3d" },
            output: RowOutput::Volume { channels: self.spec.out_channels },
            params: self.spec.param_count(),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = if self.spec.bias { Some(p.get(&self.bias_name())?) } else { None };
        if self.transposed {
            g.conv_transpose3d(x, w, b, &self.spec)
        } else {
            g.conv3d(x, w, b, &self.spec)
        }
    }
}

/// Fully connected layer over flattened features.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub gain: f64,
}

impl DenseLayer {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        DenseLayer { name: name.into(), in_features, out_features, gain: RELU_GAIN }
    }

    pub fn linear(mut self) -> Self {
        self.gain = LINEAR_GAIN;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        vec![
            ParamDecl::weight(
                self.weight_name(),
                Shape::new(self.out_features, self.in_features, 1, 1, 1),
                self.in_features,
                self.gain,
            ),
            ParamDecl::zeros(self.bias_name(), Shape::new(self.out_features, 1, 1, 1, 1)),
        ]
    }

    pub fn row(&self) -> LayerRow {
        LayerRow {
            name: self.name.clone(),
            kind: "dense",
            output: RowOutput::Vector { features: self.out_features },
            params: self.in_features * self.out_features + self.out_features,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        g.dense(x, w, Some(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_counts() {
        let a = ConvLayer::new("a", ConvSpec::cube(1, 40, 3));
        assert_eq!(a.row().params, 1120);
        let b = ConvLayer::new("b", ConvSpec::cube(40, 80, 1));
        assert_eq!(b.row().params, 3280);
        let total: usize = b.params().iter().map(ParamDecl::numel).sum();
        assert_eq!(total, 3280);
    }

    #[test]
    fn transposed_weight_layout() {
        let t = ConvLayer::transposed("up", ConvSpec::new(8, 1, [2; 3]).with_stride([2; 3]));
        let p = t.params();
        assert_eq!(p[0].shape, Shape::new(8, 1, 2, 2, 2));
        assert_eq!(p[0].fan_in, 8);
        assert_eq!(t.row().params, 8 * 8 + 1);
    }
}
