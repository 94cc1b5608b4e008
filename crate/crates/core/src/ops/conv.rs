//! Direct and im2col 3-D convolution kernels, their adjoints, and the
//! geometry shared between them.
//!
//! Weights are `[C_out, C_in, kD, kH, kW]`. A transposed convolution reuses
//! the same layout read as `[C_in_t, C_out_t, ...]`, so its forward pass is
//! exactly the input-gradient map of the matching convolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::{Element, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Forward-convolution implementation. Both produce the same values up to
/// floating-point reassociation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    #[default]
    Direct,
    Im2col,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, dilation 1, same padding, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        ConvSpec {
            kernel,
            stride: [1; 3],
            dilation: [1; 3],
            padding: Padding::Same,
            in_channels,
            out_channels,
            bias: true,
        }
    }

    pub fn cube(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::new(in_channels, out_channels, [k; 3])
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: [usize; 3]) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Shape of the weight tensor for a forward convolution.
    pub fn weight_shape(&self) -> Shape {
        let [kd, kh, kw] = self.kernel;
        Shape::new(self.out_channels, self.in_channels, kd, kh, kw)
    }

    /// Shape of the weight tensor when this spec describes a transposed
    /// convolution.
    pub fn transposed_weight_shape(&self) -> Shape {
        let [kd, kh, kw] = self.kernel;
        Shape::new(self.in_channels, self.out_channels, kd, kh, kw)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(self.out_channels, 1, 1, 1, 1)
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel_volume()
            + if self.bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kernel.iter().chain(&self.stride).chain(&self.dilation).all(|&v| v >= 1)
            && self.in_channels >= 1
            && self.out_channels >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("convolution extents must be >= 1: {self:?}")))
        }
    }

    /// Output spatial extents of the forward convolution.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        Ok(ConvGeom::forward(self, input)?.output)
    }

    /// Output spatial extents when used as a transposed convolution.
    pub fn transposed_output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        Ok(ConvGeom::transposed(self, input)?.input)
    }
}

/// Resolved geometry of a forward convolution from `input` to `output`
/// extents, with the leading padding on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn forward(spec: &ConvSpec, input: [usize; 3]) -> Result<Self> {
        spec.validate()?;
        let mut output = [0; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            let (i, k, s, d) = (input[a], spec.kernel[a], spec.stride[a], spec.dilation[a]);
            if i == 0 {
                return Err(Error::shape("conv3d", format!("empty spatial axis in {input:?}")));
            }
            let span = d * (k - 1) + 1;
            match spec.padding {
                Padding::Same => {
                    let o = i.div_ceil(s);
                    let total = ((o - 1) * s + span).saturating_sub(i);
                    output[a] = o;
                    pad[a] = total / 2;
                }
                Padding::Valid => {
                    if i < span {
                        return Err(Error::shape(
                            "conv3d",
                            format!("valid window {span} exceeds input extent {i} on axis {a}"),
                        ));
                    }
                    output[a] = (i - span) / s + 1;
                }
            }
        }
        Ok(ConvGeom {
            input,
            output,
            kernel: spec.kernel,
            stride: spec.stride,
            dilation: spec.dilation,
            pad,
        })
    }

    /// Geometry of a transposed convolution whose input has extents
    /// `input`. The returned geometry is that of the adjoint forward
    /// convolution, i.e. `geom.output == input`.
    pub fn transposed(spec: &ConvSpec, input: [usize; 3]) -> Result<Self> {
        spec.validate()?;
        let mut big = [0; 3];
        for a in 0..3 {
            if input[a] == 0 {
                return Err(Error::shape("conv_transpose3d", format!("empty spatial axis in {input:?}")));
            }
            big[a] = match spec.padding {
                Padding::Same => input[a] * spec.stride[a],
                Padding::Valid => (input[a] - 1) * spec.stride[a] + spec.dilation[a] * (spec.kernel[a] - 1) + 1,
            };
        }
        let geom = Self::forward(spec, big)?;
        debug_assert_eq!(geom.output, input);
        Ok(geom)
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Offset `k*dilation - pad` on one axis and the range of output indices
    /// `o` for which `o*stride + offset` lands inside the input.
    #[inline]
    fn tap(&self, axis: usize, k: usize) -> (isize, usize, usize) {
        let off = (k * self.dilation[axis]) as isize - self.pad[axis] as isize;
        let s = self.stride[axis] as isize;
        let n_in = self.input[axis] as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if n_in - off <= 0 { 0 } else { (n_in - off + s - 1) / s };
        let hi = hi.min(self.output[axis] as isize);
        (off, lo as usize, (hi.max(lo)) as usize)
    }
}

/// Visits every (kernel tap, output row) pair of one channel pair, handing
/// the closure the flat input row start, output row start, and the valid
/// `ow` range. `kidx` is the flat kernel index.
#[inline]
fn for_each_row(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
    let [kd, kh, kw] = geom.kernel;
    let [_, ih_n, iw_n] = geom.input;
    let [_, oh_n, ow_n] = geom.output;
    let s = geom.stride;
    let _ = ow_n;
    for a in 0..kd {
        let (off_d, lo_d, hi_d) = geom.tap(0, a);
        for b in 0..kh {
            let (off_h, lo_h, hi_h) = geom.tap(1, b);
            for c in 0..kw {
                let (off_w, lo_w, hi_w) = geom.tap(2, c);
                if lo_w >= hi_w {
                    continue;
                }
                let kidx = (a * kh + b) * kw + c;
                for od in lo_d..hi_d {
                    let id = (od * s[0]) as isize + off_d;
                    for oh in lo_h..hi_h {
                        let ih = (oh * s[1]) as isize + off_h;
                        let in_row = (id as usize * ih_n + ih as usize) * iw_n;
                        let out_row = (od * oh_n + oh) * geom.output[2];
                        f(kidx, in_row, out_row, lo_w, hi_w, off_w);
                    }
                }
            }
        }
    }
}

/// Direct forward convolution. `x` is `[N, C_in, input...]`, `w` is
/// `[C_out, C_in, kernel...]`; returns `[N, C_out, output...]`.
pub fn conv3d_forward<T: Element>(
    x: &[T],
    n: usize,
    c_in: usize,
    w: &[T],
    c_out: usize,
    bias: Option<&[T]>,
    geom: &ConvGeom,
) -> Vec<T> {
    let (li, lo, kv) = (geom.in_len(), geom.out_len(), geom.kernel_volume());
    let sw = geom.stride[2];
    let mut out = vec![T::zero(); n * c_out * lo];
    for_each_chunk(&mut out, lo, |idx, dst| {
        let (b, co) = (idx / c_out, idx % c_out);
        if let Some(bias) = bias {
            dst.fill(bias[co]);
        }
        for ci in 0..c_in {
            let src = &x[(b * c_in + ci) * li..][..li];
            let wk = &w[(co * c_in + ci) * kv..][..kv];
            for_each_row(geom, |kidx, in_row, out_row, lo_w, hi_w, off_w| {
                let wv = wk[kidx];
                if wv == T::zero() {
                    return;
                }
                let orow = &mut dst[out_row..];
                if sw == 1 {
                    let start = in_row + (lo_w as isize + off_w) as usize;
                    for (o, &v) in orow[lo_w..hi_w].iter_mut().zip(&src[start..start + hi_w - lo_w]) {
                        *o = *o + wv * v;
                    }
                    return;
                }
                for ow in lo_w..hi_w {
                    let iw = ((ow * sw) as isize + off_w) as usize;
                    orow[ow] = orow[ow] + wv * src[in_row + iw];
                }
            });
        }
    });
    out
}

/// Forward convolution through an explicit column matrix and a dense
/// product. Agrees with [`conv3d_forward`] up to summation order.
pub fn conv3d_forward_im2col<T: Element>(
    x: &[T],
    n: usize,
    c_in: usize,
    w: &[T],
    c_out: usize,
    bias: Option<&[T]>,
    geom: &ConvGeom,
) -> Vec<T> {
    let (li, lo, kv) = (geom.in_len(), geom.out_len(), geom.kernel_volume());
    let sw = geom.stride[2];
    let rows = c_in * kv;
    let mut out = vec![T::zero(); n * c_out * lo];
    let mut cols = vec![T::zero(); rows * lo];
    for b in 0..n {
        cols.iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..c_in {
            let src = &x[(b * c_in + ci) * li..][..li];
            for_each_row(geom, |kidx, in_row, out_row, lo_w, hi_w, off_w| {
                let row = &mut cols[(ci * kv + kidx) * lo + out_row..];
                for ow in lo_w..hi_w {
                    let iw = ((ow * sw) as isize + off_w) as usize;
                    row[ow] = src[in_row + iw];
                }
            });
        }
        let dst = &mut out[b * c_out * lo..][..c_out * lo];
        let cols = &cols;
        for_each_chunk(dst, lo, |co, o| {
            if let Some(bias) = bias {
                o.fill(bias[co]);
            }
            let wrow = &w[co * rows..][..rows];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                for (ov, &cv) in o.iter_mut().zip(&cols[r * lo..][..lo]) {
                    *ov = *ov + wv * cv;
                }
            }
        });
    }
    out
}

/// Gradient of the forward convolution with respect to its input: scatters
/// `dy` (`[N, C_out, output...]`) back through `w` into `[N, C_in, input...]`.
/// This is also the forward map of the transposed convolution.
pub fn conv3d_backward_input<T: Element>(
    dy: &[T],
    n: usize,
    c_out: usize,
    w: &[T],
    c_in: usize,
    geom: &ConvGeom,
) -> Vec<T> {
    let (li, lo, kv) = (geom.in_len(), geom.out_len(), geom.kernel_volume());
    let sw = geom.stride[2];
    let mut dx = vec![T::zero(); n * c_in * li];
    for_each_chunk(&mut dx, li, |idx, dst| {
        let (b, ci) = (idx / c_in, idx % c_in);
        for co in 0..c_out {
            let g = &dy[(b * c_out + co) * lo..][..lo];
            let wk = &w[(co * c_in + ci) * kv..][..kv];
            for_each_row(geom, |kidx, in_row, out_row, lo_w, hi_w, off_w| {
                let wv = wk[kidx];
                if wv == T::zero() {
                    return;
                }
                if sw == 1 {
                    let start = in_row + (lo_w as isize + off_w) as usize;
                    let len = hi_w - lo_w;
                    for (d, &gv) in dst[start..start + len].iter_mut().zip(&g[out_row + lo_w..out_row + hi_w]) {
                        *d = *d + wv * gv;
                    }
                    return;
                }
                for ow in lo_w..hi_w {
                    let iw = ((ow * sw) as isize + off_w) as usize;
                    dst[in_row + iw] = dst[in_row + iw] + wv * g[out_row + ow];
                }
            });
        }
    });
    dx
}

/// Gradient of the forward convolution with respect to its weights.
pub fn conv3d_backward_weight<T: Element>(
    x: &[T],
    dy: &[T],
    n: usize,
    c_in: usize,
    c_out: usize,
    geom: &ConvGeom,
) -> Vec<T> {
    let (li, lo, kv) = (geom.in_len(), geom.out_len(), geom.kernel_volume());
    let sw = geom.stride[2];
    let mut dw = vec![T::zero(); c_out * c_in * kv];
    for_each_chunk(&mut dw, c_in * kv, |co, dst| {
        for b in 0..n {
            let g = &dy[(b * c_out + co) * lo..][..lo];
            for ci in 0..c_in {
                let src = &x[(b * c_in + ci) * li..][..li];
                let acc = &mut dst[ci * kv..][..kv];
                for_each_row(geom, |kidx, in_row, out_row, lo_w, hi_w, off_w| {
                    let mut s = T::zero();
                    if sw == 1 {
                        let start = in_row + (lo_w as isize + off_w) as usize;
                        let len = hi_w - lo_w;
                        for (&gv, &v) in g[out_row + lo_w..out_row + hi_w].iter().zip(&src[start..start + len]) {
                            s = s + gv * v;
                        }
                    } else {
                        for ow in lo_w..hi_w {
                            let iw = ((ow * sw) as isize + off_w) as usize;
                            s = s + g[out_row + ow] * src[in_row + iw];
                        }
                    }
                    acc[kidx] = acc[kidx] + s;
                });
            }
        }
    });
    dw
}

/// Per-channel sum of `dy` over batch and space.
pub fn bias_grad<T: Element>(dy: &[T], n: usize, c: usize, spatial: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let s: T = dy[(b * c + ch) * spatial..][..spatial].iter().copied().sum();
            *acc = *acc + s;
        }
    }
    db
}
