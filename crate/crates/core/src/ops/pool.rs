use crate::error::{Error, Result};
use crate::tensor::{Element, Shape};

/// Output extents of an unpadded pooling window.
pub fn pool_output_extent(input: [usize; 3], window: [usize; 3], stride: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if window[a] == 0 || stride[a] == 0 {
            return Err(Error::Invalid(format!("pooling window {window:?} / stride {stride:?} must be >= 1")));
        }
        if window[a] > input[a] {
            return Err(Error::shape(
                "maxpool3d",
                format!("window {window:?} larger than input {input:?}"),
            ));
        }
        if window[a] == stride[a] && input[a] % stride[a] != 0 {
            return Err(Error::Indivisible { extents: input, divisor: stride[a] });
        }
        out[a] = (input[a] - window[a]) / stride[a] + 1;
    }
    Ok(out)
}

/// Max pooling. Returns the pooled values and, per output voxel, the flat
/// input index of the first maximum in row-major window order.
pub fn maxpool3d_forward<T: Element>(
    x: &[T],
    shape: Shape,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<(Vec<T>, Vec<usize>, Shape)> {
    let [n, c, d, h, w] = shape.0;
    let [od, oh, ow] = pool_output_extent([d, h, w], window, stride)?;
    let out_shape = Shape::new(n, c, od, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    for b in 0..n {
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for xw in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = usize::MAX;
                        for a in 0..window[0] {
                            for bb in 0..window[1] {
                                for cc in 0..window[2] {
                                    let i = shape.offset(b, ch, z * stride[0] + a, y * stride[1] + bb, xw * stride[2] + cc);
                                    if best_i == usize::MAX || x[i] > best {
                                        best = x[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_i);
                    }
                }
            }
        }
    }
    Ok((out, arg, out_shape))
}

pub fn maxpool3d_backward<T: Element>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i] = dx[i] + g;
    }
    dx
}

/// Per-channel spatial mean, `[N, C, 1, 1, 1]`.
pub fn global_avg_pool_forward<T: Element>(x: &[T], shape: Shape) -> Result<Vec<T>> {
    let sp = shape.spatial_len();
    if sp == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial volume"));
    }
    let inv = T::one() / T::from_usize(sp).unwrap();
    Ok(x.chunks(sp).map(|c| c.iter().copied().sum::<T>() * inv).collect())
}

pub fn global_avg_pool_backward<T: Element>(dy: &[T], shape: Shape) -> Vec<T> {
    let sp = shape.spatial_len();
    let inv = T::one() / T::from_usize(sp).unwrap();
    dy.iter().flat_map(|&g| std::iter::repeat(g * inv).take(sp)).collect()
}
