//! Primitive kernels against brute-force loop oracles, plus finite-difference
//! checks of every backward rule.

use proptest::prelude::*;
use r2u3d_core::ops::conv::{ConvGeom, ConvSpec, Padding};
use r2u3d_core::{grad_check, ConvAlgo, GradCheckOptions, Graph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ── Oracles ─────────────────────────────────────────────────────────────

/// Leading pad for one axis, computed from first principles.
fn oracle_pad(i: usize, k: usize, s: usize, d: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => {
            let o = (i + s - 1) / s;
            let need = (o - 1) * s + d * (k - 1) + 1;
            let total = if need > i { need - i } else { 0 };
            (o, total / 2)
        }
        Padding::Valid => ((i - d * (k - 1) - 1) / s + 1, 0),
    }
}

/// Six nested loops (plus batch/channel loops) with explicit bounds checks.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let [n, ci_n, d, h, wd] = x.shape().0;
    let [co_n, _, kd, kh, kw] = w.shape().0;
    let (od, pd) = oracle_pad(d, kd, spec.stride[0], spec.dilation[0], spec.padding);
    let (oh, ph) = oracle_pad(h, kh, spec.stride[1], spec.dilation[1], spec.padding);
    let (ow, pw) = oracle_pad(wd, kw, spec.stride[2], spec.dilation[2], spec.padding);
    let mut out = Tensor::zeros([n, co_n, od, oh, ow]);
    let os = out.shape();
    for bi in 0..n {
        for co in 0..co_n {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..ci_n {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let iz = (z * spec.stride[0] + a * spec.dilation[0]) as isize - pd as isize;
                                        let iy = (y * spec.stride[1] + bb * spec.dilation[1]) as isize - ph as isize;
                                        let ix = (xx * spec.stride[2] + c * spec.dilation[2]) as isize - pw as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += w.at(co, ci, a, bb, c) * x.at(bi, ci, iz as usize, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.data_mut()[os.offset(bi, co, z, y, xx)] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Transposed convolution as a scatter-add of strided kernel copies.
fn conv_transpose_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let [n, ci_n, d, h, wd] = x.shape().0;
    let [_, co_n, kd, kh, kw] = w.shape().0;
    let out_ext = spec.transposed_output_extent([d, h, wd]).unwrap();
    let pads: Vec<usize> = (0..3)
        .map(|a| oracle_pad(out_ext[a], spec.kernel[a], spec.stride[a], spec.dilation[a], spec.padding).1)
        .collect();
    let mut out = Tensor::zeros([n, co_n, out_ext[0], out_ext[1], out_ext[2]]);
    let os = out.shape();
    for bi in 0..n {
        for co in 0..co_n {
            let bias = b.map_or(0.0, |b| b.data()[co]);
            for v in 0..os.spatial_len() {
                out.data_mut()[os.offset(bi, co, 0, 0, 0) + v] = bias;
            }
        }
        for ci in 0..ci_n {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let v = x.at(bi, ci, z, y, xx);
                        for co in 0..co_n {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let oz = (z * spec.stride[0] + a * spec.dilation[0]) as isize - pads[0] as isize;
                                        let oy = (y * spec.stride[1] + bb * spec.dilation[1]) as isize - pads[1] as isize;
                                        let ox = (xx * spec.stride[2] + c * spec.dilation[2]) as isize - pads[2] as isize;
                                        if oz < 0
                                            || oy < 0
                                            || ox < 0
                                            || oz >= out_ext[0] as isize
                                            || oy >= out_ext[1] as isize
                                            || ox >= out_ext[2] as isize
                                        {
                                            continue;
                                        }
                                        let idx = os.offset(bi, co, oz as usize, oy as usize, ox as usize);
                                        out.data_mut()[idx] += v * w.at(ci, co, a, bb, c);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec, algo: ConvAlgo) -> Tensor<f64> {
    let mut g = Graph::new().with_conv_algo(algo);
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = b.map(|b| g.constant(b.clone()));
    let y = g.conv3d(xv, wv, bv, spec).unwrap();
    g.value(y).clone()
}

fn conv_t(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = b.map(|b| g.constant(b.clone()));
    let y = g.conv_transpose3d(xv, wv, bv, spec).unwrap();
    g.value(y).clone()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ── conv3d ──────────────────────────────────────────────────────────────

#[test]
fn conv3d_ones_valid_sums_to_27() {
    let x = Tensor::<f64>::ones([1, 1, 3, 3, 3]);
    let w = Tensor::<f64>::ones([1, 1, 3, 3, 3]);
    let spec = ConvSpec::cube(1, 1, 3).with_padding(Padding::Valid).without_bias();
    let y = conv(&x, &w, None, &spec, ConvAlgo::Direct);
    assert_eq!(y.shape(), Shape::new(1, 1, 1, 1, 1));
    assert_eq!(y.data(), &[27.0]);
}

#[test]
fn conv3d_dirac_kernel_is_identity() {
    let x = Tensor::<f64>::randn([1, 1, 4, 5, 3], 1.0, &mut rng(2));
    let mut w = Tensor::<f64>::zeros([1, 1, 3, 3, 3]);
    w.data_mut()[13] = 1.0;
    let spec = ConvSpec::cube(1, 1, 3).without_bias();
    assert_eq!(conv(&x, &w, None, &spec, ConvAlgo::Direct), x);
}

#[test]
fn conv3d_random_same_matches_oracle() {
    let mut r = rng(3);
    let x = Tensor::<f64>::randn([1, 2, 4, 4, 4], 1.0, &mut r);
    let w = Tensor::<f64>::randn([3, 2, 3, 3, 3], 1.0, &mut r);
    let b = Tensor::<f64>::randn([3, 1, 1, 1, 1], 1.0, &mut r);
    let spec = ConvSpec::cube(2, 3, 3);
    let got = conv(&x, &w, Some(&b), &spec, ConvAlgo::Direct);
    let want = conv_oracle(&x, &w, Some(&b), &spec);
    assert!(got.max_abs_diff(&want).unwrap() < 1e-5);
}

#[test]
fn conv3d_channel_mismatch_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 4, 4]));
    let w = g.constant(Tensor::zeros([1, 3, 3, 3, 3]));
    let spec = ConvSpec::cube(3, 1, 3).without_bias();
    assert!(g.conv3d(x, w, None, &spec).is_err());
}

#[test]
fn conv3d_wrong_weight_shape_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 4, 4]));
    let w = g.constant(Tensor::zeros([1, 2, 3, 3, 1]));
    let spec = ConvSpec::cube(2, 1, 3).without_bias();
    assert!(g.conv3d(x, w, None, &spec).is_err());
}

#[test]
fn conv3d_non_finite_input_is_an_error() {
    let mut g = Graph::<f32>::new();
    let mut t = Tensor::zeros([1, 1, 2, 2, 2]);
    t.data_mut()[3] = f32::NAN;
    let x = g.constant(t);
    let w = g.constant(Tensor::ones([1, 1, 1, 1, 1]));
    let spec = ConvSpec::cube(1, 1, 1).without_bias();
    assert!(g.conv3d(x, w, None, &spec).is_err());
}

/// Random small case spanning stride/dilation in {1,2} and both paddings.
fn random_case(r: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, ConvSpec) {
    let cin = r.gen_range(1..=3);
    let cout = r.gen_range(1..=3);
    let k = [r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3)];
    let s = [r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2)];
    let d = [r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2)];
    let padding = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let mut ext = [0; 3];
    for a in 0..3 {
        let min = d[a] * (k[a] - 1) + 1;
        ext[a] = r.gen_range(min..=min + 4);
    }
    let spec = ConvSpec::new(cin, cout, k).with_stride(s).with_dilation(d).with_padding(padding);
    let x = Tensor::randn([r.gen_range(1..=2), cin, ext[0], ext[1], ext[2]], 1.0, r);
    let w = Tensor::randn(spec.weight_shape(), 1.0, r);
    let b = Tensor::randn(spec.bias_shape(), 1.0, r);
    (x, w, b, spec)
}

#[test]
fn conv3d_matches_oracle_on_120_random_cases() {
    let mut r = rng(4);
    for case in 0..120 {
        let (x, w, b, spec) = random_case(&mut r);
        let want = conv_oracle(&x, &w, Some(&b), &spec);
        for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
            let got = conv(&x, &w, Some(&b), &spec, algo);
            assert_eq!(got.shape(), want.shape(), "case {case} {spec:?}");
            let err = got.max_abs_diff(&want).unwrap();
            assert!(err < 1e-5, "case {case} {algo:?} err {err} {spec:?}");
        }
    }
}

#[test]
fn direct_and_im2col_agree_in_f32() {
    let mut r = rng(5);
    for _ in 0..20 {
        let (x, w, b, spec) = random_case(&mut r);
        let (x, w, b) = (x.cast::<f32>(), w.cast::<f32>(), b.cast::<f32>());
        let run = |algo| {
            let mut g = Graph::new().with_conv_algo(algo);
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv3d(xv, wv, Some(bv), &spec).unwrap();
            g.value(y).clone()
        };
        assert!(run(ConvAlgo::Direct).max_abs_diff(&run(ConvAlgo::Im2col)).unwrap() < 1e-5);
    }
}

// ── conv_transpose3d ────────────────────────────────────────────────────

#[test]
fn conv_transpose_single_voxel_broadcast() {
    let x = Tensor::<f64>::ones([1, 1, 1, 1, 1]);
    let w = Tensor::<f64>::ones([1, 1, 2, 2, 2]);
    let spec = ConvSpec::cube(1, 1, 2).with_stride([2; 3]).without_bias();
    let y = conv_t(&x, &w, None, &spec);
    assert_eq!(y.shape(), Shape::new(1, 1, 2, 2, 2));
    assert_eq!(y.data(), &[1.0; 8]);
}

#[test]
fn conv_transpose_zero_input_gives_zero() {
    let x = Tensor::<f64>::zeros([1, 2, 3, 3, 3]);
    let w = Tensor::<f64>::randn([2, 3, 2, 2, 2], 1.0, &mut rng(6));
    let spec = ConvSpec::new(2, 3, [2; 3]).with_stride([2; 3]).without_bias();
    let y = conv_t(&x, &w, None, &spec);
    assert_eq!(y.shape(), Shape::new(1, 3, 6, 6, 6));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_transpose_matches_scatter_oracle() {
    let mut r = rng(7);
    let x = Tensor::<f64>::randn([1, 2, 3, 3, 3], 1.0, &mut r);
    let w = Tensor::<f64>::randn([2, 3, 2, 2, 2], 1.0, &mut r);
    let b = Tensor::<f64>::randn([3, 1, 1, 1, 1], 1.0, &mut r);
    let spec = ConvSpec::new(2, 3, [2; 3]).with_stride([2; 3]);
    let got = conv_t(&x, &w, Some(&b), &spec);
    let want = conv_transpose_oracle(&x, &w, Some(&b), &spec);
    assert!(got.max_abs_diff(&want).unwrap() < 1e-5);
}

#[test]
fn conv_transpose_matches_oracle_on_random_cases() {
    let mut r = rng(8);
    for case in 0..100 {
        let (x, _, _, spec) = random_case(&mut r);
        // Read the case as a transposed layer taking `x`.
        let spec = ConvSpec { in_channels: x.shape().channels(), ..spec };
        let w = Tensor::randn(spec.transposed_weight_shape(), 1.0, &mut r);
        let b = Tensor::randn(spec.bias_shape(), 1.0, &mut r);
        let got = conv_t(&x, &w, Some(&b), &spec);
        let want = conv_transpose_oracle(&x, &w, Some(&b), &spec);
        assert_eq!(got.shape(), want.shape(), "case {case}");
        assert!(got.max_abs_diff(&want).unwrap() < 1e-5, "case {case} {spec:?}");
    }
}

#[test]
fn conv_transpose_doubles_extents() {
    let spec = ConvSpec::new(4, 1, [2; 3]).with_stride([2; 3]);
    let g = ConvGeom::transposed(&spec, [3, 5, 7]).unwrap();
    assert_eq!(g.input, [6, 10, 14]);
    assert_eq!(g.output, [3, 5, 7]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// <conv(x, w), y> == <x, conv_transpose(y, w)>
    #[test]
    fn convolution_adjointness(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (x, w, _, spec) = random_case(&mut r);
        let spec = spec.without_bias();
        let y_shape = conv(&x, &w, None, &spec, ConvAlgo::Direct).shape();
        let y = Tensor::<f64>::randn(y_shape, 1.0, &mut r);
        let lhs = conv(&x, &w, None, &spec, ConvAlgo::Direct).dot(&y).unwrap();
        let t_spec = ConvSpec { in_channels: spec.out_channels, out_channels: spec.in_channels, ..spec };
        let back = conv_t(&y, &w, None, &t_spec);
        // Valid padding may drop trailing input rows the forward never reads.
        prop_assume!(back.shape() == x.shape());
        let rhs = x.dot(&back).unwrap();
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        prop_assert!((lhs - rhs).abs() / scale < 1e-4, "lhs {} rhs {}", lhs, rhs);
    }

    #[test]
    fn same_padding_shape_law(s in 1usize..=2, d in 1usize..=2, k in 1usize..=4, i in 1usize..=12) {
        let spec = ConvSpec::cube(1, 1, k).with_stride([s; 3]).with_dilation([d; 3]);
        let x = Tensor::<f32>::zeros([1, 1, i, i, i]);
        let w = Tensor::<f32>::zeros(spec.weight_shape());
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(Tensor::zeros(spec.bias_shape())));
        let y = g.conv3d(xv, wv, Some(bv), &spec).unwrap();
        prop_assert_eq!(g.shape(y).spatial(), [i.div_ceil(s); 3]);
    }
}

// ── Pooling / dense ────────────────────────────────────────────────────

#[test]
fn maxpool_of_constant_is_constant() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([1, 2, 4, 4, 4], 2.5));
    let y = g.maxpool3d(x, [2; 3], [2; 3]).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 2, 2, 2, 2));
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));
}

#[test]
fn maxpool_of_enumeration_is_max() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn([1, 1, 2, 2, 2], |i| (i + 1) as f64));
    let y = g.maxpool3d(x, [2; 3], [2; 3]).unwrap();
    assert_eq!(g.value(y).data(), &[8.0]);
}

#[test]
fn maxpool_matches_exhaustive_scan() {
    let x = Tensor::<f64>::randn([1, 3, 4, 4, 4], 1.0, &mut rng(9));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.maxpool3d(xv, [2; 3], [2; 3]).unwrap();
    let y = g.value(y);
    for c in 0..3 {
        for z in 0..2 {
            for yy in 0..2 {
                for xx in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..2 {
                        for b in 0..2 {
                            for cc in 0..2 {
                                m = m.max(x.at(0, c, 2 * z + a, 2 * yy + b, 2 * xx + cc));
                            }
                        }
                    }
                    assert_eq!(y.at(0, c, z, yy, xx), m);
                }
            }
        }
    }
}

#[test]
fn maxpool_tie_routes_gradient_to_first_element() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::full([1, 1, 2, 2, 2], 1.0));
    let y = g.maxpool3d(x, [2; 3], [2; 3]).unwrap();
    let grads = g.backward(y).unwrap();
    let mut want = vec![0.0; 8];
    want[0] = 1.0;
    assert_eq!(grads.get(x).unwrap().data(), want.as_slice());
}

#[test]
fn maxpool_window_larger_than_input_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 1, 1, 4, 4]));
    assert!(g.maxpool3d(x, [2; 3], [2; 3]).is_err());
}

#[test]
fn global_avg_pool_values() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full([1, 2, 2, 2, 1], 4.0));
    let e = g.constant(Tensor::from_fn([1, 1, 2, 2, 2], |i| i as f64));
    let pc = g.global_avg_pool(c).unwrap();
    let pe = g.global_avg_pool(e).unwrap();
    assert_eq!(g.value(pc).data(), &[4.0, 4.0]);
    assert_eq!(g.value(pe).data(), &[3.5]);
}

#[test]
fn global_avg_pool_matches_direct_mean() {
    let x = Tensor::<f64>::randn([2, 3, 3, 2, 4], 1.0, &mut rng(10));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.global_avg_pool(xv).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            let mut s = 0.0;
            for z in 0..3 {
                for yy in 0..2 {
                    for xx in 0..4 {
                        s += x.at(n, c, z, yy, xx);
                    }
                }
            }
            assert!((g.value(y).at(n, c, 0, 0, 0) - s / 24.0).abs() < 1e-6);
        }
    }
}

#[test]
fn dense_matches_triple_loop() {
    let mut r = rng(11);
    let x = Tensor::<f64>::randn([2, 5, 1, 1, 1], 1.0, &mut r);
    let w = Tensor::<f64>::randn([3, 5, 1, 1, 1], 1.0, &mut r);
    let b = Tensor::<f64>::randn([3, 1, 1, 1, 1], 1.0, &mut r);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.dense(xv, wv, Some(bv)).unwrap();
    for n in 0..2 {
        for o in 0..3 {
            let mut s = b.data()[o];
            for i in 0..5 {
                s += x.data()[n * 5 + i] * w.data()[o * 5 + i];
            }
            assert!((g.value(y).data()[n * 3 + o] - s).abs() < 1e-6);
        }
    }
}

#[test]
fn scale_channels_with_unit_scale_is_identity() {
    let x = Tensor::<f64>::randn([2, 3, 2, 2, 2], 1.0, &mut rng(12));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let s = g.constant(Tensor::ones([2, 3, 1, 1, 1]));
    let y = g.scale_channels(xv, s).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn concat_requires_matching_spatial_extents() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([1, 1, 2, 2, 2]));
    let b = g.constant(Tensor::zeros([1, 1, 2, 2, 4]));
    assert!(g.concat_channels(&[a, b]).is_err());
    let c = g.constant(Tensor::ones([1, 2, 2, 2, 2]));
    let y = g.concat_channels(&[a, c]).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 3, 2, 2, 2));
    assert_eq!(g.value(y).data()[..8], [0.0; 8]);
    assert_eq!(g.value(y).data()[8..], [1.0; 16]);
}

#[test]
fn add_and_mul_reject_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([1, 1, 2, 2, 2]));
    let b = g.constant(Tensor::zeros([1, 2, 2, 2, 2]));
    assert!(g.add(a, b).is_err());
    assert!(g.mul(a, b).is_err());
}

// ── Gradient checks per primitive ───────────────────────────────────────

fn check(f: impl Fn(&mut Graph<f64>, &[r2u3d_core::Var]) -> r2u3d_core::Result<r2u3d_core::Var>, inputs: &[Tensor<f64>]) -> f64 {
    let r = grad_check(f, inputs, &GradCheckOptions::default()).unwrap();
    r.max_rel_error
}

/// Weighted sum so that every output coordinate carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, y: r2u3d_core::Var, seed: u64) -> r2u3d_core::Result<r2u3d_core::Var> {
    let probe = Tensor::randn(g.shape(y), 1.0, &mut rng(seed));
    let p = g.constant(probe);
    let m = g.mul(y, p)?;
    g.sum(m)
}

#[test]
fn gradcheck_conv3d_strided_dilated() {
    let mut r = rng(13);
    for (s, d, pad) in [(1, 1, Padding::Same), (2, 1, Padding::Same), (1, 2, Padding::Same), (2, 2, Padding::Valid)] {
        let spec = ConvSpec::new(2, 2, [3, 2, 3]).with_stride([s; 3]).with_dilation([d; 3]).with_padding(pad);
        let x = Tensor::randn([1, 2, 5, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(spec.weight_shape(), 1.0, &mut r);
        let b = Tensor::randn(spec.bias_shape(), 1.0, &mut r);
        let err = check(
            |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), &spec)?;
                weighted_sum(g, y, 1)
            },
            &[x, w, b],
        );
        assert!(err < 1e-3, "s={s} d={d}: {err}");
    }
}

#[test]
fn gradcheck_conv3d_relu_sum() {
    let mut r = rng(14);
    let spec = ConvSpec::cube(2, 3, 3);
    let x = Tensor::randn([1, 2, 4, 4, 4], 1.0, &mut r);
    let w = Tensor::randn(spec.weight_shape(), 1.0, &mut r);
    let b = Tensor::randn(spec.bias_shape(), 1.0, &mut r);
    let err = check(
        |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), &spec)?;
            let y = g.relu(y)?;
            g.sum(y)
        },
        &[x, w, b],
    );
    assert!(err < 1e-3, "{err}");
}

#[test]
fn gradcheck_conv_transpose3d() {
    let mut r = rng(15);
    let spec = ConvSpec::new(2, 3, [2; 3]).with_stride([2; 3]);
    let x = Tensor::randn([1, 2, 3, 2, 3], 1.0, &mut r);
    let w = Tensor::randn(spec.transposed_weight_shape(), 1.0, &mut r);
    let b = Tensor::randn(spec.bias_shape(), 1.0, &mut r);
    let err = check(
        |g, v| {
            let y = g.conv_transpose3d(v[0], v[1], Some(v[2]), &spec)?;
            weighted_sum(g, y, 2)
        },
        &[x, w, b],
    );
    assert!(err < 1e-3, "{err}");
}

#[test]
fn gradcheck_pooling_dense_and_elementwise() {
    let mut r = rng(16);
    let x = Tensor::randn([1, 2, 4, 4, 4], 1.0, &mut r);
    let err = check(
        |g, v| {
            let y = g.maxpool3d(v[0], [2; 3], [2; 3])?;
            weighted_sum(g, y, 3)
        },
        &[x.clone()],
    );
    assert!(err < 1e-3, "maxpool {err}");

    let err = check(
        |g, v| {
            let y = g.global_avg_pool(v[0])?;
            weighted_sum(g, y, 4)
        },
        &[x.clone()],
    );
    assert!(err < 1e-3, "avgpool {err}");

    let xd = Tensor::randn([2, 5, 1, 1, 1], 1.0, &mut r);
    let w = Tensor::randn([3, 5, 1, 1, 1], 1.0, &mut r);
    let b = Tensor::randn([3, 1, 1, 1, 1], 1.0, &mut r);
    let err = check(
        |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, 5)
        },
        &[xd, w, b],
    );
    assert!(err < 1e-3, "dense {err}");

    let a = Tensor::randn([1, 2, 2, 3, 2], 1.0, &mut r);
    let bb = Tensor::randn([1, 2, 2, 3, 2], 1.0, &mut r);
    let s = Tensor::randn([1, 2, 1, 1, 1], 1.0, &mut r);
    let c = Tensor::randn([1, 1, 2, 3, 2], 1.0, &mut r);
    let err = check(
        |g, v| {
            let m = g.mul(v[0], v[1])?;
            let ad = g.add(m, v[0])?;
            let sig = g.sigmoid(ad)?;
            let rl = g.relu(v[1])?;
            let sc = g.scale_channels(rl, v[2])?;
            let sum = g.add(sig, sc)?;
            let cat = g.concat_channels(&[sum, v[3], v[0]])?;
            weighted_sum(g, cat, 6)
        },
        &[a, bb, s, c],
    );
    assert!(err < 1e-3, "elementwise {err}");
}

#[test]
fn gradcheck_scalar_ops() {
    let x = Tensor::<f64>::uniform([1, 1, 1, 2, 3], 0.2, 2.0, &mut rng(17));
    let err = check(
        |g, v| {
            let l = g.ln(v[0])?;
            let a = g.affine(l, -1.5, 2.0)?;
            let c = g.clamp_min(a, 0.1)?;
            let p = g.powf(c, 0.3)?;
            g.sum(p)
        },
        &[x],
    );
    assert!(err < 1e-3, "{err}");
}

#[test]
fn forward_is_bit_deterministic() {
    r2u3d_core::parallel::set_deterministic(true);
    let mut r = rng(18);
    let x = Tensor::<f32>::randn([1, 3, 6, 6, 6], 1.0, &mut r);
    let w = Tensor::<f32>::randn([4, 3, 3, 3, 3], 1.0, &mut r);
    let spec = ConvSpec::cube(3, 4, 3).without_bias();
    let run = || {
        let mut g = Graph::new();
        let (xv, wv) = (g.variable(x.clone()), g.variable(w.clone()));
        let y = g.conv3d(xv, wv, None, &spec).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(y).clone(), grads.get(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}
