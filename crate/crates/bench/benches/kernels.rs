use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use r2u3d_core::data::{phantom_set, PhantomConfig};
use r2u3d_core::losses::{EllConfig, LossKind};
use r2u3d_core::model::Model;
use r2u3d_core::ops::conv::{ConvSpec, Padding};
use r2u3d_core::train::{loss_and_grads, toy_dynamic_config};
use r2u3d_core::{ConvAlgo, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv_algorithms(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (cin, cout, ext) in [(1, 8, 32), (8, 8, 16), (16, 16, 16)] {
        let spec = ConvSpec::cube(cin, cout, 3).with_padding(Padding::Same);
        let x = Tensor::<f32>::randn([1, cin, ext, ext, ext], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(spec.weight_shape(), 0.1, &mut rng);
        let b = Tensor::<f32>::zeros(spec.bias_shape());
        for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
            let id = BenchmarkId::new(format!("{algo:?}"), format!("{cin}->{cout} @ {ext}^3"));
            group.bench_function(id, |bench| {
                bench.iter(|| {
                    let mut g = Graph::new().with_conv_algo(algo);
                    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
                    let y = g.conv3d(xv, wv, Some(bv), &spec).unwrap();
                    g.value(y).data()[0]
                })
            });
        }
    }
    group.finish();
}

fn toy_model(c: &mut Criterion) {
    let model = Model::<f32>::build(&toy_dynamic_config(), 0).unwrap();
    let scan = &phantom_set(1, &PhantomConfig::default(), 0)[0];
    let x = scan.image.to_tensor();
    let mut group = c.benchmark_group("toy_model");
    group.sample_size(10);
    group.bench_function("forward 16x32x32", |b| b.iter(|| model.forward(&x).unwrap()));
    group.bench_function("loss+backward 16x32x32", |b| {
        b.iter(|| loss_and_grads(&model, scan, LossKind::Dice, &EllConfig::default()).unwrap().0)
    });
    group.finish();
}

criterion_group!(benches, conv_algorithms, toy_model);
criterion_main!(benches);
