use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fscascade::eval::{ap_sweep, infer, ImageResult, InferConfig, InferenceMode, ReportMeta};
use fscascade::geometry::nms;
use fscascade::model::{CascadeModel, ModelConfig, Variant};
use fscascade::synth::{generate_scene, SceneSpec, Split};
use fscascade::{BBox, Graph, LabeledBox, ScoredBox, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_box(r: &mut ChaCha8Rng) -> BBox {
    let (x, y) = (r.gen_range(0.0..80.0), r.gen_range(0.0..80.0));
    BBox::new(x, y, x + r.gen_range(4.0..16.0), y + r.gen_range(4.0..16.0))
}

fn conv2d(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let x = random_tensor(&[1, 64, 24, 24], &mut r);
    let k = random_tensor(&[64, 64, 3, 3], &mut r);
    let b = random_tensor(&[64], &mut r);
    c.bench_function("conv2d 64x24x24 3x3", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, k, b) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
            black_box(g.conv2d(x, k, b, 1, 1).unwrap());
        })
    });
}

fn nms_bench(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let dets: Vec<ScoredBox> = (0..1000)
        .map(|_| ScoredBox { bbox: random_box(&mut r), score: r.gen(), class_id: r.gen_range(1..=3) })
        .collect();
    c.bench_function("nms 1000 boxes", |bench| bench.iter(|| black_box(nms(&dets, 0.5))));
}

fn ap_bench(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let images: Vec<ImageResult> = (0..100)
        .map(|i| {
            let gts: Vec<LabeledBox> =
                (0..4).map(|_| LabeledBox { bbox: random_box(&mut r), class_id: r.gen_range(1..=3) }).collect();
            let dets = (0..50)
                .map(|_| ScoredBox { bbox: random_box(&mut r), score: r.gen(), class_id: r.gen_range(1..=3) })
                .collect();
            ImageResult { image_id: i, dets, gts }
        })
        .collect();
    c.bench_function("ap sweep 100 images", |bench| {
        bench.iter(|| black_box(ap_sweep(&images, ReportMeta::default()).unwrap()))
    });
}

fn cascade_forward(c: &mut Criterion) {
    let scene = generate_scene(&SceneSpec::default(), 0, Split::Eval).unwrap();
    let mut group = c.benchmark_group("cascade inference");
    group.sample_size(10);
    for v in Variant::ALL {
        let model = CascadeModel::new(ModelConfig::desk(v, 3), 0).unwrap();
        group.bench_function(v.to_string(), |bench| {
            bench.iter(|| black_box(infer(&model, &scene, InferenceMode::Stage(3), &InferConfig::default()).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv2d, nms_bench, ap_bench, cascade_forward);
criterion_main!(benches);
