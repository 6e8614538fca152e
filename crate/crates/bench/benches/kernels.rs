use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mosdistill::autograd::Tape;
use mosdistill::bias::Affine;
use mosdistill::checkpoint;
use mosdistill::corpus::Clip;
use mosdistill::degrade::{apply_degradation, DegradationSpec};
use mosdistill::features::{extract, FeatureConfig};
use mosdistill::model::QualityModel;
use mosdistill::presets;
use mosdistill::prune::{taylor_importance, PruneState};
use mosdistill::synth::synth_clean;
use mosdistill::tensor::Tensor;
use mosdistill::train::{loss_and_grads, Example, Render};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

fn clips(n: u64) -> Vec<Clip> {
    (0..n)
        .map(|k| {
            let audio = synth_clean(k, 1.0).unwrap();
            Clip {
                id: format!("c{k}"),
                dataset_id: "bench".into(),
                mos: Some(1.0 + (k % 5) as f64),
                spec: None,
                features: extract(&audio, &FeatureConfig::default()).unwrap(),
            }
        })
        .collect()
}

fn signal(c: &mut Criterion) {
    let clean = synth_clean(1, 1.0).unwrap();
    let spec = DegradationSpec {
        snr_db: Some(5.0),
        bandwidth_hz: Some(4000.0),
        clip_threshold: Some(0.3),
        dropout: Some(0.1),
        ..DegradationSpec::clean(2)
    };
    c.bench_function("synth_clean 1s", |b| b.iter(|| synth_clean(black_box(3), 1.0).unwrap()));
    c.bench_function("apply_degradation 1s", |b| b.iter(|| apply_degradation(black_box(&clean), &spec).unwrap()));
    c.bench_function("extract 1s", |b| b.iter(|| extract(black_box(&clean), &FeatureConfig::default()).unwrap()));
}

fn ops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(vec![99, 256], &mut rng);
    let w = random(vec![256, 64], &mut rng);
    c.bench_function("matmul 99x256x64 fwd+bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.leaf(a.clone().with_requires_grad(true));
            let y = tape.leaf(w.clone().with_requires_grad(true));
            let z = tape.matmul(x, y).unwrap();
            let l = tape.mean(z).unwrap();
            tape.backward(l).unwrap()
        })
    });
    let x = random(vec![8, 161, 99], &mut rng);
    let k = random(vec![8, 8, 3, 3], &mut rng);
    c.bench_function("conv2d 8->8 161x99 fwd+bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone().with_requires_grad(true));
            let kv = tape.leaf(k.clone().with_requires_grad(true));
            let y = tape.conv2d(xv, kv, None, (1, 1), (1, 1)).unwrap();
            let l = tape.mean(y).unwrap();
            tape.backward(l).unwrap()
        })
    });
}

fn model(c: &mut Criterion) {
    let m = QualityModel::new(presets::desk_student(), 7).unwrap();
    let data = clips(4);
    let batch: Vec<Example<'_>> = data
        .iter()
        .map(|clip| Example {
            clip,
            target: clip.mos.unwrap(),
            render: Render::Fixed(Affine::new(1.0, 0.0)),
        })
        .collect();
    c.bench_function("desk student logit", |b| b.iter(|| m.logit(black_box(&data[0].features)).unwrap()));
    c.bench_function("desk student loss+grads, 4 clips", |b| b.iter(|| loss_and_grads(&m, None, &batch).unwrap()));
    let state = PruneState::for_model(&m, 0.005, 0.9).unwrap();
    c.bench_function("taylor importance, 4 clips", |b| b.iter(|| taylor_importance(&m, &state, &batch).unwrap()));
    c.bench_function("checkpoint encode+decode", |b| {
        b.iter(|| checkpoint::from_bytes(&checkpoint::to_bytes(black_box(&m)).unwrap()).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = signal, ops, model
}
criterion_main!(benches);
