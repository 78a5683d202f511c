use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use diffeo_core::ansatz::{forward, init_params, Evaluator};
use diffeo_core::losses::{total_loss, Samples};
use diffeo_core::sampling::build_pool;
use diffeo_core::synth::{appendix_source, twisted_pairs};
use diffeo_core::trainer::{adam_step, AdamState};
use diffeo_core::{backward, Activation, Formulation, LossTerm, LossWeights, Volume3};

fn jets(c: &mut Criterion) {
    let params = init_params(20, 3, Activation::Tanh, 0).unwrap();
    let pool = build_pool(500, None, 0).unwrap();
    let mut g = c.benchmark_group("jet");
    g.throughput(Throughput::Elements(pool.interior.len() as u64));
    g.bench_function("full_jet_500", |b| {
        b.iter(|| {
            for &x in &pool.interior {
                black_box(forward(&params, x));
            }
        })
    });
    g.bench_function("value_only_500", |b| {
        let mut ev = Evaluator::new(&params);
        b.iter(|| {
            for &x in &pool.interior {
                black_box(ev.map(x));
            }
        })
    });
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let params = init_params(20, 3, Activation::Tanh, 0).unwrap();
    let pool = build_pool(500, None, 0).unwrap();
    let lm = twisted_pairs();
    let weights = LossWeights::default();
    let samples = Samples {
        interior: &pool.interior,
        landmarks: Some(&lm),
        image: None,
        boundary: None,
    };
    c.bench_function("loss_and_gradient_batch_500", |b| {
        b.iter(|| {
            let (_, tape) = total_loss(&params, &weights, Formulation::Landmark, &samples).unwrap();
            black_box(backward(&tape, LossTerm::Total.index()).unwrap())
        })
    });
    c.bench_function("adam_step_2663", |b| {
        let grad = vec![1e-3; params.param_count()];
        b.iter_batched(
            || (params.to_flat(), AdamState::new(params.param_count())),
            |(mut theta, mut st)| adam_step(&mut theta, &grad, &mut st, 1e-3, [0.9, 0.999], 1e-8).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn trilinear(c: &mut Criterion) {
    let v = Volume3::from_fn([64, 64, 64], appendix_source).unwrap();
    let pts = build_pool(4096, None, 1).unwrap().interior;
    let mut g = c.benchmark_group("volume");
    g.throughput(Throughput::Elements(pts.len() as u64));
    g.bench_function("sample_grad_4096", |b| {
        b.iter(|| {
            for &p in &pts {
                black_box(v.sample_grad(p));
            }
        })
    });
    g.finish();
}

criterion_group!(benches, jets, training_step, trilinear);
criterion_main!(benches);
