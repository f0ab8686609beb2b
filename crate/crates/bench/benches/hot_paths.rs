//! Hot-path benchmarks: the per-step costs that dominate training
//! (render → perceive → step) plus the batched compute kernels behind them
//! (conv2d forward/backward, GAE, geodesic distance).

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use metanav::policy::Policy;
use metanav::ppo::{compute_gae, RolloutBuffer};
use metanav::tensor::{Tape, TensorData};
use metanav::worldsim::{
    generate_world, render, sample_episode, step, Action, GenParams, ObservationConfig, Pose,
    WorldMap,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world() -> WorldMap {
    generate_world(42, &GenParams::default()).expect("default params generate")
}

fn bench_render(c: &mut Criterion) {
    let w = world();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = sample_episode(&w, &mut rng, 200).unwrap();
    let obs = ObservationConfig::default();
    c.bench_function("render_64x48", |b| {
        b.iter(|| render(black_box(&w), black_box(spec.start), &spec.target, &obs))
    });
}

fn bench_env_step(c: &mut Criterion) {
    let w = world();
    let pose = Pose::new(w.bounds.min_x + 1.0, w.bounds.min_y + 1.0, 0.3);
    c.bench_function("env_step_forward", |b| {
        b.iter(|| step(black_box(&w), black_box(pose), Action::MoveForward))
    });
}

fn bench_perceive(c: &mut Criterion) {
    let w = world();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = sample_episode(&w, &mut rng, 200).unwrap();
    let obs = ObservationConfig::default();
    let image = render(&w, spec.start, &spec.target, &obs);
    let policy = Policy::new(Default::default(), 1).unwrap();
    c.bench_function("perceive_frame", |b| b.iter(|| policy.perceive(black_box(&image)).unwrap()));
}

/// First conv layer's shape: 1x3x48x64 input, 8 filters of 3x5x5, stride 2.
fn conv_inputs() -> (TensorData<f32>, TensorData<f32>, TensorData<f32>) {
    let x = TensorData::new(vec![1, 3, 48, 64], (0..3 * 48 * 64).map(|i| (i % 97) as f32 * 1e-2).collect());
    let w = TensorData::new(vec![8, 3, 5, 5], (0..8 * 3 * 25).map(|i| ((i % 13) as f32 - 6.0) * 1e-2).collect());
    let b = TensorData::new(vec![8], vec![1e-3; 8]);
    (x, w, b)
}

fn bench_conv_forward(c: &mut Criterion) {
    let (x, w, b) = conv_inputs();
    c.bench_function("conv2d_forward_l1", |bench| {
        bench.iter(|| {
            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(w.clone());
            let bv = tape.param(b.clone());
            black_box(tape.conv2d(xv, wv, bv, 2).unwrap())
        })
    });
}

fn bench_conv_backward(c: &mut Criterion) {
    let (x, w, b) = conv_inputs();
    c.bench_function("conv2d_backward_l1", |bench| {
        bench.iter(|| {
            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(w.clone());
            let bv = tape.param(b.clone());
            let y = tape.conv2d(xv, wv, bv, 2).unwrap();
            let loss = tape.sum(y);
            black_box(tape.backward(loss).unwrap())
        })
    });
}

fn bench_gae(c: &mut Criterion) {
    let t = 200;
    let buffer = RolloutBuffer {
        t,
        n: 1,
        obs: vec![0.0; 3 * t],
        obs_h: 1,
        obs_w: 1,
        actions: vec![0; t],
        log_probs: vec![0.0; t],
        values: (0..t).map(|i| (i % 7) as f32 * 0.1).collect(),
        rewards: (0..t).map(|i| (i % 5) as f32 * 0.1 - 0.1).collect(),
        dones: (0..t).map(|i| if i % 50 == 49 { 1.0 } else { 0.0 }).collect(),
        boot_values: vec![0.0; t],
        start_h: TensorData::zeros(&[1, 1]),
        start_c: TensorData::zeros(&[1, 1]),
        final_values: vec![0.2],
        cards: vec![],
        card_idx: vec![],
        episode_returns: vec![],
        episode_successes: vec![],
    };
    c.bench_function("gae_200_steps", |b| {
        b.iter(|| compute_gae(black_box(&buffer), 0.99, 0.95))
    });
}

fn bench_geodesic(c: &mut Criterion) {
    let w = world();
    // Opposite corners, nudged into free space.
    let (ax, ay) = (w.bounds.min_x + 0.5, w.bounds.min_y + 0.5);
    let (bx, by) = (w.bounds.min_x + w.bounds.width() - 0.5, w.bounds.min_y + w.bounds.height() - 0.5);
    c.bench_function("geodesic_corner_to_corner", |b| {
        b.iter(|| w.geodesic_distance(black_box(ax), ay, bx, by).unwrap())
    });
}

criterion_group!(
    benches,
    bench_render,
    bench_env_step,
    bench_perceive,
    bench_conv_forward,
    bench_conv_backward,
    bench_gae,
    bench_geodesic
);
criterion_main!(benches);
