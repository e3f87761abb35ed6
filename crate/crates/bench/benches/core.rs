use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use pbo_core::autodiff::Tape;
use pbo_core::environments::{seeded, Batch, ChainWalk, Env, Environment, Transition};
use pbo_core::operators::{FinitePbo, LowRankPbo, Operator, ParameterizedPbo, PboArch};
use pbo_core::qspace::QFamily;
use pbo_core::training::{pbo_loss, LossConfig};
use rand::Rng;

fn closed_forms(c: &mut Criterion) {
    let mdp = ChainWalk::default().model();
    let fin = FinitePbo::from_model(&mdp);
    let q: Vec<f64> = (0..mdp.rewards.len()).map(|i| (i as f64).sin()).collect();
    c.bench_function("finite_apply_chain", |b| {
        b.iter(|| fin.apply(black_box(&q)).unwrap())
    });

    let mut rng = seeded(1);
    let low = LowRankPbo::random_normalized(200, 4, 16, 0.9, &mut rng);
    let w: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("low_rank_apply_200x4_d16", |b| {
        b.iter(|| low.apply(black_box(&w)).unwrap())
    });
}

fn hyper_mlp(c: &mut Criterion) {
    // Bicycle-sized Q networks evaluated for a batch of parameter rows.
    let layers = [(4, 30), (30, 5)];
    let n: usize = layers.iter().map(|(i, o)| i * o + o).sum();
    let mut rng = seeded(2);
    let x = Array2::from_shape_fn((500, 4), |_| rng.random_range(-1.0..1.0));
    let om = Array2::from_shape_fn((30, n), |_| rng.random_range(-0.1..0.1));
    c.bench_function("hyper_mlp_fwd_bwd_500x30", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.input(x.clone());
            let ov = t.param(om.clone());
            let y = t.hyper_mlp(xv, ov, &layers).unwrap();
            let sq = t.square(y).unwrap();
            let l = t.mean(sq).unwrap();
            t.backward(l).unwrap()
        })
    });
}

fn loss_step(c: &mut Criterion) {
    let env = Env::ChainWalk(ChainWalk::default());
    let mdp = ChainWalk::default().model();
    let (n, m) = (mdp.n_states, mdp.n_actions);
    let mut rng = seeded(3);
    let mut ts = Vec::new();
    for s in 0..n {
        for a in 0..m {
            let step = env.step(&[s as f64], a, &mut rng).unwrap();
            ts.push(Transition {
                state: vec![s as f64],
                action: a,
                reward: step.reward,
                next_state: step.next_state,
                terminal: step.terminal,
            });
        }
    }
    let actions: Vec<f64> = (0..m).map(|a| a as f64).collect();
    let batch = Batch::new(ts.iter(), &actions, 1);
    let family = QFamily::Tabular {
        n_states: n,
        n_actions: m,
    };
    let d = n * m;
    let mut pbo = ParameterizedPbo::new(PboArch::Mlp { hidden: vec![50] }, d).unwrap();
    pbo.init_random(0.1, &mut rng).unwrap();
    let target = pbo.params.clone();
    let omegas = Array2::from_shape_fn((30, d), |_| rng.random_range(-1.0..1.0));
    let cfg = LossConfig {
        k: 8,
        use_fixed_point: false,
        gamma: mdp.gamma,
        batch_size_d: d,
        batch_size_w: 30,
    };
    c.bench_function("pbo_loss_chain_mlp_k8", |b| {
        b.iter(|| pbo_loss(&pbo, &target, &family, &batch, &omegas, &cfg).unwrap())
    });
}

criterion_group!(benches, closed_forms, hyper_mlp, loss_step);
criterion_main!(benches);
