//! Fast oracle checks runnable from an installed binary.

use ndarray::Array2;
use pbo_core::autodiff::grad_check;
use pbo_core::environments::{
    seeded, Batch, ChainWalk, Env, Environment, FiniteMdp, LqrEnv, SimRng, Transition,
};
use pbo_core::evaluation::value_iteration;
use pbo_core::operators::{
    iterate, FinitePbo, LowRankPbo, LqrPbo, Operator, ParameterizedPbo, PboArch,
};
use pbo_core::qspace::QFamily;
use pbo_core::training::{pbo_loss, LossConfig};
use rand::Rng;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn finite_closed_form(rng: &mut SimRng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=3));
        let mut p = Array2::from_shape_fn((n * m, n), |_| rng.random::<f64>());
        for mut row in p.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let r: Vec<f64> = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mdp = FiniteMdp::new(n, m, r.clone(), p.clone(), 0.9).expect("valid model");
        let q: Vec<f64> = (0..n * m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = FinitePbo::from_model(&mdp)
            .apply(&q)
            .expect("dimensions match");
        for row in 0..n * m {
            let expect: f64 = (0..n)
                .map(|sp| {
                    p[[row, sp]]
                        * (0..m)
                            .map(|a| q[sp * m + a])
                            .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum();
            worst = worst.max((got[row] - r[row] - 0.9 * expect).abs());
        }
    }
    Check {
        name: "finite closed form equals the Bellman sweep",
        passed: worst <= 1e-12,
        detail: format!("max error {worst:.2e}"),
    }
}

fn chain_convergence() -> Check {
    let mdp = ChainWalk::default().model();
    let q_star = value_iteration(&mdp, 1e-10).expect("gamma < 1").params;
    let seq = iterate(&FinitePbo::from_model(&mdp), &vec![0.0; q_star.len()], 50).expect("bounded");
    let norm = q_star.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let ok = seq
        .iter()
        .enumerate()
        .skip(1)
        .all(|(k, w)| sup(w, &q_star) <= mdp.gamma.powi(k as i32) * norm);
    Check {
        name: "closed-form iterates converge geometrically",
        passed: ok,
        detail: format!(
            "final error {:.2e}",
            sup(seq.last().expect("51 iterates"), &q_star)
        ),
    }
}

fn lqr_fixed_point() -> Check {
    let op = LqrPbo::from_env(&LqrEnv::default(), -1.2);
    let seq = iterate(&op, &[0.0, 0.0], 100).expect("bounded");
    let last = seq.last().expect("101 iterates");
    let residual = sup(&op.apply(last).expect("2 parameters"), last);
    let off = seq
        .iter()
        .skip(1)
        .map(|w| op.line_distance(w))
        .fold(0.0, f64::max);
    Check {
        name: "LQR closed form reaches its fixed point on the line",
        passed: residual < 1e-8 && off <= 1e-10,
        detail: format!("residual {residual:.2e}, off-line {off:.2e}"),
    }
}

fn gradients(rng: &mut SimRng) -> Check {
    let env = Env::ChainWalk(ChainWalk {
        n_states: 3,
        gamma: 0.9,
        success_prob: 0.9,
        reward_states: vec![2],
    });
    let mut ts = Vec::new();
    for s in 0..3 {
        for a in 0..2 {
            let step = env.step(&[s as f64], a, rng).expect("valid action");
            ts.push(Transition {
                state: vec![s as f64],
                action: a,
                reward: step.reward,
                next_state: step.next_state,
                terminal: step.terminal,
            });
        }
    }
    let batch = Batch::new(ts.iter(), &[0.0, 1.0], 1);
    let family = QFamily::Tabular {
        n_states: 3,
        n_actions: 2,
    };
    let cfg = LossConfig {
        k: 2,
        use_fixed_point: false,
        gamma: 0.9,
        batch_size_d: 6,
        batch_size_w: 2,
    };
    let mut worst: f64 = 0.0;
    let mut adjoint: f64 = 0.0;
    for (arch, std) in [
        (PboArch::Linear, 0.2),
        (PboArch::Mlp { hidden: vec![8] }, 0.5),
    ] {
        for _ in 0..5 {
            let mut pbo = ParameterizedPbo::new(arch.clone(), 6).expect("valid architecture");
            pbo.init_random(std, rng).expect("finite std");
            let target = pbo.params.clone();
            let omegas = Array2::from_shape_fn((2, 6), |_| rng.random_range(-1.0..1.0));
            let point = pbo.params.values().to_vec();
            let err = grad_check(
                |x| {
                    let mut p = pbo.clone();
                    p.params.set_values(x)?;
                    let out = pbo_loss(&p, &target, &family, &batch, &omegas, &cfg)?;
                    adjoint = adjoint.max(out.target_adjoint_max);
                    Ok((out.loss, out.grad))
                },
                &point,
                1e-6,
            )
            .unwrap_or(f64::INFINITY);
            worst = worst.max(err);
        }
    }
    Check {
        name: "loss gradients match finite differences; target branch gets none",
        passed: worst < 1e-4 && adjoint == 0.0,
        detail: format!("max relative error {worst:.2e}, target adjoint {adjoint:e}"),
    }
}

fn low_rank(rng: &mut SimRng) -> Check {
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..50 {
        let op = LowRankPbo::random_normalized(
            rng.random_range(1..=6),
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            0.9,
            rng,
        );
        let d = op.theta.len();
        for _ in 0..20 {
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let dist = sup(&w, &v);
            if dist > 0.0 {
                let lw = op.apply(&w).expect("dimensions match");
                let lv = op.apply(&v).expect("dimensions match");
                worst_ratio = worst_ratio.max(sup(&lw, &lv) / dist);
            }
        }
    }
    Check {
        name: "low-rank closed form contracts",
        passed: worst_ratio <= 0.9 + 1e-9,
        detail: format!("max ratio {worst_ratio:.6}"),
    }
}

pub fn run_checks() -> Vec<Check> {
    let mut rng = seeded(2024);
    vec![
        finite_closed_form(&mut rng),
        chain_convergence(),
        lqr_fixed_point(),
        gradients(&mut rng),
        low_rank(&mut rng),
    ]
}
