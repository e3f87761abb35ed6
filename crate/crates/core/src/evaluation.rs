//! Ground-truth solutions and the metrics reported for trained agents.

use std::fmt::Write as _;

use crate::environments::{
    Dataset, Env, Environment, FiniteMdp, LqrEnv, SimRng, MAX_POSITION, MAX_VELOCITY,
};
use crate::error::{Error, Result};
use crate::operators::{FinitePbo, LqrPbo, Operator};
use crate::qspace::QFamily;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimalSolution {
    pub params: Vec<f64>,
    /// `|L(params) - params|_inf` under the exact operator.
    pub residual: f64,
}

/// Exact value iteration on a known model, stopped once successive sweeps
/// differ by less than `tol (1 - gamma) / gamma`, so the result is within
/// `tol` of `Q*`.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> Result<OptimalSolution> {
    if mdp.gamma >= 1.0 {
        return Err(Error::Invalid(format!(
            "value iteration needs gamma < 1, got {}",
            mdp.gamma
        )));
    }
    let op = FinitePbo::from_model(mdp);
    let threshold = if mdp.gamma == 0.0 {
        f64::INFINITY
    } else {
        tol * (1.0 - mdp.gamma) / mdp.gamma
    };
    let mut q = vec![0.0; op.dim()];
    for _ in 0..10_000_000 {
        let next = op.apply(&q)?;
        let delta = sup_dist(&next, &q);
        q = next;
        if delta < threshold {
            let residual = sup_dist(&op.apply(&q)?, &q);
            return Ok(OptimalSolution {
                params: q,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: 10_000_000,
    })
}

fn sup_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

/// Fixed point `(G*, I*)` of the LQR closed-form operator, found by iterating
/// the scalar map on `c = G - I^2 / M`.
pub fn lqr_optimal_params(env: &LqrEnv, m: f64) -> Result<OptimalSolution> {
    let op = LqrPbo::from_env(env, m);
    let map = |c: f64| {
        let g = op.q + op.a * op.a * c;
        let i = op.s + op.a * op.b * c;
        (g, i, g - i * i / m)
    };
    let mut c = 0.0;
    for _ in 0..100_000 {
        let (_, _, next) = map(c);
        if !next.is_finite() {
            break;
        }
        let done = (next - c).abs() <= 1e-15 * next.abs().max(1.0);
        c = next;
        if done {
            let (g, i, _) = map(c);
            let params = vec![g, i];
            let residual = sup_dist(&op.apply(&params)?, &params);
            return Ok(OptimalSolution { params, residual });
        }
    }
    Err(Error::NoConvergence {
        iterations: 100_000,
    })
}

/// Euclidean norm of `Q_omega - Q*` over every `(s, a)` of a finite state set.
pub fn q_l2_error(family: &QFamily, omega: &[f64], q_star: &[f64], n_states: usize) -> Result<f64> {
    let m = family.n_actions();
    if q_star.len() != n_states * m {
        return Err(Error::Dimension(format!(
            "optimum has {} entries, expected {}",
            q_star.len(),
            n_states * m
        )));
    }
    let states = ndarray::Array2::from_shape_fn((n_states, 1), |(i, _)| i as f64);
    let q = family.q_table(omega, &states)?;
    Ok(q.iter()
        .zip(q_star)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Euclidean distance between parameter vectors.
pub fn param_l2_error(omega: &[f64], omega_star: &[f64]) -> Result<f64> {
    if omega.len() != omega_star.len() {
        return Err(Error::ParamLength {
            expected: omega_star.len(),
            got: omega.len(),
        });
    }
    Ok(omega
        .iter()
        .zip(omega_star)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Discounted return of the greedy policy from `start`, truncated at
/// `horizon` steps or termination.
pub fn rollout_return(
    env: &Env,
    family: &QFamily,
    omega: &[f64],
    start: &[f64],
    horizon: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::Invalid("horizon must be at least 1".into()));
    }
    let gamma = env.gamma();
    let mut state = start.to_vec();
    let mut ret = 0.0;
    let mut discount = 1.0;
    for _ in 0..horizon {
        let a = family.greedy_action(omega, &state)?;
        let step = env.step(&state, a, rng)?;
        ret += discount * step.reward;
        if step.terminal {
            break;
        }
        discount *= gamma;
        state = step.next_state;
    }
    Ok(ret)
}

/// Number of dataset states whose nearest grid point (in coordinates scaled
/// by the state bounds) is each grid point.
pub fn grid_weights(dataset: &Dataset, grid: &[[f64; 2]]) -> Vec<usize> {
    let mut counts = vec![0; grid.len()];
    for t in &dataset.transitions {
        let (p, v) = (t.state[0] / MAX_POSITION, t.state[1] / MAX_VELOCITY);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, g) in grid.iter().enumerate() {
            let d = (p - g[0] / MAX_POSITION).powi(2) + (v - g[1] / MAX_VELOCITY).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        counts[best] += 1;
    }
    counts
}

/// Weighted mean of greedy returns from each grid state. Grid states with
/// zero weight are not simulated.
pub fn weighted_grid_return(
    env: &Env,
    family: &QFamily,
    omega: &[f64],
    grid: &[[f64; 2]],
    weights: &[usize],
    horizon: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("all grid weights are zero".into()));
    }
    let mut acc = 0.0;
    for (g, &w) in grid.iter().zip(weights) {
        if w == 0 {
            continue;
        }
        acc += w as f64 * rollout_return(env, family, omega, g, horizon, rng)?;
    }
    Ok(acc / total as f64)
}

/// Car-on-hill protocol: greedy returns from each grid state weighted by the
/// dataset's visitation of that cell.
pub fn car_on_hill_weighted_eval(
    env: &Env,
    dataset: &Dataset,
    family: &QFamily,
    omega: &[f64],
    grid: &[[f64; 2]],
    rng: &mut SimRng,
) -> Result<f64> {
    let horizon = env.horizon().unwrap_or(100);
    let weights = grid_weights(dataset, grid);
    weighted_grid_return(env, family, omega, grid, &weights, horizon, rng)
}

/// Greedy action at every grid point, in grid order.
pub fn policy_map(family: &QFamily, omega: &[f64], grid: &[[f64; 2]]) -> Result<Vec<usize>> {
    grid.iter()
        .map(|g| family.greedy_action(omega, g))
        .collect()
}

/// Mean greedy return over `simulations` rollouts from `start`.
pub fn mean_return(
    env: &Env,
    family: &QFamily,
    omega: &[f64],
    start: &[f64],
    horizon: usize,
    simulations: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    let mut acc = 0.0;
    for _ in 0..simulations {
        acc += rollout_return(env, family, omega, start, horizon, rng)?;
    }
    Ok(acc / simulations.max(1) as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Across-seed summary of one metric at one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub iteration: usize,
    pub metric: String,
    pub mean: f64,
    /// 95% normal-approximation interval; `None` with fewer than 2 seeds.
    pub ci: Option<(f64, f64)>,
    pub n_seeds: usize,
}

pub fn summarize(iteration: usize, metric: &str, values: &[f64]) -> Summary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let ci = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let half = 1.96 * (var / n as f64).sqrt();
        (mean - half, mean + half)
    });
    Summary {
        iteration,
        metric: metric.to_string(),
        mean,
        ci,
        n_seeds: n,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<Summary>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,metric,mean,ci_low,ci_high,n_seeds\n");
        for r in &self.rows {
            let (lo, hi) = match r.ci {
                Some((lo, hi)) => (format!("{lo:e}"), format!("{hi:e}")),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{:e},{},{},{}",
                r.iteration, r.metric, r.mean, lo, hi, r.n_seeds
            );
        }
        out
    }
}
