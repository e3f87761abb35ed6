use serde::{Deserialize, Serialize};

use super::lqr::linspace;
use super::{Environment, SimRng, Step};
use crate::error::Result;

/// Car-on-hill (Ernst, Geurts & Wehenkel, 2005).
///
/// State `(position, velocity)`; action 0 pushes left with `-thrust`,
/// action 1 pushes right with `+thrust`. Dynamics are integrated with RK4
/// over `control_interval` in sub-steps of `integration_step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarOnHill {
    pub gamma: f64,
    pub horizon: usize,
    pub mass: f64,
    pub gravity: f64,
    pub thrust: f64,
    pub control_interval: f64,
    pub integration_step: f64,
}

impl Default for CarOnHill {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            horizon: 100,
            mass: 1.0,
            gravity: 9.81,
            thrust: 4.0,
            control_interval: 0.1,
            integration_step: 1e-3,
        }
    }
}

pub const MAX_POSITION: f64 = 1.0;
pub const MAX_VELOCITY: f64 = 3.0;

fn hill_slope(p: f64) -> f64 {
    if p < 0.0 {
        2.0 * p + 1.0
    } else {
        (1.0 + 5.0 * p * p).powf(-1.5)
    }
}

fn hill_curvature(p: f64) -> f64 {
    if p < 0.0 {
        2.0
    } else {
        -15.0 * p * (1.0 + 5.0 * p * p).powf(-2.5)
    }
}

impl CarOnHill {
    fn derivative(&self, p: f64, v: f64, u: f64) -> (f64, f64) {
        let h1 = hill_slope(p);
        let h2 = hill_curvature(p);
        let denom = 1.0 + h1 * h1;
        let acc = u / (self.mass * denom) - self.gravity * h1 / denom - v * v * h1 * h2 / denom;
        (v, acc)
    }

    fn integrate(&self, p: f64, v: f64, u: f64) -> (f64, f64) {
        let n = (self.control_interval / self.integration_step).round() as usize;
        let h = self.integration_step;
        let (mut p, mut v) = (p, v);
        for _ in 0..n {
            let (k1p, k1v) = self.derivative(p, v, u);
            let (k2p, k2v) = self.derivative(p + 0.5 * h * k1p, v + 0.5 * h * k1v, u);
            let (k3p, k3v) = self.derivative(p + 0.5 * h * k2p, v + 0.5 * h * k2v, u);
            let (k4p, k4v) = self.derivative(p + h * k3p, v + h * k3v, u);
            p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
            v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        }
        (p, v)
    }

    /// Reward of landing in `(p, v)`.
    pub fn reward(p: f64, v: f64) -> f64 {
        if p < -MAX_POSITION || v.abs() > MAX_VELOCITY {
            -1.0
        } else if p > MAX_POSITION {
            1.0
        } else {
            0.0
        }
    }
}

impl Environment for CarOnHill {
    fn state_dim(&self) -> usize {
        2
    }
    fn n_actions(&self) -> usize {
        2
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }
    fn horizon(&self) -> Option<usize> {
        Some(self.horizon)
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![-0.5, 0.0]
    }

    fn step(&self, state: &[f64], action: usize, _rng: &mut SimRng) -> Result<Step> {
        self.check_action(action)?;
        let u = if action == 0 {
            -self.thrust
        } else {
            self.thrust
        };
        let (p, v) = self.integrate(state[0], state[1], u);
        let reward = Self::reward(p, v);
        Ok(Step {
            next_state: vec![p, v],
            reward,
            terminal: reward != 0.0,
        })
    }
}

/// Evenly spaced `resolution x resolution` start states over
/// `[-1, 1] x [-3, 3]`, position-major.
pub fn start_state_grid(resolution: usize) -> Vec<[f64; 2]> {
    let ps = linspace(-MAX_POSITION, MAX_POSITION, resolution);
    let vs = linspace(-MAX_VELOCITY, MAX_VELOCITY, resolution);
    ps.iter()
        .flat_map(|&p| vs.iter().map(move |&v| [p, v]))
        .collect()
}
