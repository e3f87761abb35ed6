use serde::{Deserialize, Serialize};

use super::{Environment, SimRng, Step};
use crate::error::Result;

/// Scalar linear quadratic regulator: `s' = A s + B a`,
/// `r = Q s^2 + 2 S s a + R a^2`.
///
/// Actions are indices into `actions`, a discretization of the real line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqrEnv {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub s: f64,
    pub r: f64,
    pub gamma: f64,
    pub actions: Vec<f64>,
}

/// `n` evenly spaced points over `[low, high]`, endpoints included.
pub fn linspace(low: f64, high: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![low],
        _ => (0..n)
            .map(|i| low + (high - low) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

impl Default for LqrEnv {
    fn default() -> Self {
        Self {
            a: -0.46,
            b: 0.54,
            q: -0.73,
            s: -0.315,
            r: -0.93,
            gamma: 1.0,
            actions: linspace(-8.0, 8.0, 200),
        }
    }
}

impl LqrEnv {
    pub fn next_state(&self, s: f64, a: f64) -> f64 {
        self.a * s + self.b * a
    }

    pub fn reward(&self, s: f64, a: f64) -> f64 {
        self.q * s * s + 2.0 * self.s * s * a + self.r * a * a
    }
}

impl Environment for LqrEnv {
    fn state_dim(&self) -> usize {
        1
    }
    fn n_actions(&self) -> usize {
        self.actions.len()
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }
    fn horizon(&self) -> Option<usize> {
        None
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![0.0]
    }
    fn action_value(&self, action: usize) -> f64 {
        self.actions[action]
    }

    fn step(&self, state: &[f64], action: usize, _rng: &mut SimRng) -> Result<Step> {
        self.check_action(action)?;
        let (s, a) = (state[0], self.actions[action]);
        Ok(Step {
            next_state: vec![self.next_state(s, a)],
            reward: self.reward(s, a),
            terminal: false,
        })
    }
}
