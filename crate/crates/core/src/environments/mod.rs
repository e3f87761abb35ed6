//! Benchmark MDPs and dataset collection.

mod bicycle;
mod car_on_hill;
mod chain_walk;
mod dataset;
mod lqr;

pub use bicycle::Bicycle;
pub use car_on_hill::{start_state_grid, CarOnHill, MAX_POSITION, MAX_VELOCITY};
pub use chain_walk::ChainWalk;
pub use dataset::{collect_dataset, Batch, Dataset, Phase, Recipe, StartDist, Transition};
pub use lqr::{linspace, LqrEnv};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// Random source used for every stochastic path in the crate.
pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Environment {
    fn state_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn gamma(&self) -> f64;
    /// `None` for infinite-horizon problems.
    fn horizon(&self) -> Option<usize>;
    fn initial_state(&self) -> Vec<f64>;
    /// Numeric value attached to an action index (used by the CSV format and
    /// by value families that take the action as an input).
    fn action_value(&self, action: usize) -> f64 {
        action as f64
    }
    fn step(&self, state: &[f64], action: usize, rng: &mut SimRng) -> Result<Step>;

    fn check_action(&self, action: usize) -> Result<()> {
        if action >= self.n_actions() {
            return Err(Error::InvalidAction {
                action,
                n_actions: self.n_actions(),
            });
        }
        Ok(())
    }
}

/// Known tabular model: `rewards[s * M + a]` and `transitions[(s * M + a), s']`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub rewards: Vec<f64>,
    pub transitions: Matrix,
    pub gamma: f64,
}

impl FiniteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        rewards: Vec<f64>,
        transitions: Matrix,
        gamma: f64,
    ) -> Result<Self> {
        let rows = n_states * n_actions;
        if rewards.len() != rows || transitions.dim() != (rows, n_states) {
            return Err(Error::Dimension(format!(
                "model with {n_states} states and {n_actions} actions needs {rows} rewards and a {rows}x{n_states} kernel"
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            rewards,
            transitions,
            gamma,
        })
    }

    /// Largest deviation of a kernel row sum from one.
    pub fn row_sum_error(&self) -> f64 {
        self.transitions
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Deterministic model from a successor table `next[s * M + a]`.
    pub fn deterministic(
        n_states: usize,
        n_actions: usize,
        rewards: Vec<f64>,
        next: &[usize],
        gamma: f64,
    ) -> Result<Self> {
        let rows = n_states * n_actions;
        if next.len() != rows {
            return Err(Error::Dimension(format!(
                "{} successors for {rows} pairs",
                next.len()
            )));
        }
        let mut p = Array2::zeros((rows, n_states));
        for (i, &sp) in next.iter().enumerate() {
            if sp >= n_states {
                return Err(Error::Dimension(format!("successor {sp} out of range")));
            }
            p[[i, sp]] = 1.0;
        }
        Self::new(n_states, n_actions, rewards, p, gamma)
    }
}

/// Any of the benchmark environments, selected at configuration time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Env {
    ChainWalk(ChainWalk),
    Lqr(LqrEnv),
    CarOnHill(CarOnHill),
    Bicycle(Bicycle),
}

impl Env {
    pub fn id(&self) -> &'static str {
        match self {
            Env::ChainWalk(_) => "chain_walk",
            Env::Lqr(_) => "lqr",
            Env::CarOnHill(_) => "car_on_hill",
            Env::Bicycle(_) => "bicycle",
        }
    }

    fn inner(&self) -> &dyn Environment {
        match self {
            Env::ChainWalk(e) => e,
            Env::Lqr(e) => e,
            Env::CarOnHill(e) => e,
            Env::Bicycle(e) => e,
        }
    }
}

impl Environment for Env {
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }
    fn n_actions(&self) -> usize {
        self.inner().n_actions()
    }
    fn gamma(&self) -> f64 {
        self.inner().gamma()
    }
    fn horizon(&self) -> Option<usize> {
        self.inner().horizon()
    }
    fn initial_state(&self) -> Vec<f64> {
        self.inner().initial_state()
    }
    fn action_value(&self, action: usize) -> f64 {
        self.inner().action_value(action)
    }
    fn step(&self, state: &[f64], action: usize, rng: &mut SimRng) -> Result<Step> {
        self.inner().step(state, action, rng)
    }
}
