use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, FiniteMdp, SimRng, Step};
use crate::error::Result;

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Chain of `n_states` cells with left/right moves. The chosen move succeeds
/// with `success_prob`, otherwise the agent stays put; moving off either end
/// leaves the state unchanged. Reward is 1 in `reward_states`, 0 elsewhere.
///
/// States are encoded as a single coordinate holding the cell index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainWalk {
    pub n_states: usize,
    pub gamma: f64,
    pub success_prob: f64,
    pub reward_states: Vec<usize>,
}

impl Default for ChainWalk {
    fn default() -> Self {
        Self {
            n_states: 20,
            gamma: 0.9,
            success_prob: 0.9,
            reward_states: vec![9, 10],
        }
    }
}

impl ChainWalk {
    pub fn reward(&self, state: usize) -> f64 {
        if self.reward_states.contains(&state) {
            1.0
        } else {
            0.0
        }
    }

    fn intended(&self, state: usize, action: usize) -> usize {
        match action {
            LEFT => state.saturating_sub(1),
            RIGHT => (state + 1).min(self.n_states - 1),
            _ => state,
        }
    }

    pub fn model(&self) -> FiniteMdp {
        let (n, m) = (self.n_states, 2);
        let mut p = Array2::zeros((n * m, n));
        let mut r = vec![0.0; n * m];
        for s in 0..n {
            for a in 0..m {
                let row = s * m + a;
                p[[row, self.intended(s, a)]] += self.success_prob;
                p[[row, s]] += 1.0 - self.success_prob;
                r[row] = self.reward(s);
            }
        }
        FiniteMdp::new(n, m, r, p, self.gamma).expect("consistent dimensions")
    }
}

impl Environment for ChainWalk {
    fn state_dim(&self) -> usize {
        1
    }
    fn n_actions(&self) -> usize {
        2
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

    fn step(&self, state: &[f64], action: usize, rng: &mut SimRng) -> Result<Step> {
        self.check_action(action)?;
        let s = state[0] as usize;
        let next = if rng.random::<f64>() < self.success_prob {
            self.intended(s, action)
        } else {
            s
        };
        Ok(Step {
            next_state: vec![next as f64],
            reward: self.reward(s),
            terminal: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::seeded;
    use crate::Error;

    #[test]
    fn rows_are_distributions() {
        let model = ChainWalk::default().model();
        assert!(model.row_sum_error() < 1e-12);
        assert!(model.transitions.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn reward_states_pay_one_for_any_action() {
        let env = ChainWalk::default();
        let mut rng = seeded(0);
        for &s in &env.reward_states {
            for a in 0..2 {
                let step = env.step(&[s as f64], a, &mut rng).unwrap();
                assert_eq!(step.reward, 1.0);
            }
        }
        assert_eq!(env.step(&[0.0], 1, &mut rng).unwrap().reward, 0.0);
    }

    #[test]
    fn boundary_moves_stay_put() {
        let env = ChainWalk {
            success_prob: 1.0,
            ..ChainWalk::default()
        };
        let mut rng = seeded(1);
        assert_eq!(
            env.step(&[0.0], LEFT, &mut rng).unwrap().next_state,
            vec![0.0]
        );
        assert_eq!(
            env.step(&[19.0], RIGHT, &mut rng).unwrap().next_state,
            vec![19.0]
        );
    }

    #[test]
    fn invalid_action_is_rejected() {
        let env = ChainWalk::default();
        let err = env.step(&[3.0], 2, &mut seeded(0)).unwrap_err();
        assert_eq!(
            err,
            Error::InvalidAction {
                action: 2,
                n_actions: 2
            }
        );
    }
}
