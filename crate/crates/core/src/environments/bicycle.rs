use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, SimRng, Step};
use crate::error::Result;

/// Bicycle balancing (Randløv & Alstrøm, 1998), balance-only variant.
///
/// State `(omega, omega_dot, theta, theta_dot)`: tilt of the bicycle from
/// vertical and handlebar angle. Five exclusive actions either apply a
/// handlebar torque or shift the rider's centre of mass:
///
/// | index | torque | displacement |
/// |-------|--------|--------------|
/// | 0     | -2     | 0            |
/// | 1     | 0      | 0            |
/// | 2     | 2      | 0            |
/// | 3     | 0      | -0.02        |
/// | 4     | 0      | 0.02         |
///
/// The displacement carries uniform noise of magnitude `noise`. Falling
/// (`|omega| > 12 deg`) pays -1 and terminates; otherwise the reward is the
/// shaping term `shaping_scale * (|omega_t| - |omega_{t+1}|)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bicycle {
    pub gamma: f64,
    pub horizon: usize,
    pub noise: f64,
    pub shaping_scale: f64,
    pub dt: f64,
}

impl Default for Bicycle {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            horizon: 50_000,
            noise: 0.02 / 10.0,
            shaping_scale: 1e4,
            dt: 0.01,
        }
    }
}

const ACTIONS: [(f64, f64); 5] = [
    (-2.0, 0.0),
    (0.0, 0.0),
    (2.0, 0.0),
    (0.0, -0.02),
    (0.0, 0.02),
];

pub const FALL_ANGLE: f64 = 12.0 * PI / 180.0;
const HANDLEBAR_LIMIT: f64 = 80.0 * PI / 180.0;

// Physical constants.
const VELOCITY: f64 = 10.0 / 3.6;
const GRAVITY: f64 = 9.82;
const D_CM: f64 = 0.3;
const C: f64 = 0.66;
const H: f64 = 0.94;
const M_C: f64 = 15.0;
const M_D: f64 = 1.7;
const M_P: f64 = 60.0;
const M_TOTAL: f64 = M_C + M_P;
const WHEEL_RADIUS: f64 = 0.34;
const WHEELBASE: f64 = 1.11;

impl Bicycle {
    /// Deterministic part of the dynamics for a given (already noisy)
    /// displacement.
    pub fn integrate(&self, state: &[f64], torque: f64, displacement: f64) -> [f64; 4] {
        let [omega, omega_dot, theta, theta_dot] = [state[0], state[1], state[2], state[3]];
        let i_bike = 13.0 / 3.0 * M_C * H * H + M_P * (H + D_CM).powi(2);
        let i_dc = M_D * WHEEL_RADIUS * WHEEL_RADIUS;
        let i_dv = 1.5 * M_D * WHEEL_RADIUS * WHEEL_RADIUS;
        let i_dl = 0.5 * M_D * WHEEL_RADIUS * WHEEL_RADIUS;
        let sigma_dot = VELOCITY / WHEEL_RADIUS;

        let phi = omega + (displacement / H).atan();
        let (inv_rf, inv_rb, inv_rcm) = if theta == 0.0 {
            (0.0, 0.0, 0.0)
        } else {
            let inv_rb = theta.tan().abs() / WHEELBASE;
            (
                theta.sin().abs() / WHEELBASE,
                inv_rb,
                1.0 / ((WHEELBASE - C).powi(2) + 1.0 / (inv_rb * inv_rb)).sqrt(),
            )
        };
        let omega_ddot = (M_TOTAL * H * GRAVITY * phi.sin()
            - phi.cos()
                * (i_dc * sigma_dot * theta_dot
                    + theta.signum()
                        * (theta != 0.0) as u8 as f64
                        * VELOCITY
                        * VELOCITY
                        * (M_D * WHEEL_RADIUS * (inv_rf + inv_rb) + M_TOTAL * H * inv_rcm)))
            / i_bike;
        let theta_ddot = (torque - i_dv * sigma_dot * omega_dot) / i_dl;

        let omega_dot = omega_dot + omega_ddot * self.dt;
        let omega = omega + omega_dot * self.dt;
        let mut theta_dot = theta_dot + theta_ddot * self.dt;
        let mut theta = theta + theta_dot * self.dt;
        if theta.abs() > HANDLEBAR_LIMIT {
            theta = theta.signum() * HANDLEBAR_LIMIT;
            theta_dot = 0.0;
        }
        [omega, omega_dot, theta, theta_dot]
    }

    pub fn shaping(&self, omega: f64, next_omega: f64) -> f64 {
        self.shaping_scale * (omega.abs() - next_omega.abs())
    }
}

impl Environment for Bicycle {
    fn state_dim(&self) -> usize {
        4
    }
    fn n_actions(&self) -> usize {
        ACTIONS.len()
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }
    fn horizon(&self) -> Option<usize> {
        Some(self.horizon)
    }
    fn initial_state(&self) -> Vec<f64> {
        vec![0.0; 4]
    }

    fn step(&self, state: &[f64], action: usize, rng: &mut SimRng) -> Result<Step> {
        self.check_action(action)?;
        let (torque, d) = ACTIONS[action];
        let d = d + self.noise * (2.0 * rng.random::<f64>() - 1.0);
        let next = self.integrate(state, torque, d);
        let fallen = next[0].abs() > FALL_ANGLE;
        let reward = if fallen {
            -1.0
        } else {
            self.shaping(state[0], next[0])
        };
        Ok(Step {
            next_state: next.to_vec(),
            reward,
            terminal: fallen,
        })
    }
}
