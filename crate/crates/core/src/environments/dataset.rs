use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;

use super::{Env, Environment, SimRng};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// One sample `(s, a, r, s', terminal)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Transitions plus the numeric value of every action index they use.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub state_dim: usize,
    pub action_values: Vec<f64>,
    pub transitions: Vec<Transition>,
}

/// Where episodes start.
#[derive(Clone, Debug, PartialEq)]
pub enum StartDist {
    Fixed(Vec<f64>),
    Uniform { low: Vec<f64>, high: Vec<f64> },
}

impl StartDist {
    fn sample(&self, rng: &mut SimRng) -> Vec<f64> {
        match self {
            StartDist::Fixed(s) => s.clone(),
            StartDist::Uniform { low, high } => low
                .iter()
                .zip(high)
                .map(|(&l, &h)| if h > l { rng.random_range(l..h) } else { l })
                .collect(),
        }
    }
}

/// A block of episodes drawn from one start distribution, stopped once
/// `samples` transitions have been gathered.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub start: StartDist,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Recipe {
    /// Every state-action pair of a finite environment, `repetitions` times.
    Enumerate { n_states: usize, repetitions: usize },
    /// Cartesian mesh of scalar states and continuous actions (LQR).
    Mesh { states: Vec<f64>, actions: Vec<f64> },
    /// Episodes under the collection policy, capped at `max_episode_steps`.
    Episodes {
        phases: Vec<Phase>,
        max_episode_steps: usize,
    },
}

impl Recipe {
    /// Number of transitions the recipe produces for an environment with
    /// `n_actions` actions.
    pub fn size(&self, n_actions: usize) -> usize {
        match self {
            Recipe::Enumerate {
                n_states,
                repetitions,
            } => n_states * n_actions * repetitions,
            Recipe::Mesh { states, actions } => states.len() * actions.len(),
            Recipe::Episodes { phases, .. } => phases.iter().map(|p| p.samples).sum(),
        }
    }
}

/// Collect a dataset following `recipe`. `policy` chooses actions for
/// episodic recipes; the exhaustive recipes ignore it.
///
/// `budget` must match the recipe's size; a zero budget yields an empty
/// dataset.
pub fn collect_dataset(
    env: &Env,
    recipe: &Recipe,
    budget: usize,
    policy: &mut dyn FnMut(&[f64], &mut SimRng) -> usize,
    rng: &mut SimRng,
) -> Result<Dataset> {
    let mut out = Dataset {
        state_dim: env.state_dim(),
        action_values: (0..env.n_actions()).map(|a| env.action_value(a)).collect(),
        transitions: Vec::new(),
    };
    if budget == 0 {
        return Ok(out);
    }
    let expected = recipe.size(env.n_actions());
    if budget != expected {
        return Err(Error::Budget {
            budget,
            detail: format!("recipe yields {expected} transitions"),
        });
    }
    match recipe {
        Recipe::Enumerate {
            n_states,
            repetitions,
        } => {
            for _ in 0..*repetitions {
                for s in 0..*n_states {
                    for a in 0..env.n_actions() {
                        let state = vec![s as f64];
                        let step = env.step(&state, a, rng)?;
                        out.transitions.push(Transition {
                            state,
                            action: a,
                            reward: step.reward,
                            next_state: step.next_state,
                            terminal: step.terminal,
                        });
                    }
                }
            }
        }
        Recipe::Mesh { states, actions } => {
            let Env::Lqr(lqr) = env else {
                return Err(Error::Invalid(format!(
                    "mesh recipe needs a continuous-action environment, got {}",
                    env.id()
                )));
            };
            out.action_values = actions.clone();
            for &s in states {
                for (ai, &a) in actions.iter().enumerate() {
                    out.transitions.push(Transition {
                        state: vec![s],
                        action: ai,
                        reward: lqr.reward(s, a),
                        next_state: vec![lqr.next_state(s, a)],
                        terminal: false,
                    });
                }
            }
        }
        Recipe::Episodes {
            phases,
            max_episode_steps,
        } => {
            for phase in phases {
                let mut gathered = 0;
                while gathered < phase.samples {
                    let mut state = phase.start.sample(rng);
                    for _ in 0..*max_episode_steps {
                        if gathered == phase.samples {
                            break;
                        }
                        let a = policy(&state, rng);
                        let step = env.step(&state, a, rng)?;
                        out.transitions.push(Transition {
                            state: state.clone(),
                            action: a,
                            reward: step.reward,
                            next_state: step.next_state.clone(),
                            terminal: step.terminal,
                        });
                        gathered += 1;
                        if step.terminal {
                            break;
                        }
                        state = step.next_state;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Columnar CSV: `s_0..s_{d-1},a,r,sp_0..sp_{d-1},terminal`. The `a`
    /// column holds the action's numeric value.
    pub fn to_csv(&self) -> String {
        let d = self.state_dim;
        let mut out = String::new();
        let mut header: Vec<String> = (0..d).map(|i| format!("s_{i}")).collect();
        header.push("a".into());
        header.push("r".into());
        header.extend((0..d).map(|i| format!("sp_{i}")));
        header.push("terminal".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for t in &self.transitions {
            let mut row: Vec<String> = t.state.iter().map(|&x| fmt_float(x)).collect();
            row.push(fmt_float(self.action_values[t.action]));
            row.push(fmt_float(t.reward));
            row.extend(t.next_state.iter().map(|&x| fmt_float(x)));
            row.push(if t.terminal { "1" } else { "0" }.into());
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// Parse [`Dataset::to_csv`] output. Action values are mapped back to
    /// indices through `action_values`.
    pub fn from_csv(text: &str, action_values: &[f64]) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Invalid("empty dataset file".into()))?;
        let cols = header.split(',').count();
        if cols < 4 || (cols - 3) % 2 != 0 {
            return Err(Error::Invalid(format!("bad dataset header `{header}`")));
        }
        let d = (cols - 3) / 2;
        let mut transitions = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(Error::Invalid(format!(
                    "line {}: expected {cols} fields",
                    lineno + 2
                )));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Invalid(format!("line {}: {e}", lineno + 2)))
            };
            let state = fields[..d]
                .iter()
                .map(|s| num(s))
                .collect::<Result<Vec<_>>>()?;
            let a_val = num(fields[d])?;
            let action = action_values
                .iter()
                .position(|&v| v == a_val)
                .ok_or_else(|| {
                    Error::Invalid(format!("line {}: unknown action {a_val}", lineno + 2))
                })?;
            let reward = num(fields[d + 1])?;
            let next_state = fields[d + 2..2 * d + 2]
                .iter()
                .map(|s| num(s))
                .collect::<Result<Vec<_>>>()?;
            let terminal = match fields[2 * d + 2].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => {
                    return Err(Error::Invalid(format!(
                        "line {}: terminal `{other}`",
                        lineno + 2
                    )))
                }
            };
            transitions.push(Transition {
                state,
                action,
                reward,
                next_state,
                terminal,
            });
        }
        Ok(Self {
            state_dim: d,
            action_values: action_values.to_vec(),
            transitions,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch::new(
            indices.iter().map(|&i| &self.transitions[i]),
            &self.action_values,
            self.state_dim,
        )
    }

    pub fn full_batch(&self) -> Batch {
        Batch::new(self.transitions.iter(), &self.action_values, self.state_dim)
    }
}

/// Column-oriented view of a set of transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Matrix,
    pub actions: Vec<usize>,
    pub action_values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    pub terminal: Vec<bool>,
}

impl Batch {
    pub fn new<'a>(
        transitions: impl Iterator<Item = &'a Transition>,
        action_values: &[f64],
        state_dim: usize,
    ) -> Self {
        let ts: Vec<&Transition> = transitions.collect();
        let n = ts.len();
        Self {
            states: Array2::from_shape_fn((n, state_dim), |(i, j)| ts[i].state[j]),
            actions: ts.iter().map(|t| t.action).collect(),
            action_values: ts.iter().map(|t| action_values[t.action]).collect(),
            rewards: ts.iter().map(|t| t.reward).collect(),
            next_states: Array2::from_shape_fn((n, state_dim), |(i, j)| ts[i].next_state[j]),
            terminal: ts.iter().map(|t| t.terminal).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::lqr::linspace;
    use crate::environments::{seeded, CarOnHill, ChainWalk, LqrEnv};

    fn uniform(n: usize) -> impl FnMut(&[f64], &mut SimRng) -> usize {
        move |_s: &[f64], rng: &mut SimRng| rng.random_range(0..n)
    }

    #[test]
    fn chain_walk_enumeration() {
        let env = Env::ChainWalk(ChainWalk::default());
        let recipe = Recipe::Enumerate {
            n_states: 20,
            repetitions: 10,
        };
        let d = collect_dataset(&env, &recipe, 400, &mut uniform(2), &mut seeded(0)).unwrap();
        assert_eq!(d.len(), 400);
        for s in 0..20 {
            for a in 0..2 {
                let count = d
                    .transitions
                    .iter()
                    .filter(|t| t.state[0] as usize == s && t.action == a)
                    .count();
                assert_eq!(count, 10);
            }
        }
    }

    #[test]
    fn lqr_mesh() {
        let env = Env::Lqr(LqrEnv::default());
        let mesh = linspace(-4.0, 4.0, 11);
        let recipe = Recipe::Mesh {
            states: mesh.clone(),
            actions: mesh,
        };
        let d = collect_dataset(&env, &recipe, 121, &mut uniform(1), &mut seeded(0)).unwrap();
        assert_eq!(d.len(), 121);
        assert!(d
            .transitions
            .iter()
            .all(|t| t.state[0].abs() <= 4.0 && d.action_values[t.action].abs() <= 4.0));
    }

    #[test]
    fn zero_budget_is_empty_and_mismatch_errors() {
        let env = Env::ChainWalk(ChainWalk::default());
        let recipe = Recipe::Enumerate {
            n_states: 20,
            repetitions: 10,
        };
        let d = collect_dataset(&env, &recipe, 0, &mut uniform(2), &mut seeded(0)).unwrap();
        assert!(d.is_empty());
        let err = collect_dataset(&env, &recipe, 399, &mut uniform(2), &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::Budget { budget: 399, .. }));
    }

    #[test]
    fn episodes_respect_phase_sizes_and_are_reproducible() {
        let env = Env::CarOnHill(CarOnHill::default());
        let recipe = Recipe::Episodes {
            phases: vec![
                Phase {
                    start: StartDist::Fixed(vec![-0.5, 0.0]),
                    samples: 300,
                },
                Phase {
                    start: StartDist::Uniform {
                        low: vec![0.1, 0.38],
                        high: vec![0.5, 1.3],
                    },
                    samples: 50,
                },
            ],
            max_episode_steps: 100,
        };
        let a = collect_dataset(&env, &recipe, 350, &mut uniform(2), &mut seeded(4)).unwrap();
        let b = collect_dataset(&env, &recipe, 350, &mut uniform(2), &mut seeded(4)).unwrap();
        assert_eq!(a.len(), 350);
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.transitions[0].state, vec![-0.5, 0.0]);
        let first_uphill = &a.transitions[300];
        assert!((0.1..0.5).contains(&first_uphill.state[0]));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let env = Env::CarOnHill(CarOnHill::default());
        let recipe = Recipe::Episodes {
            phases: vec![Phase {
                start: StartDist::Fixed(vec![-0.5, 0.0]),
                samples: 40,
            }],
            max_episode_steps: 100,
        };
        let d = collect_dataset(&env, &recipe, 40, &mut uniform(2), &mut seeded(1)).unwrap();
        let text = d.to_csv();
        assert!(text.starts_with("s_0,s_1,a,r,sp_0,sp_1,terminal\n"));
        let back = Dataset::from_csv(&text, &d.action_values).unwrap();
        assert_eq!(back, d);
    }
}
