//! Value-function families `Q_omega` and their parameter vectors.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Matrix, ReduceAxis, Tape, Var};
use crate::error::{Error, Result};

/// How a discrete-action MLP sees the action.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionEncoding {
    /// State in, one output per action.
    Heads,
    /// The action's code is appended to the state; single output.
    Input(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum QFamily {
    /// One parameter per `(s, a)`, index `s * M + a`. States are cell indices.
    Tabular { n_states: usize, n_actions: usize },
    /// `G s^2 + 2 I s a + M a^2` with `omega = (G, I)`. `action_grid` is the
    /// discrete action set exposed to learning algorithms.
    Quadratic { m: f64, action_grid: Vec<f64> },
    /// ReLU network. Layout: `W0 (in x h0), b0, W1, b1, ...`, row-major.
    Mlp {
        state_dim: usize,
        hidden: Vec<usize>,
        n_actions: usize,
        encoding: ActionEncoding,
    },
    /// `<sigma(s, a), omega>` with tabulated features, row `s * M + a`.
    LowRank {
        features: Matrix,
        n_states: usize,
        n_actions: usize,
    },
}

/// Flat parameters tagged with the family they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub family: String,
    pub data: Vec<f64>,
}

impl ParamVector {
    pub fn to_csv_row(&self) -> String {
        self.data
            .iter()
            .map(|x| format!("{x:.16e}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_csv_row(family: &str, row: &str) -> Result<Self> {
        let data = row
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Invalid(format!("parameter `{f}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            family: family.to_string(),
            data,
        })
    }
}

/// Pre-bound inputs for evaluating `Q_omega(s_i, a_i)` on a tape.
pub struct SaInputs {
    kind: BoundKind,
}

/// Pre-bound inputs for evaluating `max_a Q_omega(s_i, a)` on a tape.
pub struct MaxInputs {
    kind: BoundKind,
    n: usize,
}

enum BoundKind {
    /// Columns of the `B x (N M)` table to gather.
    Table {
        index: Vec<usize>,
        sigma_t: Option<Var>,
    },
    Quadratic {
        features: Var,
        bias: Var,
    },
    Mlp {
        x: Var,
        pick: Option<Vec<usize>>,
    },
}

fn state_index(s: f64, n_states: usize) -> Result<usize> {
    let i = s.round();
    if i < 0.0 || i as usize >= n_states || (s - i).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "state {s} is not a cell index below {n_states}"
        )));
    }
    Ok(i as usize)
}

impl QFamily {
    pub fn tag(&self) -> &'static str {
        match self {
            QFamily::Tabular { .. } => "tabular",
            QFamily::Quadratic { .. } => "quadratic",
            QFamily::Mlp { .. } => "mlp",
            QFamily::LowRank { .. } => "low_rank",
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            QFamily::Tabular { n_actions, .. }
            | QFamily::Mlp { n_actions, .. }
            | QFamily::LowRank { n_actions, .. } => *n_actions,
            QFamily::Quadratic { action_grid, .. } => action_grid.len(),
        }
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn mlp_layers(&self) -> Option<Vec<(usize, usize)>> {
        let QFamily::Mlp {
            state_dim,
            hidden,
            n_actions,
            encoding,
        } = self
        else {
            return None;
        };
        let (input, output) = match encoding {
            ActionEncoding::Heads => (*state_dim, *n_actions),
            ActionEncoding::Input(_) => (state_dim + 1, 1),
        };
        let mut sizes = vec![input];
        sizes.extend(hidden);
        sizes.push(output);
        Some(sizes.windows(2).map(|w| (w[0], w[1])).collect())
    }

    pub fn n_params(&self) -> usize {
        match self {
            QFamily::Tabular {
                n_states,
                n_actions,
            } => n_states * n_actions,
            QFamily::Quadratic { .. } => 2,
            QFamily::Mlp { .. } => self
                .mlp_layers()
                .expect("mlp")
                .iter()
                .map(|(i, o)| i * o + o)
                .sum(),
            QFamily::LowRank { features, .. } => features.ncols(),
        }
    }

    pub fn check(&self, omega: &[f64]) -> Result<()> {
        if omega.len() != self.n_params() {
            return Err(Error::ParamLength {
                expected: self.n_params(),
                got: omega.len(),
            });
        }
        Ok(())
    }

    pub fn wrap(&self, data: Vec<f64>) -> Result<ParamVector> {
        self.check(&data)?;
        Ok(ParamVector {
            family: self.tag().to_string(),
            data,
        })
    }

    /// Numeric value of an action index.
    pub fn action_value(&self, a: usize) -> f64 {
        match self {
            QFamily::Quadratic { action_grid, .. } => action_grid[a],
            QFamily::Mlp {
                encoding: ActionEncoding::Input(codes),
                ..
            } => codes[a],
            _ => a as f64,
        }
    }

    /// `Q_omega(s, a)` for an action index.
    pub fn evaluate(&self, omega: &[f64], state: &[f64], a: usize) -> Result<f64> {
        if a >= self.n_actions() {
            return Err(Error::InvalidAction {
                action: a,
                n_actions: self.n_actions(),
            });
        }
        Ok(self.q_values(omega, state)?[a])
    }

    /// `Q_omega(s, .)` over the family's action set.
    pub fn q_values(&self, omega: &[f64], state: &[f64]) -> Result<Vec<f64>> {
        let states = Array2::from_shape_vec((1, state.len()), state.to_vec())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(self.q_table(omega, &states)?.row(0).to_vec())
    }

    /// `Q_omega(s_i, a_i)` for sampled pairs; see [`QFamily::bind_sa`] for
    /// `action_values`.
    pub fn q_sa(
        &self,
        omega: &[f64],
        states: &Matrix,
        actions: &[usize],
        action_values: &[f64],
    ) -> Result<Vec<f64>> {
        let n = states.nrows();
        if actions.len() != n || action_values.len() != n {
            return Err(Error::Dimension(format!(
                "{} actions and {} action values for {n} states",
                actions.len(),
                action_values.len()
            )));
        }
        if let QFamily::Quadratic { m, .. } = self {
            self.check(omega)?;
            return Ok((0..n)
                .map(|i| {
                    let (s, a) = (states[[i, 0]], action_values[i]);
                    omega[0] * s * s + 2.0 * omega[1] * s * a + m * a * a
                })
                .collect());
        }
        let q = self.q_table(omega, states)?;
        Ok((0..n).map(|i| q[[i, actions[i]]]).collect())
    }

    /// `Q_omega(s_i, a)` for every row of `states`, shape `N x M`.
    pub fn q_table(&self, omega: &[f64], states: &Matrix) -> Result<Matrix> {
        self.check(omega)?;
        let n = states.nrows();
        let m = self.n_actions();
        match self {
            QFamily::Tabular { n_states, .. } => {
                let mut out = Array2::zeros((n, m));
                for i in 0..n {
                    let s = state_index(states[[i, 0]], *n_states)?;
                    for a in 0..m {
                        out[[i, a]] = omega[s * m + a];
                    }
                }
                Ok(out)
            }
            QFamily::LowRank {
                features, n_states, ..
            } => {
                let w = ArrayView1::from(omega);
                let mut out = Array2::zeros((n, m));
                for i in 0..n {
                    let s = state_index(states[[i, 0]], *n_states)?;
                    for a in 0..m {
                        out[[i, a]] = features.row(s * m + a).dot(&w);
                    }
                }
                Ok(out)
            }
            QFamily::Quadratic { m: mq, action_grid } => {
                Ok(Array2::from_shape_fn((n, m), |(i, a)| {
                    quadratic(omega, *mq, states[[i, 0]], action_grid[a])
                }))
            }
            QFamily::Mlp { encoding, .. } => {
                let weights = self.mlp_weights(omega);
                match encoding {
                    ActionEncoding::Heads => Ok(mlp_forward(&weights, states.clone())),
                    ActionEncoding::Input(codes) => {
                        let x = with_action_codes(states, codes);
                        let out = mlp_forward(&weights, x);
                        Ok(out
                            .into_shape_with_order((n, m))
                            .expect("one output per (state, action)"))
                    }
                }
            }
        }
    }

    /// Greedy value and action value at `state`. Discrete families take the
    /// exact max over their action set (ties to the lowest index); the
    /// quadratic family uses its continuous maximizer.
    pub fn max_over_actions(&self, omega: &[f64], state: &[f64]) -> Result<(f64, f64)> {
        if let QFamily::Quadratic { m, .. } = self {
            self.check(omega)?;
            return Ok(quadratic_max(omega, *m, state[0]));
        }
        let q = self.q_values(omega, state)?;
        let a = argmax(&q);
        Ok((q[a], self.action_value(a)))
    }

    /// Greedy action index over the discrete action set.
    pub fn greedy_action(&self, omega: &[f64], state: &[f64]) -> Result<usize> {
        Ok(argmax(&self.q_values(omega, state)?))
    }

    fn mlp_weights(&self, omega: &[f64]) -> Vec<(Matrix, Matrix)> {
        let mut offset = 0;
        let mut out = Vec::new();
        for (i, o) in self.mlp_layers().expect("mlp") {
            let w = Array2::from_shape_vec((i, o), omega[offset..offset + i * o].to_vec())
                .expect("layer size");
            offset += i * o;
            let b = Array2::from_shape_vec((1, o), omega[offset..offset + o].to_vec())
                .expect("bias size");
            offset += o;
            out.push((w, b));
        }
        out
    }

    /// Range of the last layer (weights and bias) in the flat layout.
    pub fn final_layer_range(&self) -> Option<std::ops::Range<usize>> {
        let layers = self.mlp_layers()?;
        let (i, o) = *layers.last()?;
        let total = self.n_params();
        Some(total - (i * o + o)..total)
    }

    /// Bind sampled `(s, a)` pairs. `action_values` holds the numeric action of
    /// each sample; only the quadratic family reads it, since its samples may
    /// use actions outside its grid.
    pub fn bind_sa(
        &self,
        tape: &mut Tape,
        states: &Matrix,
        actions: &[usize],
        action_values: &[f64],
    ) -> Result<SaInputs> {
        let n = states.nrows();
        if actions.len() != n || action_values.len() != n {
            return Err(Error::Dimension(format!(
                "{} actions for {n} states",
                actions.len()
            )));
        }
        let m = self.n_actions();
        let kind = match self {
            QFamily::Tabular { n_states, .. } => BoundKind::Table {
                index: (0..n)
                    .map(|i| Ok(state_index(states[[i, 0]], *n_states)? * m + actions[i]))
                    .collect::<Result<_>>()?,
                sigma_t: None,
            },
            QFamily::LowRank {
                features, n_states, ..
            } => BoundKind::Table {
                index: (0..n)
                    .map(|i| Ok(state_index(states[[i, 0]], *n_states)? * m + actions[i]))
                    .collect::<Result<_>>()?,
                sigma_t: Some(tape.input(features.t().to_owned())),
            },
            QFamily::Quadratic { m: mq, .. } => {
                let feats = Array2::from_shape_fn((2, n), |(r, i)| {
                    let s = states[[i, 0]];
                    if r == 0 {
                        s * s
                    } else {
                        2.0 * s * action_values[i]
                    }
                });
                let bias = Array2::from_shape_fn((1, n), |(_, i)| mq * action_values[i].powi(2));
                BoundKind::Quadratic {
                    features: tape.input(feats),
                    bias: tape.input(bias),
                }
            }
            QFamily::Mlp { encoding, .. } => match encoding {
                ActionEncoding::Heads => BoundKind::Mlp {
                    x: tape.input(states.clone()),
                    pick: Some(actions.to_vec()),
                },
                ActionEncoding::Input(codes) => {
                    let d = states.ncols();
                    let x = Array2::from_shape_fn((n, d + 1), |(i, j)| {
                        if j < d {
                            states[[i, j]]
                        } else {
                            codes[actions[i]]
                        }
                    });
                    BoundKind::Mlp {
                        x: tape.input(x),
                        pick: None,
                    }
                }
            },
        };
        Ok(SaInputs { kind })
    }

    pub fn bind_max(&self, tape: &mut Tape, states: &Matrix) -> Result<MaxInputs> {
        let n = states.nrows();
        let m = self.n_actions();
        let kind = match self {
            QFamily::Tabular { n_states, .. } | QFamily::LowRank { n_states, .. } => {
                let mut index = Vec::with_capacity(n * m);
                for i in 0..n {
                    let s = state_index(states[[i, 0]], *n_states)?;
                    index.extend((0..m).map(|a| s * m + a));
                }
                let sigma_t = match self {
                    QFamily::LowRank { features, .. } => Some(tape.input(features.t().to_owned())),
                    _ => None,
                };
                BoundKind::Table { index, sigma_t }
            }
            QFamily::Quadratic { m: mq, action_grid } => {
                let feats = Array2::from_shape_fn((2, n * m), |(r, c)| {
                    let s = states[[c / m, 0]];
                    if r == 0 {
                        s * s
                    } else {
                        2.0 * s * action_grid[c % m]
                    }
                });
                let bias =
                    Array2::from_shape_fn((1, n * m), |(_, c)| mq * action_grid[c % m].powi(2));
                BoundKind::Quadratic {
                    features: tape.input(feats),
                    bias: tape.input(bias),
                }
            }
            QFamily::Mlp { encoding, .. } => match encoding {
                ActionEncoding::Heads => BoundKind::Mlp {
                    x: tape.input(states.clone()),
                    pick: None,
                },
                ActionEncoding::Input(codes) => BoundKind::Mlp {
                    x: tape.input(with_action_codes(states, codes)),
                    pick: None,
                },
            },
        };
        Ok(MaxInputs { kind, n })
    }

    /// `Q_{omega_b}(s_i, a_i)` for every row `omega_b` of `omegas`, shape `B x N`.
    pub fn tape_q_sa(&self, tape: &mut Tape, omegas: Var, inputs: &SaInputs) -> Result<Var> {
        match &inputs.kind {
            BoundKind::Table { index, sigma_t } => {
                let table = match sigma_t {
                    Some(st) => tape.matmul(omegas, *st)?,
                    None => omegas,
                };
                tape.gather_cols(table, index.clone())
            }
            BoundKind::Quadratic { features, bias } => {
                let lin = tape.matmul(omegas, *features)?;
                tape.add(lin, *bias)
            }
            BoundKind::Mlp { x, pick } => {
                let b = tape.value(omegas).nrows();
                let out = self.tape_mlp(tape, omegas, *x)?;
                let n = tape.value(out).nrows();
                let per_row = match pick {
                    // Heads: (N, B M) -> (N B, M), one action per row.
                    Some(idx) => {
                        let m = self.n_actions();
                        let flat = tape.reshape(out, n * b, m)?;
                        let index = idx
                            .iter()
                            .flat_map(|&a| std::iter::repeat_n(a, b))
                            .collect();
                        let picked = tape.pick_per_row(flat, index)?;
                        tape.reshape(picked, n, b)?
                    }
                    None => out,
                };
                tape.transpose(per_row)
            }
        }
    }

    /// `max_a Q_{omega_b}(s_i, a)` for every row of `omegas`, shape `B x N`.
    pub fn tape_max_q(&self, tape: &mut Tape, omegas: Var, inputs: &MaxInputs) -> Result<Var> {
        let m = self.n_actions();
        let n = inputs.n;
        let b = tape.value(omegas).nrows();
        let all = match &inputs.kind {
            BoundKind::Table { index, sigma_t } => {
                let table = match sigma_t {
                    Some(st) => tape.matmul(omegas, *st)?,
                    None => omegas,
                };
                tape.gather_cols(table, index.clone())?
            }
            BoundKind::Quadratic { features, bias } => {
                let lin = tape.matmul(omegas, *features)?;
                tape.add(lin, *bias)?
            }
            BoundKind::Mlp { x, .. } => {
                let out = self.tape_mlp(tape, omegas, *x)?;
                if matches!(
                    self,
                    QFamily::Mlp {
                        encoding: ActionEncoding::Heads,
                        ..
                    }
                ) {
                    // (N, B M) -> (B, N M), ordered (state, action) per row.
                    let blocks = tape.reshape(out, n * b, m)?;
                    let best = tape.max_axis(blocks, ReduceAxis::Cols)?;
                    let by_state = tape.reshape(best, n, b)?;
                    return tape.transpose(by_state);
                }
                // Action input: (N M, B) with rows ordered (state, action).
                tape.transpose(out)?
            }
        };
        let per_state = tape.reshape(all, b * n, m)?;
        let best = tape.max_axis(per_state, ReduceAxis::Cols)?;
        tape.reshape(best, b, n)
    }

    /// The network of every row of `omegas` on the shared input `x`, one
    /// `(R, outputs)` block per row.
    fn tape_mlp(&self, tape: &mut Tape, omegas: Var, x: Var) -> Result<Var> {
        let layers = self
            .mlp_layers()
            .ok_or_else(|| Error::Invalid("not an mlp family".into()))?;
        tape.hyper_mlp(x, omegas, &layers)
    }

    /// `count` vectors with i.i.d. truncated-normal coordinates in
    /// `[-2 std, 2 std]`. MLPs with more than one hidden layer get a zero final
    /// layer, so every sample outputs zero.
    pub fn sample_param_set<R: Rng>(
        &self,
        count: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Vec<ParamVector>> {
        if std <= 0.0 || !std.is_finite() {
            return Err(Error::Invalid(format!("std must be positive, got {std}")));
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
        let zero_last = match self {
            QFamily::Mlp { hidden, .. } if hidden.len() > 1 => self.final_layer_range(),
            _ => None,
        };
        let p = self.n_params();
        (0..count)
            .map(|_| {
                let mut data: Vec<f64> = (0..p).map(|_| truncated(&normal, std, rng)).collect();
                if let Some(r) = &zero_last {
                    data[r.clone()].iter_mut().for_each(|x| *x = 0.0);
                }
                self.wrap(data)
            })
            .collect()
    }
}

pub const TRUNCATION: f64 = 2.0;

fn truncated<R: Rng>(normal: &Normal<f64>, std: f64, rng: &mut R) -> f64 {
    loop {
        let x = normal.sample(rng);
        if x.abs() <= TRUNCATION * std {
            return x;
        }
    }
}

fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

fn quadratic(omega: &[f64], m: f64, s: f64, a: f64) -> f64 {
    omega[0] * s * s + 2.0 * omega[1] * s * a + m * a * a
}

/// `((G - I^2 / M) s^2, -I / M s)`.
pub fn quadratic_max(omega: &[f64], m: f64, s: f64) -> (f64, f64) {
    let (g, i) = (omega[0], omega[1]);
    ((g - i * i / m) * s * s, -i / m * s)
}

fn with_action_codes(states: &Matrix, codes: &[f64]) -> Matrix {
    let (n, d) = states.dim();
    let m = codes.len();
    Array2::from_shape_fn((n * m, d + 1), |(r, j)| {
        if j < d {
            states[[r / m, j]]
        } else {
            codes[r % m]
        }
    })
}

fn mlp_forward(weights: &[(Matrix, Matrix)], x: Matrix) -> Matrix {
    let mut h = x;
    for (l, (w, b)) in weights.iter().enumerate() {
        h = h.dot(w) + b;
        if l + 1 < weights.len() {
            h.mapv_inplace(|v| v.max(0.0));
        }
    }
    h
}

/// Stack parameter vectors as the rows of a `B x P` matrix.
pub fn stack_params(params: &[&[f64]]) -> Matrix {
    let p = params.first().map_or(0, |x| x.len());
    let mut out = Array2::zeros((params.len(), p));
    for (mut row, src) in out.axis_iter_mut(Axis(0)).zip(params) {
        row.assign(&ArrayView1::from(*src));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::seeded;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn car_family() -> QFamily {
        QFamily::Mlp {
            state_dim: 2,
            hidden: vec![30],
            n_actions: 2,
            encoding: ActionEncoding::Input(vec![-1.0, 1.0]),
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(car_family().n_params(), 151);
        let heads = QFamily::Mlp {
            state_dim: 4,
            hidden: vec![30],
            n_actions: 5,
            encoding: ActionEncoding::Heads,
        };
        assert_eq!(heads.n_params(), 4 * 30 + 30 + 30 * 5 + 5);
        let heads2 = QFamily::Mlp {
            state_dim: 2,
            hidden: vec![30],
            n_actions: 2,
            encoding: ActionEncoding::Heads,
        };
        assert_eq!(heads2.n_params(), 152);
        assert_eq!(
            QFamily::Tabular {
                n_states: 20,
                n_actions: 2
            }
            .n_params(),
            40
        );
    }

    #[test]
    fn quadratic_examples() {
        let f = QFamily::Quadratic {
            m: -1.2,
            action_grid: vec![0.0, 1.0],
        };
        assert_eq!(f.evaluate(&[1.0, 0.0], &[2.0], 0).unwrap(), 4.0);
        assert_eq!(
            f.max_over_actions(&[2.0, 0.0], &[3.0]).unwrap(),
            (18.0, 0.0)
        );
        let (v, _) = f.max_over_actions(&[0.0, 1.0], &[1.0]).unwrap();
        assert!((v - 1.0 / 1.2).abs() < 1e-15);
    }

    #[test]
    fn quadratic_max_matches_fine_grid() {
        let m = -1.2;
        let grid: Vec<f64> = (0..2001).map(|i| -8.0 + 16.0 * i as f64 / 2000.0).collect();
        let f = QFamily::Quadratic {
            m,
            action_grid: grid.clone(),
        };
        let mut rng = seeded(2);
        for _ in 0..200 {
            let omega = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let s: f64 = rng.random_range(-4.0..4.0);
            let (v, a) = f.max_over_actions(&omega, &[s]).unwrap();
            if a.abs() > 8.0 {
                continue;
            }
            let numeric = f
                .q_values(&omega, &[s])
                .unwrap()
                .into_iter()
                .fold(f64::MIN, f64::max);
            // grid spacing 8e-3 leaves an O(M h^2) gap
            assert!(v >= numeric - 1e-12);
            assert!(v - numeric < -m * 0.004f64.powi(2) + 1e-9);
        }
    }

    #[test]
    fn tabular_zero_and_argmax() {
        let f = QFamily::Tabular {
            n_states: 3,
            n_actions: 2,
        };
        assert_eq!(f.q_values(&[0.0; 6], &[1.0]).unwrap(), vec![0.0, 0.0]);
        let mut w = vec![0.0; 6];
        w[2 * 2 + 1] = 0.7;
        assert_eq!(f.max_over_actions(&w, &[2.0]).unwrap(), (0.7, 1.0));
        assert_eq!(f.greedy_action(&[0.0; 6], &[0.0]).unwrap(), 0);
    }

    #[test]
    fn low_rank_basis_features_pick_coordinates() {
        let features = Array2::from_shape_fn((4, 4), |(i, j)| (i == j) as u8 as f64);
        let f = QFamily::LowRank {
            features,
            n_states: 2,
            n_actions: 2,
        };
        let w = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(f.evaluate(&w, &[1.0], 0).unwrap(), 0.3);
    }

    #[test]
    fn length_mismatch_errors() {
        let f = QFamily::Quadratic {
            m: -1.2,
            action_grid: vec![0.0],
        };
        assert_eq!(
            f.evaluate(&[1.0], &[1.0], 0).unwrap_err(),
            Error::ParamLength {
                expected: 2,
                got: 1
            }
        );
    }

    #[test]
    fn deep_mlp_samples_output_zero() {
        let f = QFamily::Mlp {
            state_dim: 2,
            hidden: vec![30, 30],
            n_actions: 3,
            encoding: ActionEncoding::Heads,
        };
        let set = f.sample_param_set(10, 0.3, &mut seeded(0)).unwrap();
        assert_eq!(set.len(), 10);
        for w in &set {
            assert_eq!(f.q_values(&w.data, &[0.3, -2.0]).unwrap(), vec![0.0; 3]);
            assert!(w.data.iter().all(|x| x.abs() <= 0.6));
        }
        assert!(f
            .sample_param_set(0, 0.3, &mut seeded(0))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn tape_paths_match_plain_evaluation() {
        let mut rng = seeded(5);
        let families = vec![
            car_family(),
            QFamily::Mlp {
                state_dim: 2,
                hidden: vec![6, 5],
                n_actions: 3,
                encoding: ActionEncoding::Heads,
            },
            QFamily::Tabular {
                n_states: 4,
                n_actions: 3,
            },
            QFamily::Quadratic {
                m: -1.2,
                action_grid: vec![-1.0, 0.0, 0.5, 2.0],
            },
            QFamily::LowRank {
                features: Array2::from_shape_fn((12, 3), |(i, j)| {
                    ((i * 7 + j * 3) % 5) as f64 / 10.0
                }),
                n_states: 4,
                n_actions: 3,
            },
        ];
        for f in families {
            let omegas: Vec<Vec<f64>> = (0..3)
                .map(|_| {
                    (0..f.n_params())
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect()
                })
                .collect();
            let n = 5;
            let states = Array2::from_shape_fn(
                (
                    n,
                    match &f {
                        QFamily::Mlp { state_dim, .. } => *state_dim,
                        _ => 1,
                    },
                ),
                |(i, j)| match &f {
                    QFamily::Mlp { .. } => ((i * 3 + j) as f64).sin(),
                    QFamily::Quadratic { .. } => i as f64 - 2.0,
                    _ => (i % 4) as f64,
                },
            );
            let actions: Vec<usize> = (0..n).map(|i| i % f.n_actions()).collect();
            let values: Vec<f64> = actions.iter().map(|&a| f.action_value(a)).collect();
            let mut tape = Tape::new();
            let refs: Vec<&[f64]> = omegas.iter().map(|w| w.as_slice()).collect();
            let om = tape.input(stack_params(&refs));
            let sa = f.bind_sa(&mut tape, &states, &actions, &values).unwrap();
            let mx = f.bind_max(&mut tape, &states).unwrap();
            let q = f.tape_q_sa(&mut tape, om, &sa).unwrap();
            let qm = f.tape_max_q(&mut tape, om, &mx).unwrap();
            for (b, w) in omegas.iter().enumerate() {
                let table = f.q_table(w, &states).unwrap();
                for i in 0..n {
                    assert!(
                        (tape.value(q)[[b, i]] - table[[i, actions[i]]]).abs() < 1e-12,
                        "{}",
                        f.tag()
                    );
                    let best = table.row(i).iter().cloned().fold(f64::MIN, f64::max);
                    assert!((tape.value(qm)[[b, i]] - best).abs() < 1e-12, "{}", f.tag());
                }
            }
        }
    }

    proptest! {
        #[test]
        fn linear_families_are_linear(
            w1 in prop::collection::vec(-5.0f64..5.0, 6),
            w2 in prop::collection::vec(-5.0f64..5.0, 6),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
            s in 0usize..3,
        ) {
            let tab = QFamily::Tabular { n_states: 3, n_actions: 2 };
            let low = QFamily::LowRank {
                features: Array2::from_shape_fn((6, 6), |(i, j)| if (i + j) % 3 == 0 { 0.5 } else { 0.0 }),
                n_states: 3,
                n_actions: 2,
            };
            for f in [tab, low] {
                let combo: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| alpha * a + beta * b).collect();
                let q = f.q_values(&combo, &[s as f64]).unwrap();
                let q1 = f.q_values(&w1, &[s as f64]).unwrap();
                let q2 = f.q_values(&w2, &[s as f64]).unwrap();
                for a in 0..2 {
                    prop_assert!((q[a] - (alpha * q1[a] + beta * q2[a])).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn param_csv_round_trip(data in prop::collection::vec(-1e6f64..1e6, 1..20)) {
            let p = ParamVector { family: "mlp".into(), data };
            let back = ParamVector::from_csv_row("mlp", &p.to_csv_row()).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn samples_respect_truncation(std in 1e-7f64..2.0, seed in 0u64..1000) {
            let f = QFamily::Tabular { n_states: 5, n_actions: 2 };
            for w in f.sample_param_set(3, std, &mut seeded(seed)).unwrap() {
                prop_assert!(w.data.iter().all(|x| x.abs() <= 2.0 * std));
            }
        }
    }
}
