//! Bellman operators on parameter space: closed forms, learnable
//! parameterizations, iteration and fixed points.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{DiffParams, Matrix, ReduceAxis, Tape, Var};
use crate::environments::{FiniteMdp, LqrEnv, Transition};
use crate::error::{Error, Result};
use crate::qspace::{QFamily, TRUNCATION};

/// `iterate` aborts once an iterate leaves this L-infinity ball.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Margin below 1 required of the spectral radius before a linear operator's
/// fixed point is formed.
pub const CONTRACTION_MARGIN: f64 = 1e-6;

/// A map `Omega -> Omega`.
pub trait Operator {
    fn dim(&self) -> usize;
    fn apply(&self, omega: &[f64]) -> Result<Vec<f64>>;

    fn check_dim(&self, omega: &[f64]) -> Result<()> {
        if omega.len() != self.dim() {
            return Err(Error::ParamLength {
                expected: self.dim(),
                got: omega.len(),
            });
        }
        Ok(())
    }
}

fn sup_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn sup_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

/// `[omega0, L(omega0), ..., L^k(omega0)]`.
pub fn iterate(op: &dyn Operator, omega0: &[f64], k: usize) -> Result<Vec<Vec<f64>>> {
    op.check_dim(omega0)?;
    let mut out = Vec::with_capacity(k + 1);
    out.push(omega0.to_vec());
    for step in 1..=k {
        let next = op.apply(out.last().expect("non-empty"))?;
        let norm = sup_norm(&next);
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                step,
                detail: format!("|omega|_inf = {norm:e}"),
            });
        }
        out.push(next);
    }
    Ok(out)
}

/// Largest observed `|L(w) - L(w')|_inf / |w - w'|_inf`. Coincident pairs are
/// skipped.
pub fn contraction_factor(op: &dyn Operator, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let mut factor: f64 = 0.0;
    for (w, v) in pairs {
        let d = sup_dist(w, v);
        if d == 0.0 {
            continue;
        }
        let lw = op.apply(w)?;
        let lv = op.apply(v)?;
        factor = factor.max(sup_dist(&lw, &lv) / d);
    }
    Ok(factor)
}

pub struct Identity {
    pub dim: usize,
}

impl Operator for Identity {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, omega: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(omega)?;
        Ok(omega.to_vec())
    }
}

/// Sample-based optimal Bellman operator.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalBellman {
    pub gamma: f64,
}

impl EmpiricalBellman {
    /// `r + gamma max_a' Q_omega(s', a')`, or `r` on terminal transitions. The
    /// max runs over the family's discrete action set.
    pub fn target(&self, family: &QFamily, omega: &[f64], t: &Transition) -> Result<f64> {
        family.check(omega)?;
        if t.terminal {
            return Ok(t.reward);
        }
        let q = family.q_values(omega, &t.next_state)?;
        let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(t.reward + self.gamma * best)
    }
}

/// `L(Q) = R + gamma P max_a Q(., a)` for a tabular `Q` indexed `s * M + a`.
#[derive(Clone, Debug, PartialEq)]
pub struct FinitePbo {
    pub n_states: usize,
    pub n_actions: usize,
    pub rewards: Vec<f64>,
    pub transitions: Matrix,
    pub gamma: f64,
}

impl FinitePbo {
    pub fn from_model(mdp: &FiniteMdp) -> Self {
        Self {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            rewards: mdp.rewards.clone(),
            transitions: mdp.transitions.clone(),
            gamma: mdp.gamma,
        }
    }

    fn state_max(&self, q: &[f64]) -> Vec<f64> {
        q.chunks(self.n_actions)
            .map(|c| c.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

impl Operator for FinitePbo {
    fn dim(&self) -> usize {
        self.n_states * self.n_actions
    }

    fn apply(&self, omega: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(omega)?;
        let v = self.state_max(omega);
        let pv = self.transitions.dot(&ArrayView1::from(&v));
        Ok(self
            .rewards
            .iter()
            .zip(pv.iter())
            .map(|(r, x)| r + self.gamma * x)
            .collect())
    }
}

/// Closed form for the scalar LQR with quadratic value family
/// `G s^2 + 2 I s a + M a^2`:
/// `L(G, I) = (Q + A^2 c, S + A B c)` with `c = G - I^2 / M`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrPbo {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub s: f64,
    pub m: f64,
}

impl LqrPbo {
    pub fn from_env(env: &LqrEnv, m: f64) -> Self {
        Self {
            a: env.a,
            b: env.b,
            q: env.q,
            s: env.s,
            m,
        }
    }

    /// Distance from `omega` to the line `(Q, S) + t (A^2, A B)` that holds
    /// every output.
    pub fn line_distance(&self, omega: &[f64]) -> f64 {
        let (dx, dy) = (self.a * self.a, self.a * self.b);
        let (px, py) = (omega[0] - self.q, omega[1] - self.s);
        (px * dy - py * dx).abs() / (dx * dx + dy * dy).sqrt()
    }
}

impl Operator for LqrPbo {
    fn dim(&self) -> usize {
        2
    }
    fn apply(&self, omega: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(omega)?;
        let c = omega[0] - omega[1] * omega[1] / self.m;
        Ok(vec![
            self.q + self.a * self.a * c,
            self.s + self.a * self.b * c,
        ])
    }
}

/// Low-rank closed form on a finite state set:
/// `L(w) = theta + gamma sum_s' max_a' <sigma(s', a'), w> mu(s')`.
///
/// `features` has row `s * M + a`; `mu` has one row per next state.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankPbo {
    pub theta: Vec<f64>,
    pub mu: Matrix,
    pub features: Matrix,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
}

impl LowRankPbo {
    /// Random instance of a normalized low-rank MDP: every `sigma(s, a)` and
    /// every column of `mu` is a probability vector, so
    /// `P(s' | s, a) = <sigma(s, a), mu(s')>` is row-stochastic.
    pub fn random_normalized<R: Rng>(
        n_states: usize,
        n_actions: usize,
        d: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Self {
        let mut features =
            Array2::from_shape_fn((n_states * n_actions, d), |_| rng.random::<f64>());
        for mut row in features.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let mut mu = Array2::from_shape_fn((n_states, d), |_| rng.random::<f64>());
        for mut col in mu.columns_mut() {
            let s = col.sum();
            col /= s;
        }
        let theta = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            theta,
            mu,
            features,
            n_states,
            n_actions,
            gamma,
        }
    }

    pub fn family(&self) -> QFamily {
        QFamily::LowRank {
            features: self.features.clone(),
            n_states: self.n_states,
            n_actions: self.n_actions,
        }
    }

    /// The tabular MDP the factors describe.
    pub fn model(&self) -> Result<FiniteMdp> {
        let rewards = self.features.dot(&ArrayView1::from(&self.theta)).to_vec();
        let transitions = self.features.dot(&self.mu.t());
        FiniteMdp::new(
            self.n_states,
            self.n_actions,
            rewards,
            transitions,
            self.gamma,
        )
    }
}

impl Operator for LowRankPbo {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn apply(&self, omega: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(omega)?;
        let q = self.features.dot(&ArrayView1::from(omega));
        let best: Vec<f64> = q
            .as_slice()
            .expect("contiguous")
            .chunks(self.n_actions)
            .map(|c| c.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let pushed = self.mu.t().dot(&ArrayView1::from(&best));
        Ok(self
            .theta
            .iter()
            .zip(pushed.iter())
            .map(|(t, x)| t + self.gamma * x)
            .collect())
    }
}

/// Shape of a learnable (or frozen closed-form) operator.
#[derive(Clone, Debug, PartialEq)]
pub enum PboArch {
    /// `L(w) = A w + b`. Segments `a` (P x P) and `b` (1 x P).
    Linear,
    /// ReLU network `P -> hidden... -> P`. Segments `w{l}`, `b{l}`.
    Mlp {
        hidden: Vec<usize>,
    },
    /// Finite closed form with unknown rewards `r` (1 x NM) and transition
    /// `logits` (NM x N) mapped to row-stochastic `P` by a softmax.
    StructuredFinite {
        n_states: usize,
        n_actions: usize,
        gamma: f64,
    },
    /// LQR closed form with unknown `abqs = (A, B, Q, S)` and fixed `M`.
    StructuredLqr {
        m: f64,
    },
    /// Known closed forms; no trainable parameters.
    ClosedFormFinite(FinitePbo),
    ClosedFormLqr(LqrPbo),
}

impl PboArch {
    pub fn name(&self) -> &'static str {
        match self {
            PboArch::Linear => "linear",
            PboArch::Mlp { .. } => "mlp",
            PboArch::StructuredFinite { .. } => "structured_finite",
            PboArch::StructuredLqr { .. } => "structured_lqr",
            PboArch::ClosedFormFinite(_) | PboArch::ClosedFormLqr(_) => "closed_form",
        }
    }
}

/// Operator `L_phi` with its trainable parameters `phi`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterizedPbo {
    pub arch: PboArch,
    pub dim: usize,
    pub params: DiffParams,
}

impl ParameterizedPbo {
    /// Zero-initialized parameters.
    pub fn new(arch: PboArch, dim: usize) -> Result<Self> {
        let params = match &arch {
            PboArch::Linear => DiffParams::zeros(&[("a", dim, dim), ("b", 1, dim)]),
            PboArch::Mlp { hidden } => {
                let mut sizes = vec![dim];
                sizes.extend(hidden);
                sizes.push(dim);
                let names: Vec<(String, usize, usize)> = sizes
                    .windows(2)
                    .enumerate()
                    .flat_map(|(l, w)| [(format!("w{l}"), w[0], w[1]), (format!("b{l}"), 1, w[1])])
                    .collect();
                let refs: Vec<(&str, usize, usize)> =
                    names.iter().map(|(n, r, c)| (n.as_str(), *r, *c)).collect();
                DiffParams::zeros(&refs)
            }
            PboArch::StructuredFinite {
                n_states,
                n_actions,
                ..
            } => {
                if n_states * n_actions != dim {
                    return Err(Error::Dimension(format!(
                        "structured finite operator over {n_states}x{n_actions} needs dim {}, got {dim}",
                        n_states * n_actions
                    )));
                }
                DiffParams::zeros(&[("r", 1, dim), ("logits", dim, *n_states)])
            }
            PboArch::StructuredLqr { .. } => {
                if dim != 2 {
                    return Err(Error::Dimension(format!(
                        "LQR operator needs dim 2, got {dim}"
                    )));
                }
                DiffParams::zeros(&[("abqs", 1, 4)])
            }
            PboArch::ClosedFormFinite(op) => {
                if op.dim() != dim {
                    return Err(Error::Dimension(format!(
                        "closed form has dim {}, got {dim}",
                        op.dim()
                    )));
                }
                DiffParams::empty()
            }
            PboArch::ClosedFormLqr(_) => {
                if dim != 2 {
                    return Err(Error::Dimension(format!(
                        "LQR operator needs dim 2, got {dim}"
                    )));
                }
                DiffParams::empty()
            }
        };
        Ok(Self { arch, dim, params })
    }

    /// Truncated-normal initialization of every parameter.
    pub fn init_random<R: Rng>(&mut self, std: f64, rng: &mut R) -> Result<()> {
        if std <= 0.0 || !std.is_finite() {
            return Err(Error::Invalid(format!("std must be positive, got {std}")));
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
        for x in self.params.values_mut() {
            *x = loop {
                let v = normal.sample(rng);
                if v.abs() <= TRUNCATION * std {
                    break v;
                }
            };
        }
        Ok(())
    }

    pub fn supports_fixed_point(&self) -> bool {
        matches!(self.arch, PboArch::Linear)
    }

    /// Register `phi` on a tape as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// `L_phi` applied to every row of `omegas` (`B x P`).
    pub fn tape_apply(&self, tape: &mut Tape, omegas: Var, phi: &[Var]) -> Result<Var> {
        let p = tape.value(omegas).ncols();
        if p != self.dim {
            return Err(Error::ParamLength {
                expected: self.dim,
                got: p,
            });
        }
        match &self.arch {
            PboArch::Linear => {
                let at = tape.transpose(phi[0])?;
                tape.affine(omegas, at, phi[1])
            }
            PboArch::Mlp { .. } => {
                let layers = phi.len() / 2;
                let mut h = omegas;
                for l in 0..layers {
                    h = tape.affine(h, phi[2 * l], phi[2 * l + 1])?;
                    if l + 1 < layers {
                        h = tape.relu(h)?;
                    }
                }
                Ok(h)
            }
            PboArch::StructuredFinite {
                n_states,
                n_actions,
                gamma,
            } => {
                let probs = tape.softmax_rows(phi[1])?;
                finite_on_tape(tape, omegas, phi[0], probs, *n_states, *n_actions, *gamma)
            }
            PboArch::ClosedFormFinite(op) => {
                let r = tape.input(
                    Array2::from_shape_vec((1, op.dim()), op.rewards.clone()).expect("reward row"),
                );
                let probs = tape.input(op.transitions.clone());
                finite_on_tape(tape, omegas, r, probs, op.n_states, op.n_actions, op.gamma)
            }
            PboArch::StructuredLqr { m } => lqr_on_tape(tape, omegas, phi[0], *m),
            PboArch::ClosedFormLqr(op) => {
                let abqs = tape.input(
                    Array2::from_shape_vec((1, 4), vec![op.a, op.b, op.q, op.s]).expect("1x4"),
                );
                lqr_on_tape(tape, omegas, abqs, op.m)
            }
        }
    }

    /// Spectral radius of `A` for the linear architecture.
    pub fn spectral_radius(&self) -> Option<f64> {
        if !self.supports_fixed_point() {
            return None;
        }
        let a = self.params.segment("a")?;
        let n = a.nrows();
        let m = DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
        Some(
            m.complex_eigenvalues()
                .iter()
                .fold(0.0, |r: f64, z| r.max(z.norm())),
        )
    }

    fn check_contractive(&self) -> Result<()> {
        match self.spectral_radius() {
            None => Err(Error::Invalid(format!(
                "{} operator has no computable fixed point",
                self.arch.name()
            ))),
            Some(radius) if radius >= 1.0 - CONTRACTION_MARGIN || !radius.is_finite() => {
                Err(Error::NonContractive { radius })
            }
            Some(_) => Ok(()),
        }
    }

    /// Fixed point `(I - A)^{-1} b` of a contractive linear operator.
    pub fn fixed_point(&self) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let phi = self.params.bind_frozen(&mut tape);
        let x = self.tape_fixed_point(&mut tape, &phi)?;
        Ok(tape.value(x).iter().copied().collect())
    }

    /// Fixed point as a `1 x P` node, differentiable through the implicit solve.
    pub fn tape_fixed_point(&self, tape: &mut Tape, phi: &[Var]) -> Result<Var> {
        self.check_contractive()?;
        tape.linear_fixed_point(phi[0], phi[1])
    }
}

fn finite_on_tape(
    tape: &mut Tape,
    omegas: Var,
    rewards: Var,
    probs: Var,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
) -> Result<Var> {
    let b = tape.value(omegas).nrows();
    let per_state = tape.reshape(omegas, b * n_states, n_actions)?;
    let best = tape.max_axis(per_state, ReduceAxis::Cols)?;
    let v = tape.reshape(best, b, n_states)?;
    let pt = tape.transpose(probs)?;
    let pv = tape.matmul(v, pt)?;
    let disc = tape.scale(pv, gamma)?;
    tape.add(rewards, disc)
}

fn lqr_on_tape(tape: &mut Tape, omegas: Var, abqs: Var, m: f64) -> Result<Var> {
    let g = tape.slice_cols(omegas, 0, 1)?;
    let i = tape.slice_cols(omegas, 1, 2)?;
    let i2 = tape.square(i)?;
    let i2m = tape.scale(i2, -1.0 / m)?;
    let c = tape.add(g, i2m)?;
    let a = tape.slice_cols(abqs, 0, 1)?;
    let b = tape.slice_cols(abqs, 1, 2)?;
    let q = tape.slice_cols(abqs, 2, 3)?;
    let s = tape.slice_cols(abqs, 3, 4)?;
    let a2 = tape.mul(a, a)?;
    let ab = tape.mul(a, b)?;
    let ca2 = tape.mul(c, a2)?;
    let cab = tape.mul(c, ab)?;
    let g_next = tape.add(q, ca2)?;
    let i_next = tape.add(s, cab)?;
    tape.concat_cols(&[g_next, i_next])
}

impl Operator for ParameterizedPbo {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, omega: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(omega)?;
        let mut tape = Tape::new();
        let phi = self.params.bind_frozen(&mut tape);
        let w = tape.input(Array2::from_shape_vec((1, self.dim), omega.to_vec()).expect("row"));
        let out = self.tape_apply(&mut tape, w, &phi)?;
        Ok(tape.value(out).iter().copied().collect())
    }
}

/// `L_phi` applied to a batch of parameter vectors without recording
/// gradients.
pub fn apply_batch(pbo: &ParameterizedPbo, omegas: &Matrix) -> Result<Matrix> {
    Ok(pbo.iterate_rows(omegas, 1)?.pop().expect("two iterates"))
}

impl ParameterizedPbo {
    /// `omegas, L(omegas), ..., L^k(omegas)` row by row, binding the
    /// operator once. Fails like [`iterate`] when a row blows up.
    pub fn iterate_rows(&self, omegas: &Matrix, k: usize) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let phi = self.params.bind_frozen(&mut tape);
        let mut w = tape.input(omegas.clone());
        let mut out = Vec::with_capacity(k + 1);
        out.push(omegas.clone());
        for step in 1..=k {
            w = self.tape_apply(&mut tape, w, &phi)?;
            let next = tape.value(w);
            let norm = next.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
                return Err(Error::Divergence {
                    step,
                    detail: format!("|omega|_inf = {norm:e}"),
                });
            }
            out.push(next.clone());
        }
        Ok(out)
    }
}
