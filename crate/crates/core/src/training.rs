//! Unrolled operator losses, Adam with linear annealing, target sync.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::autodiff::{DiffParams, Matrix, Tape, Var};
use crate::environments::Batch;
use crate::error::{Error, Result};
use crate::operators::ParameterizedPbo;
use crate::qspace::{MaxInputs, QFamily};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Bellman iterations unrolled in the loss.
    pub k: usize,
    pub use_fixed_point: bool,
    pub gamma: f64,
    pub batch_size_d: usize,
    pub batch_size_w: usize,
}

impl LossConfig {
    pub fn validate(&self, pbo: &ParameterizedPbo) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config {
                field: "k".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.use_fixed_point && !pbo.supports_fixed_point() {
            return Err(Error::Config {
                field: "loss".into(),
                message: format!(
                    "fixed-point term needs a linear operator, got {}",
                    pbo.arch.name()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Contribution of each unrolled iteration `k = 1..=K`.
    pub terms: Vec<f64>,
    /// Fixed-point residual, when requested.
    pub fixed_point_term: Option<f64>,
    /// Gradient with respect to `phi`, laid out like `pbo.params`.
    pub grad: Vec<f64>,
    /// Largest adjoint magnitude found on the target branch (target
    /// parameters, their iterates and the targets themselves).
    pub target_adjoint_max: f64,
}

/// Inputs shared by every term of one loss evaluation.
struct Bound {
    rewards: Var,
    discount: Var,
}

fn bind_batch(tape: &mut Tape, batch: &Batch, gamma: f64) -> Bound {
    let n = batch.len();
    let rewards = tape.input(Array2::from_shape_vec((1, n), batch.rewards.clone()).expect("row"));
    let discount = tape.input(Array2::from_shape_fn((1, n), |(_, i)| {
        if batch.terminal[i] {
            0.0
        } else {
            gamma
        }
    }));
    Bound { rewards, discount }
}

/// Sum over `k = 1..=K` of the mean squared gap between the gradient-blocked
/// empirical Bellman target built from `L^{k-1}_{phi_bar}(omega)` and the
/// prediction `Q_{L^k_phi(omega)}(s, a)`. With `cfg.use_fixed_point`, the
/// residual at the operator's fixed point is added.
pub fn pbo_loss(
    pbo: &ParameterizedPbo,
    target: &DiffParams,
    family: &QFamily,
    batch: &Batch,
    omegas: &Matrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    pbo_loss_cached(pbo, target, family, batch, omegas, None, cfg)
}

/// [`pbo_loss`] with the target iterates supplied: `chain[j - 1]` holds
/// `L_target^j` of every row of `omegas`, for `j = 1..k`. They stay fixed
/// between target syncs, so training computes them once per epoch.
pub fn pbo_loss_cached(
    pbo: &ParameterizedPbo,
    target: &DiffParams,
    family: &QFamily,
    batch: &Batch,
    omegas: &Matrix,
    chain: Option<&[Matrix]>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate(pbo)?;
    if let Some(c) = chain {
        if c.len() + 1 < cfg.k || c.iter().any(|m| m.dim() != omegas.dim()) {
            return Err(Error::Invalid(format!(
                "target chain of {} levels for k = {} and {:?} parameters",
                c.len(),
                cfg.k,
                omegas.dim()
            )));
        }
    }
    if batch.is_empty() || omegas.nrows() == 0 {
        return Err(Error::Invalid("empty sample or parameter batch".into()));
    }
    let mut tape = Tape::new();
    let phi = pbo.bind(&mut tape);
    let phi_bar = target.bind(&mut tape);
    let w0 = tape.input(omegas.clone());
    let sa = family.bind_sa(
        &mut tape,
        &batch.states,
        &batch.actions,
        &batch.action_values,
    )?;
    let mx = family.bind_max(&mut tape, &batch.next_states)?;
    let bound = bind_batch(&mut tape, batch, cfg.gamma);

    let mut watched: Vec<Var> = phi_bar.clone();
    let mut term_vars = Vec::with_capacity(cfg.k);
    let mut pred_omega = w0;
    let mut target_omega = w0;
    for k in 1..=cfg.k {
        pred_omega = pbo.tape_apply(&mut tape, pred_omega, &phi)?;
        if k > 1 {
            target_omega = match chain {
                Some(c) => tape.input(c[k - 2].clone()),
                None => pbo.tape_apply(&mut tape, target_omega, &phi_bar)?,
            };
            watched.push(target_omega);
        }
        let prediction = family.tape_q_sa(&mut tape, pred_omega, &sa)?;
        let raw_target = bellman_on_tape(&mut tape, family, target_omega, &mx, &bound)?;
        watched.push(raw_target);
        let blocked = tape.stop_gradient(raw_target)?;
        let diff = tape.sub(blocked, prediction)?;
        let sq = tape.square(diff)?;
        let term = tape.mean(sq)?;
        if !tape.scalar(term).is_finite() {
            return Err(Error::Divergence {
                step: k,
                detail: format!("non-finite loss term at k = {k}"),
            });
        }
        term_vars.push(term);
    }

    let mut fp_var = None;
    if cfg.use_fixed_point {
        let x = pbo.tape_fixed_point(&mut tape, &phi)?;
        let x_bar = pbo.tape_fixed_point(&mut tape, &phi_bar)?;
        watched.push(x_bar);
        let prediction = family.tape_q_sa(&mut tape, x, &sa)?;
        let raw_target = bellman_on_tape(&mut tape, family, x_bar, &mx, &bound)?;
        watched.push(raw_target);
        let blocked = tape.stop_gradient(raw_target)?;
        let diff = tape.sub(blocked, prediction)?;
        let sq = tape.square(diff)?;
        let term = tape.mean(sq)?;
        if !tape.scalar(term).is_finite() {
            return Err(Error::Divergence {
                step: cfg.k + 1,
                detail: "non-finite fixed-point term".into(),
            });
        }
        fp_var = Some(term);
    }

    let mut total = term_vars[0];
    for &t in &term_vars[1..] {
        total = tape.add(total, t)?;
    }
    if let Some(fp) = fp_var {
        total = tape.add(total, fp)?;
    }
    let grads = tape.backward(total)?;
    let target_adjoint_max = watched
        .iter()
        .map(|&v| grads.wrt(v).iter().fold(0.0f64, |m, x| m.max(x.abs())))
        .fold(0.0, f64::max);
    Ok(LossOutput {
        loss: tape.scalar(total),
        terms: term_vars.iter().map(|&v| tape.scalar(v)).collect(),
        fixed_point_term: fp_var.map(|v| tape.scalar(v)),
        grad: pbo.params.collect_grad(&grads, &phi),
        target_adjoint_max,
    })
}

/// [`pbo_loss`] with the fixed-point term forced on.
pub fn pbo_loss_fp(
    pbo: &ParameterizedPbo,
    target: &DiffParams,
    family: &QFamily,
    batch: &Batch,
    omegas: &Matrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let cfg = LossConfig {
        use_fixed_point: true,
        ..cfg.clone()
    };
    pbo_loss(pbo, target, family, batch, omegas, &cfg)
}

/// `r + gamma (1 - terminal) max_a' Q_omega(s', a')` per row of `omegas`.
fn bellman_on_tape(
    tape: &mut Tape,
    family: &QFamily,
    omegas: Var,
    mx: &MaxInputs,
    b: &Bound,
) -> Result<Var> {
    let best = family.tape_max_q(tape, omegas, mx)?;
    let disc = tape.mul(best, b.discount)?;
    tape.add(disc, b.rewards)
}

/// Linear annealing `start_lr -> end_lr` over `total_steps` optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub start_lr: f64,
    pub end_lr: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.end_lr;
        }
        let frac = (step as f64 / (self.total_steps - 1) as f64).min(1.0);
        self.start_lr * (1.0 - frac) + self.end_lr * frac
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam state of {} for {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// One Adam update at `schedule.lr(step)`.
pub fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut Adam,
    schedule: &Schedule,
    step: usize,
) -> Result<()> {
    state.update(params, grad, schedule.lr(step))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SyncMode {
    Hard,
    /// Polyak averaging with weight `tau` on the online parameters.
    Soft(f64),
}

pub fn sync_target(phi: &[f64], phi_bar: &mut [f64], mode: SyncMode) -> Result<()> {
    if phi.len() != phi_bar.len() {
        return Err(Error::ParamLength {
            expected: phi_bar.len(),
            got: phi.len(),
        });
    }
    match mode {
        SyncMode::Hard => phi_bar.copy_from_slice(phi),
        SyncMode::Soft(tau) => {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::Invalid(format!("tau must lie in (0, 1], got {tau}")));
            }
            for (b, p) in phi_bar.iter_mut().zip(phi) {
                *b = tau * p + (1.0 - tau) * *b;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss,lr,grad_norm,wall_ms\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{:e},{}",
                r.epoch, r.step, r.loss, r.lr, r.grad_norm, r.wall_ms
            );
        }
        out
    }
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
