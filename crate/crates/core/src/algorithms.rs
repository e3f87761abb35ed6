//! FQI, ProFQI, DQN and ProDQN.

use std::collections::VecDeque;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Matrix, Tape};
use crate::environments::{Batch, Dataset, Env, Environment, SimRng, StartDist, Transition};
use crate::error::{Error, Result};
use crate::operators::{iterate, ParameterizedPbo};
use crate::qspace::{stack_params, ParamVector, QFamily};
use crate::training::{
    adam_step, l2_norm, pbo_loss_cached, sync_target, Adam, LogRow, LossConfig, Schedule, SyncMode,
    TrainingLog,
};

/// Indices of a uniform minibatch: without replacement, or everything when
/// the request covers the whole set.
pub fn sample_indices(rng: &mut SimRng, n: usize, size: usize) -> Vec<usize> {
    if size >= n {
        return (0..n).collect();
    }
    index::sample(rng, n, size).into_vec()
}

/// `r + gamma (1 - terminal) max_a' Q_omega(s', a')` for every transition of
/// the batch, over the family's discrete action set.
pub fn bellman_targets(
    family: &QFamily,
    omega: &[f64],
    batch: &Batch,
    gamma: f64,
) -> Result<Vec<f64>> {
    let q = family.q_table(omega, &batch.next_states)?;
    Ok((0..batch.len())
        .map(|i| {
            if batch.terminal[i] {
                batch.rewards[i]
            } else {
                let best = q.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                batch.rewards[i] + gamma * best
            }
        })
        .collect())
}

/// Mean squared regression error of `Q_omega(s, a)` onto fixed targets.
pub fn regression_loss(
    family: &QFamily,
    omega: &[f64],
    batch: &Batch,
    targets: &[f64],
) -> Result<f64> {
    let q = family.q_sa(omega, &batch.states, &batch.actions, &batch.action_values)?;
    let n = batch.len();
    Ok((0..n).map(|i| (targets[i] - q[i]).powi(2)).sum::<f64>() / n as f64)
}

/// Loss and gradient of [`regression_loss`] with respect to `omega`.
pub fn regression_grad(
    family: &QFamily,
    omega: &[f64],
    batch: &Batch,
    targets: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let w = tape.param(stack_params(&[omega]));
    let sa = family.bind_sa(
        &mut tape,
        &batch.states,
        &batch.actions,
        &batch.action_values,
    )?;
    let pred = family.tape_q_sa(&mut tape, w, &sa)?;
    let y = tape.input(Array2::from_shape_vec((1, targets.len()), targets.to_vec()).expect("row"));
    let diff = tape.sub(y, pred)?;
    let sq = tape.square(diff)?;
    let loss = tape.mean(sq)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("regression loss {value}")));
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads.wrt(w).iter().copied().collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub fitting_steps: usize,
    pub patience: usize,
    pub start_lr: f64,
    pub end_lr: f64,
    pub batch_size: usize,
    /// Minimum full-dataset loss improvement that resets patience.
    pub tolerance: f64,
}

/// Regress `Q_omega` onto `targets` with a fresh Adam, early-stopping on the
/// full-dataset loss. Returns the best parameters seen.
fn fit(
    family: &QFamily,
    start: &[f64],
    data: &Batch,
    targets: &[f64],
    cfg: &FitConfig,
    rng: &mut SimRng,
    log: &mut TrainingLog,
    epoch: usize,
) -> Result<Vec<f64>> {
    let mut omega = start.to_vec();
    let mut best = omega.clone();
    let mut best_loss = regression_loss(family, &omega, data, targets)?;
    let mut stale = 0;
    let mut adam = Adam::new(omega.len());
    let schedule = Schedule {
        start_lr: cfg.start_lr,
        end_lr: cfg.end_lr,
        total_steps: cfg.fitting_steps,
    };
    let clock = Instant::now();
    for step in 0..cfg.fitting_steps {
        let idx = sample_indices(rng, data.len(), cfg.batch_size);
        let mb = sub_batch(data, &idx);
        let mb_targets: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
        let (loss, grad) = regression_grad(family, &omega, &mb, &mb_targets)?;
        adam_step(&mut omega, &grad, &mut adam, &schedule, step)?;
        log.rows.push(LogRow {
            epoch,
            step,
            loss,
            lr: schedule.lr(step),
            grad_norm: l2_norm(&grad),
            wall_ms: clock.elapsed().as_millis(),
        });
        let full = regression_loss(family, &omega, data, targets)?;
        if !full.is_finite() {
            return Err(Error::Divergence {
                step: epoch,
                detail: format!("fit loss {full} at step {step}"),
            });
        }
        if full < best_loss - cfg.tolerance {
            best_loss = full;
            best.clone_from(&omega);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(best)
}

fn sub_batch(data: &Batch, idx: &[usize]) -> Batch {
    let d = data.states.ncols();
    Batch {
        states: Array2::from_shape_fn((idx.len(), d), |(i, j)| data.states[[idx[i], j]]),
        actions: idx.iter().map(|&i| data.actions[i]).collect(),
        action_values: idx.iter().map(|&i| data.action_values[i]).collect(),
        rewards: idx.iter().map(|&i| data.rewards[i]).collect(),
        next_states: Array2::from_shape_fn((idx.len(), d), |(i, j)| data.next_states[[idx[i], j]]),
        terminal: idx.iter().map(|&i| data.terminal[i]).collect(),
    }
}

/// Fitted Q-iteration: `[omega_0, ..., omega_K]`, each iterate regressed on
/// the empirical Bellman targets of the previous one.
pub fn fqi(
    dataset: &Dataset,
    family: &QFamily,
    iterations: usize,
    omega0: &[f64],
    gamma: f64,
    cfg: &FitConfig,
    rng: &mut SimRng,
    log: &mut TrainingLog,
) -> Result<Vec<Vec<f64>>> {
    family.check(omega0)?;
    if iterations > 0 && dataset.is_empty() {
        return Err(Error::Invalid("fqi needs a non-empty dataset".into()));
    }
    let data = dataset.full_batch();
    let mut seq = vec![omega0.to_vec()];
    for k in 1..=iterations {
        let prev = seq.last().expect("non-empty");
        let targets = bellman_targets(family, prev, &data, gamma)?;
        let next = fit(family, prev, &data, &targets, cfg, rng, log, k)?;
        seq.push(next);
    }
    Ok(seq)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProFqiConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub training_steps: usize,
    pub start_lr: f64,
    pub end_lr: f64,
    pub sync: SyncMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProOutcome {
    pub pbo: ParameterizedPbo,
    pub log: TrainingLog,
    /// Steps where the fixed-point term was requested but the operator was
    /// not contractive, so only the unrolled loss was used.
    pub fixed_point_skips: usize,
}

/// Cycles through a shuffled copy of the parameter set, reshuffling each
/// epoch.
struct WSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl WSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: 0,
        }
    }

    fn start_epoch(&mut self, rng: &mut SimRng) {
        self.order.shuffle(rng);
        self.cursor = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        if size >= n {
            return (0..n).collect();
        }
        (0..size)
            .map(|_| {
                let i = self.order[self.cursor % n];
                self.cursor += 1;
                i
            })
            .collect()
    }
}

fn param_matrix(w: &[ParamVector]) -> Matrix {
    let rows: Vec<&[f64]> = w.iter().map(|p| p.data.as_slice()).collect();
    stack_params(&rows)
}

/// Target iterates `L_target^j(w)`, `j = 0..k`, of the whole parameter set.
/// Recomputed after every target sync.
struct TargetCache {
    levels: Vec<Matrix>,
}

impl TargetCache {
    fn new(
        pbo: &ParameterizedPbo,
        target: &crate::autodiff::DiffParams,
        all: &Matrix,
        k: usize,
    ) -> Result<Self> {
        let mut frozen = pbo.clone();
        frozen.params = target.clone();
        Ok(Self {
            levels: frozen.iterate_rows(all, k.saturating_sub(1))?,
        })
    }

    /// Parameter rows `idx` and their target iterates `j = 1..k`.
    fn select(&self, idx: &[usize]) -> (Matrix, Vec<Matrix>) {
        let mut rows = self.levels.iter().map(|m| m.select(Axis(0), idx));
        let omegas = rows.next().expect("level 0");
        (omegas, rows.collect())
    }
}

/// One optimizer step of the operator loss, falling back to the unrolled loss
/// alone when the fixed-point term cannot be formed.
fn pbo_step(
    pbo: &mut ParameterizedPbo,
    target: &crate::autodiff::DiffParams,
    family: &QFamily,
    batch: &Batch,
    (omegas, chain): (&Matrix, &[Matrix]),
    cfg: &LossConfig,
    adam: &mut Adam,
    schedule: &Schedule,
    step: usize,
    skips: &mut usize,
) -> Result<(f64, f64)> {
    let out = match pbo_loss_cached(pbo, target, family, batch, omegas, Some(chain), cfg) {
        Err(Error::NonContractive { .. }) if cfg.use_fixed_point => {
            *skips += 1;
            let plain = LossConfig {
                use_fixed_point: false,
                ..cfg.clone()
            };
            pbo_loss_cached(pbo, target, family, batch, omegas, Some(chain), &plain)?
        }
        other => other?,
    };
    adam_step(pbo.params.values_mut(), &out.grad, adam, schedule, step)?;
    if pbo.params.values().iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence {
            step,
            detail: "operator parameters became non-finite".into(),
        });
    }
    Ok((out.loss, l2_norm(&out.grad)))
}

/// Offline operator learning: epochs of Adam on the unrolled loss over
/// minibatches of the dataset and the parameter set, with the target
/// operator synced at the top of every epoch.
pub fn profqi(
    dataset: &Dataset,
    w: &[ParamVector],
    family: &QFamily,
    pbo: ParameterizedPbo,
    cfg: &ProFqiConfig,
    rng: &mut SimRng,
) -> Result<ProOutcome> {
    cfg.loss.validate(&pbo)?;
    if dataset.is_empty() || w.is_empty() {
        return Err(Error::Invalid("profqi needs samples and parameters".into()));
    }
    let data = dataset.full_batch();
    let mut pbo = pbo;
    let mut target = pbo.params.clone();
    let mut adam = Adam::new(pbo.params.len());
    let schedule = Schedule {
        start_lr: cfg.start_lr,
        end_lr: cfg.end_lr,
        total_steps: cfg.epochs * cfg.training_steps,
    };
    let mut sampler = WSampler::new(w.len());
    let mut log = TrainingLog::default();
    let mut skips = 0;
    let clock = Instant::now();
    let mut step = 0;
    let all = param_matrix(w);
    for epoch in 0..cfg.epochs {
        sync_target(pbo.params.values(), target.values_mut(), cfg.sync)?;
        let cache = TargetCache::new(&pbo, &target, &all, cfg.loss.k)?;
        sampler.start_epoch(rng);
        for _ in 0..cfg.training_steps {
            let idx = sample_indices(rng, data.len(), cfg.loss.batch_size_d);
            let mb = sub_batch(&data, &idx);
            let (omegas, chain) = cache.select(&sampler.next(cfg.loss.batch_size_w));
            let (loss, grad_norm) = pbo_step(
                &mut pbo,
                &target,
                family,
                &mb,
                (&omegas, &chain),
                &cfg.loss,
                &mut adam,
                &schedule,
                step,
                &mut skips,
            )?;
            log.rows.push(LogRow {
                epoch,
                step,
                loss,
                lr: schedule.lr(step),
                grad_norm,
                wall_ms: clock.elapsed().as_millis(),
            });
            step += 1;
        }
    }
    Ok(ProOutcome {
        pbo,
        log,
        fixed_point_skips: skips,
    })
}

/// FIFO replay memory with a hard capacity.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    peak: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Invalid("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
            peak: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.peak = self.peak.max(self.items.len());
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Largest size ever reached.
    pub fn peak(&self) -> usize {
        self.peak
    }

    /// Exactly `size` transitions drawn uniformly; without replacement when
    /// the buffer is large enough.
    pub fn sample(
        &self,
        size: usize,
        action_values: &[f64],
        state_dim: usize,
        rng: &mut SimRng,
    ) -> Result<Batch> {
        if self.items.is_empty() {
            return Err(Error::Invalid(
                "sampling from an empty replay buffer".into(),
            ));
        }
        let idx: Vec<usize> = if size <= self.items.len() {
            index::sample(rng, self.items.len(), size).into_vec()
        } else {
            (0..size)
                .map(|_| rng.random_range(0..self.items.len()))
                .collect()
        };
        Ok(Batch::new(
            idx.iter().map(|&i| &self.items[i]),
            action_values,
            state_dim,
        ))
    }
}

/// Linear decay of the exploration rate over `total_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplorationSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl ExplorationSchedule {
    pub fn epsilon(&self, step: usize) -> f64 {
        Schedule {
            start_lr: self.start,
            end_lr: self.end,
            total_steps: self.total_steps,
        }
        .lr(step)
    }
}

/// Uniform action with probability `epsilon`, greedy otherwise.
pub fn epsilon_greedy(
    family: &QFamily,
    omega: &[f64],
    state: &[f64],
    epsilon: f64,
    rng: &mut SimRng,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Invalid(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let m = family.n_actions();
    if rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..m));
    }
    family.greedy_action(omega, state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineConfig {
    pub gamma: f64,
    /// Episodes are cut after this many steps.
    pub max_episode_steps: usize,
    pub start: StartDist,
    /// Samples collected with a uniform policy before learning starts.
    pub initial_samples: usize,
    pub buffer_capacity: usize,
    pub batch_size_d: usize,
    /// Gradient steps per environment step.
    pub steps_per_update: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
}

/// Environment interaction state for the online agents.
struct Collector<'a> {
    env: &'a Env,
    cfg: &'a OnlineConfig,
    buffer: ReplayBuffer,
    state: Vec<f64>,
    episode_steps: usize,
    interactions: usize,
}

impl<'a> Collector<'a> {
    fn new(env: &'a Env, cfg: &'a OnlineConfig, rng: &mut SimRng) -> Result<Self> {
        let mut c = Self {
            env,
            cfg,
            buffer: ReplayBuffer::new(cfg.buffer_capacity)?,
            state: Vec::new(),
            episode_steps: 0,
            interactions: 0,
        };
        c.reset(rng);
        Ok(c)
    }

    fn reset(&mut self, rng: &mut SimRng) {
        self.state = match &self.cfg.start {
            StartDist::Fixed(s) => s.clone(),
            StartDist::Uniform { low, high } => low
                .iter()
                .zip(high)
                .map(|(&l, &h)| if h > l { rng.random_range(l..h) } else { l })
                .collect(),
        };
        self.episode_steps = 0;
    }

    fn step(&mut self, action: usize, rng: &mut SimRng) -> Result<()> {
        let step = self.env.step(&self.state, action, rng)?;
        self.interactions += 1;
        self.buffer.push(Transition {
            state: self.state.clone(),
            action,
            reward: step.reward,
            next_state: step.next_state.clone(),
            terminal: step.terminal,
        });
        self.episode_steps += 1;
        if step.terminal || self.episode_steps >= self.cfg.max_episode_steps {
            self.reset(rng);
        } else {
            self.state = step.next_state;
        }
        Ok(())
    }

    fn fill_uniform(&mut self, rng: &mut SimRng) -> Result<()> {
        let m = self.env.n_actions();
        for _ in 0..self.cfg.initial_samples {
            let a = rng.random_range(0..m);
            self.step(a, rng)?;
        }
        Ok(())
    }

    fn action_values(&self) -> Vec<f64> {
        (0..self.env.n_actions())
            .map(|a| self.env.action_value(a))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DqnConfig {
    pub online: OnlineConfig,
    /// Number of target updates `K`.
    pub target_updates: usize,
    /// Gradient steps between target updates.
    pub fitting_steps: usize,
    pub start_lr: f64,
    pub end_lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineOutcome {
    /// `omega_0 ... omega_K`.
    pub snapshots: Vec<Vec<f64>>,
    pub log: TrainingLog,
    pub buffer_peak: usize,
    pub buffer_capacity: usize,
    pub interactions: usize,
    pub final_epsilon: f64,
    pub pbo: Option<ParameterizedPbo>,
}

/// Deep Q-network with a hard target sync every `fitting_steps` gradient
/// steps; a snapshot is taken at each sync.
pub fn dqn(
    env: &Env,
    family: &QFamily,
    omega0: &[f64],
    cfg: &DqnConfig,
    rng: &mut SimRng,
) -> Result<OnlineOutcome> {
    family.check(omega0)?;
    let on = &cfg.online;
    let total = cfg.target_updates * cfg.fitting_steps;
    let schedule = Schedule {
        start_lr: cfg.start_lr,
        end_lr: cfg.end_lr,
        total_steps: total,
    };
    let explore = ExplorationSchedule {
        start: on.epsilon_start,
        end: on.epsilon_end,
        total_steps: total.div_ceil(on.steps_per_update.max(1)),
    };
    let mut collector = Collector::new(env, on, rng)?;
    collector.fill_uniform(rng)?;
    let action_values = collector.action_values();
    let mut omega = omega0.to_vec();
    let mut target = omega.clone();
    let mut snapshots = vec![omega.clone()];
    let mut adam = Adam::new(omega.len());
    let mut log = TrainingLog::default();
    let clock = Instant::now();
    let mut env_steps = 0;
    let mut epsilon = on.epsilon_start;
    for step in 0..total {
        if step % on.steps_per_update.max(1) == 0 {
            epsilon = explore.epsilon(env_steps);
            let a = epsilon_greedy(family, &omega, &collector.state.clone(), epsilon, rng)?;
            collector.step(a, rng)?;
            env_steps += 1;
        }
        let batch =
            collector
                .buffer
                .sample(on.batch_size_d, &action_values, env.state_dim(), rng)?;
        let targets = bellman_targets(family, &target, &batch, on.gamma)?;
        let (loss, grad) = regression_grad(family, &omega, &batch, &targets)?;
        adam_step(&mut omega, &grad, &mut adam, &schedule, step)?;
        if omega.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "q-network parameters became non-finite".into(),
            });
        }
        log.rows.push(LogRow {
            epoch: step / cfg.fitting_steps.max(1),
            step,
            loss,
            lr: schedule.lr(step),
            grad_norm: l2_norm(&grad),
            wall_ms: clock.elapsed().as_millis(),
        });
        if (step + 1) % cfg.fitting_steps == 0 {
            target.clone_from(&omega);
            snapshots.push(omega.clone());
        }
    }
    Ok(OnlineOutcome {
        snapshots,
        log,
        buffer_peak: collector.buffer.peak(),
        buffer_capacity: collector.buffer.capacity(),
        interactions: collector.interactions,
        final_epsilon: epsilon,
        pbo: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProDqnConfig {
    pub online: OnlineConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub training_steps: usize,
    pub start_lr: f64,
    pub end_lr: f64,
    pub sync: SyncMode,
}

/// Online operator learning. The agent acts epsilon-greedily on
/// `Q_{L^K_phi(omega_0)}` with `omega_0 = w[0]`, interleaving environment
/// steps with operator updates.
pub fn prodqn(
    env: &Env,
    w: &[ParamVector],
    family: &QFamily,
    pbo: ParameterizedPbo,
    cfg: &ProDqnConfig,
    rng: &mut SimRng,
) -> Result<OnlineOutcome> {
    cfg.loss.validate(&pbo)?;
    if w.is_empty() {
        return Err(Error::Invalid("prodqn needs a parameter set".into()));
    }
    let on = &cfg.online;
    let k = cfg.loss.k;
    let omega0 = w[0].data.clone();
    let total = cfg.epochs * cfg.training_steps;
    let schedule = Schedule {
        start_lr: cfg.start_lr,
        end_lr: cfg.end_lr,
        total_steps: total,
    };
    let explore = ExplorationSchedule {
        start: on.epsilon_start,
        end: on.epsilon_end,
        total_steps: total.div_ceil(on.steps_per_update.max(1)),
    };
    let mut collector = Collector::new(env, on, rng)?;
    collector.fill_uniform(rng)?;
    let action_values = collector.action_values();
    let mut pbo = pbo;
    let mut target = pbo.params.clone();
    let mut adam = Adam::new(pbo.params.len());
    let mut sampler = WSampler::new(w.len());
    let mut log = TrainingLog::default();
    let mut skips = 0;
    let clock = Instant::now();
    let mut acting: Option<Vec<f64>> = None;
    let mut env_steps = 0;
    let mut epsilon = on.epsilon_start;
    let mut step = 0;
    let all = param_matrix(w);
    for epoch in 0..cfg.epochs {
        sync_target(pbo.params.values(), target.values_mut(), cfg.sync)?;
        let cache = TargetCache::new(&pbo, &target, &all, k)?;
        sampler.start_epoch(rng);
        for _ in 0..cfg.training_steps {
            if step % on.steps_per_update.max(1) == 0 {
                epsilon = explore.epsilon(env_steps);
                let state = collector.state.clone();
                if acting.is_none() {
                    acting = Some(acting_params(&pbo, &omega0, k)?);
                }
                let params = acting.as_deref().expect("just computed");
                let a = epsilon_greedy(family, params, &state, epsilon, rng)?;
                collector.step(a, rng)?;
                env_steps += 1;
            }
            let batch = collector.buffer.sample(
                cfg.loss.batch_size_d,
                &action_values,
                env.state_dim(),
                rng,
            )?;
            let (omegas, chain) = cache.select(&sampler.next(cfg.loss.batch_size_w));
            let (loss, grad_norm) = pbo_step(
                &mut pbo,
                &target,
                family,
                &batch,
                (&omegas, &chain),
                &cfg.loss,
                &mut adam,
                &schedule,
                step,
                &mut skips,
            )?;
            // The operator moved; act with fresh parameters next time.
            acting = None;
            log.rows.push(LogRow {
                epoch,
                step,
                loss,
                lr: schedule.lr(step),
                grad_norm,
                wall_ms: clock.elapsed().as_millis(),
            });
            step += 1;
        }
    }
    let snapshots = iterate(&pbo, &omega0, k)?;
    Ok(OnlineOutcome {
        snapshots,
        log,
        buffer_peak: collector.buffer.peak(),
        buffer_capacity: collector.buffer.capacity(),
        interactions: collector.interactions,
        final_epsilon: epsilon,
        pbo: Some(pbo),
    })
}

/// `L^K_phi(omega_0)`, the parameters the online agent acts with.
pub fn acting_params(pbo: &ParameterizedPbo, omega0: &[f64], k: usize) -> Result<Vec<f64>> {
    let start = Array2::from_shape_vec((1, omega0.len()), omega0.to_vec())
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let last = pbo.iterate_rows(&start, k)?.pop().expect("k + 1 iterates");
    Ok(last.into_raw_vec_and_offset().0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{collect_dataset, seeded, ChainWalk, Recipe};
    use crate::operators::PboArch;
    use crate::qspace::ActionEncoding;

    #[test]
    fn fqi_geometric_series() {
        // One state, one action, reward 1, gamma 0.5: Q_k -> 2.
        let ds = Dataset {
            state_dim: 1,
            action_values: vec![0.0],
            transitions: vec![Transition {
                state: vec![0.0],
                action: 0,
                reward: 1.0,
                next_state: vec![0.0],
                terminal: false,
            }],
        };
        let family = QFamily::Tabular {
            n_states: 1,
            n_actions: 1,
        };
        let cfg = FitConfig {
            fitting_steps: 2000,
            patience: 2000,
            start_lr: 0.05,
            end_lr: 1e-4,
            batch_size: 1,
            tolerance: 0.0,
        };
        let mut log = TrainingLog::default();
        let seq = fqi(&ds, &family, 8, &[0.0], 0.5, &cfg, &mut seeded(0), &mut log).unwrap();
        assert_eq!(seq.len(), 9);
        let q = seq[8][0];
        assert!((q - 2.0).abs() <= 0.5f64.powi(8) * 2.0 + 1e-2, "{q}");
        let zero = fqi(&ds, &family, 0, &[0.3], 0.5, &cfg, &mut seeded(0), &mut log).unwrap();
        assert_eq!(zero, vec![vec![0.3]]);
    }

    #[test]
    fn profqi_with_exact_operator_is_a_no_op() {
        let env = Env::ChainWalk(ChainWalk::default());
        let chain = ChainWalk::default();
        let ds = collect_dataset(
            &env,
            &Recipe::Enumerate {
                n_states: 20,
                repetitions: 1,
            },
            40,
            &mut |_, _| 0,
            &mut seeded(0),
        )
        .unwrap();
        let family = QFamily::Tabular {
            n_states: 20,
            n_actions: 2,
        };
        let w = family.sample_param_set(4, 0.1, &mut seeded(1)).unwrap();
        let pbo = ParameterizedPbo::new(
            PboArch::ClosedFormFinite(crate::operators::FinitePbo::from_model(&chain.model())),
            40,
        )
        .unwrap();
        let cfg = ProFqiConfig {
            loss: LossConfig {
                k: 2,
                use_fixed_point: false,
                gamma: 0.9,
                batch_size_d: 10,
                batch_size_w: 4,
            },
            epochs: 2,
            training_steps: 3,
            start_lr: 1e-2,
            end_lr: 1e-3,
            sync: SyncMode::Hard,
        };
        let out = profqi(&ds, &w, &family, pbo.clone(), &cfg, &mut seeded(2)).unwrap();
        assert_eq!(out.pbo, pbo);
        assert_eq!(out.log.rows.len(), 6);
    }

    #[test]
    fn replay_respects_capacity() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..10 {
            buf.push(Transition {
                state: vec![i as f64],
                action: 0,
                reward: 0.0,
                next_state: vec![0.0],
                terminal: false,
            });
            assert!(buf.len() <= 3);
        }
        assert_eq!(buf.peak(), 3);
        let b = buf.sample(5, &[0.0], 1, &mut seeded(0)).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b.states.iter().all(|&s| s >= 7.0));
    }

    #[test]
    fn exploration_schedule_is_monotone() {
        let s = ExplorationSchedule {
            start: 1.0,
            end: 0.01,
            total_steps: 100,
        };
        let eps: Vec<f64> = (0..150).map(|t| s.epsilon(t)).collect();
        assert!(eps.windows(2).all(|w| w[1] <= w[0]));
        assert!(eps.iter().all(|e| (0.01..=1.0).contains(e)));
        assert_eq!(s.epsilon(99), 0.01);
    }

    #[test]
    fn epsilon_greedy_extremes() {
        let family = QFamily::Tabular {
            n_states: 1,
            n_actions: 4,
        };
        let omega = [0.0, 3.0, 3.0, 1.0];
        let mut rng = seeded(0);
        for _ in 0..100 {
            assert_eq!(
                epsilon_greedy(&family, &omega, &[0.0], 0.0, &mut rng).unwrap(),
                1
            );
        }
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            counts[epsilon_greedy(&family, &omega, &[0.0], 1.0, &mut rng).unwrap()] += 1;
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 3 degrees of freedom, p = 0.01
        assert!(chi2 < 11.345, "{chi2}");
        let single = QFamily::Tabular {
            n_states: 1,
            n_actions: 1,
        };
        assert_eq!(
            epsilon_greedy(&single, &[5.0], &[0.0], 1.0, &mut rng).unwrap(),
            0
        );
    }

    fn tiny_online(env: &Env) -> OnlineConfig {
        OnlineConfig {
            gamma: 0.99,
            max_episode_steps: 20,
            start: StartDist::Fixed(env.initial_state()),
            initial_samples: 50,
            buffer_capacity: 60,
            batch_size_d: 16,
            steps_per_update: 2,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
        }
    }

    #[test]
    fn dqn_snapshots_and_buffer() {
        let env = Env::Bicycle(crate::environments::Bicycle::default());
        let family = QFamily::Mlp {
            state_dim: 4,
            hidden: vec![8],
            n_actions: 5,
            encoding: ActionEncoding::Heads,
        };
        let omega0 = family
            .sample_param_set(1, 0.01, &mut seeded(0))
            .unwrap()
            .remove(0)
            .data;
        let cfg = DqnConfig {
            online: tiny_online(&env),
            target_updates: 3,
            fitting_steps: 10,
            start_lr: 1e-3,
            end_lr: 1e-4,
        };
        let out = dqn(&env, &family, &omega0, &cfg, &mut seeded(1)).unwrap();
        assert_eq!(out.snapshots.len(), 4);
        assert!(out.buffer_peak <= 60);
        assert_eq!(out.final_epsilon, 0.01);
        assert_eq!(out.interactions, 50 + 15);
        let again = dqn(&env, &family, &omega0, &cfg, &mut seeded(1)).unwrap();
        assert_eq!(again.snapshots, out.snapshots);
    }

    #[test]
    fn prodqn_acts_with_iterated_parameters() {
        let env = Env::Bicycle(crate::environments::Bicycle::default());
        let family = QFamily::Mlp {
            state_dim: 4,
            hidden: vec![4],
            n_actions: 5,
            encoding: ActionEncoding::Heads,
        };
        let w = family.sample_param_set(3, 0.01, &mut seeded(0)).unwrap();
        let mut pbo =
            ParameterizedPbo::new(PboArch::Mlp { hidden: vec![6] }, family.n_params()).unwrap();
        pbo.init_random(1e-3, &mut seeded(5)).unwrap();
        let cfg = ProDqnConfig {
            online: tiny_online(&env),
            loss: LossConfig {
                k: 3,
                use_fixed_point: false,
                gamma: 0.99,
                batch_size_d: 16,
                batch_size_w: 2,
            },
            epochs: 3,
            training_steps: 4,
            start_lr: 1e-3,
            end_lr: 1e-4,
            sync: SyncMode::Hard,
        };
        let out = prodqn(&env, &w, &family, pbo, &cfg, &mut seeded(2)).unwrap();
        assert_eq!(out.snapshots.len(), 4);
        let trained = out.pbo.unwrap();
        assert_eq!(
            acting_params(&trained, &w[0].data, 3).unwrap(),
            iterate(&trained, &w[0].data, 3).unwrap()[3]
        );
        assert!(out.buffer_peak <= 60);
    }
}
