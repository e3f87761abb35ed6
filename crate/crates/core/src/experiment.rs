//! Runs one configured experiment for one seed: builds the environment,
//! dataset, value family, parameter set and operator, trains, and evaluates
//! every iterate.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    dqn, fqi, prodqn, profqi, DqnConfig, FitConfig, OnlineConfig, ProDqnConfig, ProFqiConfig,
};
use crate::config::{Algorithm, EnvId, ExperimentConfig, LossKind, PboVariant};
use crate::environments::{
    collect_dataset, linspace, start_state_grid, Bicycle, CarOnHill, ChainWalk, Dataset, Env,
    Environment, LqrEnv, Phase, Recipe, SimRng, StartDist,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    grid_weights, lqr_optimal_params, mean_return, param_l2_error, q_l2_error, value_iteration,
    weighted_grid_return,
};
use crate::operators::{iterate, FinitePbo, LqrPbo, ParameterizedPbo, PboArch};
use crate::qspace::{ActionEncoding, ParamVector, QFamily};
use crate::training::{LossConfig, SyncMode, TrainingLog};

/// Independent random streams of a run, so that e.g. the dataset does not
/// depend on the algorithm.
#[derive(Clone, Copy)]
enum Stream {
    Data = 1,
    ParamSet = 2,
    Init = 3,
    Train = 4,
    Eval = 5,
}

fn stream(seed: u64, s: Stream) -> SimRng {
    let mut rng = crate::environments::seeded(seed);
    rng.set_stream(s as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub k: usize,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub dataset_size: usize,
    pub interactions: usize,
    pub buffer_peak: usize,
    pub buffer_capacity: usize,
    pub fixed_point_skips: usize,
    pub final_epsilon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub seed: u64,
    /// Parameter sequence `omega_0, omega_1, ...` that was evaluated.
    pub snapshots: Vec<Vec<f64>>,
    pub metrics: Vec<MetricRow>,
    pub log: TrainingLog,
    pub stats: RunStats,
    /// Learned operator parameters, for operator-based algorithms.
    pub pbo_params: Option<Vec<f64>>,
}

impl RunOutput {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("k,metric,value\n");
        for m in &self.metrics {
            let _ = writeln!(out, "{},{},{:.16e}", m.k, m.metric, m.value);
        }
        out
    }

    pub fn snapshots_csv(&self) -> String {
        let p = self.snapshots.first().map_or(0, Vec::len);
        let mut out = String::from("k");
        for i in 0..p {
            let _ = write!(out, ",w_{i}");
        }
        out.push('\n');
        for (k, w) in self.snapshots.iter().enumerate() {
            let _ = write!(out, "{k}");
            for x in w {
                let _ = write!(out, ",{x:.16e}");
            }
            out.push('\n');
        }
        out
    }

    /// Value of `metric` at iteration `k`, if evaluated.
    pub fn metric_at(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.value)
    }
}

pub fn build_env(cfg: &ExperimentConfig) -> Env {
    match cfg.experiment.environment {
        EnvId::ChainWalk => Env::ChainWalk(ChainWalk::default()),
        EnvId::Lqr => Env::Lqr(LqrEnv::default()),
        EnvId::CarOnHill => Env::CarOnHill(CarOnHill::default()),
        EnvId::Bicycle => Env::Bicycle(Bicycle::default()),
    }
}

pub fn build_family(cfg: &ExperimentConfig, env: &Env) -> QFamily {
    match env {
        Env::ChainWalk(c) => QFamily::Tabular {
            n_states: c.n_states,
            n_actions: 2,
        },
        Env::Lqr(l) => QFamily::Quadratic {
            m: cfg.q.lqr_m,
            action_grid: l.actions.clone(),
        },
        Env::CarOnHill(_) => QFamily::Mlp {
            state_dim: 2,
            hidden: cfg.q.hidden.clone(),
            n_actions: 2,
            encoding: ActionEncoding::Input(vec![-1.0, 1.0]),
        },
        Env::Bicycle(b) => QFamily::Mlp {
            state_dim: 4,
            hidden: cfg.q.hidden.clone(),
            n_actions: b.n_actions(),
            encoding: ActionEncoding::Heads,
        },
    }
}

fn around_origin(dim: usize, spread: f64) -> StartDist {
    StartDist::Uniform {
        low: vec![-spread; dim],
        high: vec![spread; dim],
    }
}

pub fn dataset_recipe(cfg: &ExperimentConfig, env: &Env) -> Recipe {
    let n = cfg.data.samples;
    match env {
        Env::ChainWalk(c) => Recipe::Enumerate {
            n_states: c.n_states,
            repetitions: n / (2 * c.n_states).max(1),
        },
        Env::Lqr(_) => {
            let side = (n as f64).sqrt().round() as usize;
            let grid = linspace(-4.0, 4.0, side);
            Recipe::Mesh {
                states: grid.clone(),
                actions: grid,
            }
        }
        Env::CarOnHill(c) => {
            let uphill = n / 11 * 2;
            Recipe::Episodes {
                phases: vec![
                    Phase {
                        start: StartDist::Fixed(c.initial_state()),
                        samples: n - uphill,
                    },
                    Phase {
                        start: StartDist::Uniform {
                            low: vec![0.1, 0.38],
                            high: vec![0.5, 1.3],
                        },
                        samples: uphill,
                    },
                ],
                max_episode_steps: c.horizon,
            }
        }
        Env::Bicycle(_) => Recipe::Episodes {
            phases: vec![Phase {
                start: around_origin(4, cfg.online.start_spread),
                samples: n,
            }],
            max_episode_steps: cfg.online.max_episode_steps,
        },
    }
}

/// Offline dataset for `seed`, collected with a uniform policy. Identical
/// across algorithms.
pub fn build_dataset(cfg: &ExperimentConfig, env: &Env, seed: u64) -> Result<Dataset> {
    let recipe = dataset_recipe(cfg, env);
    let m = env.n_actions();
    let mut rng = stream(seed, Stream::Data);
    let mut uniform = |_: &[f64], r: &mut SimRng| r.random_range(0..m);
    collect_dataset(env, &recipe, cfg.data.samples, &mut uniform, &mut rng).map_err(|e| match e {
        Error::Budget { budget, detail } => Error::Config {
            field: "data.samples".into(),
            message: format!("{budget} does not fit the collection recipe ({detail})"),
        },
        other => other,
    })
}

pub fn build_param_set(
    cfg: &ExperimentConfig,
    family: &QFamily,
    seed: u64,
) -> Result<Vec<ParamVector>> {
    let mut rng = stream(seed, Stream::ParamSet);
    let mut w = family.sample_param_set(cfg.q.w_size, cfg.q.w_std, &mut rng)?;
    if cfg.q.zero_start {
        w[0].data.iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(w)
}

pub fn build_pbo(
    cfg: &ExperimentConfig,
    env: &Env,
    family: &QFamily,
    seed: u64,
) -> Result<ParameterizedPbo> {
    let arch = match (cfg.experiment.pbo, env) {
        (PboVariant::Linear, _) => PboArch::Linear,
        (PboVariant::Mlp, _) => PboArch::Mlp {
            hidden: cfg.pbo.hidden.clone(),
        },
        (PboVariant::StructuredFinite, Env::ChainWalk(c)) => PboArch::StructuredFinite {
            n_states: c.n_states,
            n_actions: 2,
            gamma: c.gamma,
        },
        (PboVariant::StructuredLqr, Env::Lqr(_)) => PboArch::StructuredLqr { m: cfg.q.lqr_m },
        (PboVariant::ClosedForm, Env::ChainWalk(c)) => {
            PboArch::ClosedFormFinite(FinitePbo::from_model(&c.model()))
        }
        (PboVariant::ClosedForm, Env::Lqr(l)) => {
            PboArch::ClosedFormLqr(LqrPbo::from_env(l, cfg.q.lqr_m))
        }
        (v, env) => {
            return Err(Error::Config {
                field: "experiment.pbo".into(),
                message: format!("{} is not available for {}", v.name(), env.id()),
            })
        }
    };
    let mut pbo = ParameterizedPbo::new(arch, family.n_params())?;
    pbo.init_random(cfg.pbo.init_std, &mut stream(seed, Stream::Init))?;
    Ok(pbo)
}

fn loss_config(cfg: &ExperimentConfig, env: &Env) -> LossConfig {
    LossConfig {
        k: cfg.experiment.k,
        use_fixed_point: cfg.experiment.loss == LossKind::Eq4,
        gamma: env.gamma(),
        batch_size_d: cfg.data.batch_size,
        batch_size_w: cfg.pbo.batch_w,
    }
}

fn sync_mode(cfg: &ExperimentConfig) -> SyncMode {
    if cfg.pbo.target_tau >= 1.0 {
        SyncMode::Hard
    } else {
        SyncMode::Soft(cfg.pbo.target_tau)
    }
}

fn online_config(cfg: &ExperimentConfig, env: &Env) -> OnlineConfig {
    let start = match env {
        Env::Bicycle(_) => around_origin(4, cfg.online.start_spread),
        other => StartDist::Fixed(other.initial_state()),
    };
    OnlineConfig {
        gamma: env.gamma(),
        max_episode_steps: cfg.online.max_episode_steps,
        start,
        initial_samples: cfg.online.initial_samples,
        buffer_capacity: cfg.online.buffer_capacity,
        batch_size_d: cfg.data.batch_size,
        steps_per_update: cfg.online.steps_per_update,
        epsilon_start: cfg.online.epsilon_start,
        epsilon_end: cfg.online.epsilon_end,
    }
}

/// Scores a parameter vector for the configured environment.
pub struct Evaluator {
    env: Env,
    family: QFamily,
    kind: EvalKind,
    rng: SimRng,
}

enum EvalKind {
    Chain {
        q_star: Vec<f64>,
        n_states: usize,
    },
    Lqr {
        omega_star: Vec<f64>,
    },
    Grid {
        grid: Vec<[f64; 2]>,
        weights: Vec<usize>,
        horizon: usize,
    },
    Rollouts {
        start: Vec<f64>,
        horizon: usize,
        simulations: usize,
    },
}

impl Evaluator {
    /// `dataset` provides the visitation weights of the car-on-hill grid;
    /// without it every grid state counts once.
    pub fn new(
        cfg: &ExperimentConfig,
        env: &Env,
        family: &QFamily,
        dataset: Option<&Dataset>,
        seed: u64,
    ) -> Result<Self> {
        let kind = match env {
            Env::ChainWalk(c) => EvalKind::Chain {
                q_star: value_iteration(&c.model(), 1e-10)?.params,
                n_states: c.n_states,
            },
            Env::Lqr(l) => EvalKind::Lqr {
                omega_star: lqr_optimal_params(l, cfg.q.lqr_m)?.params,
            },
            Env::CarOnHill(c) => {
                let grid = start_state_grid(cfg.eval.grid_resolution);
                let weights = match dataset {
                    Some(d) => grid_weights(d, &grid),
                    None => vec![1; grid.len()],
                };
                EvalKind::Grid {
                    grid,
                    weights,
                    horizon: c.horizon,
                }
            }
            Env::Bicycle(_) => EvalKind::Rollouts {
                start: env.initial_state(),
                horizon: cfg.eval.horizon,
                simulations: cfg.eval.simulations,
            },
        };
        Ok(Self {
            env: env.clone(),
            family: family.clone(),
            kind,
            rng: stream(seed, Stream::Eval),
        })
    }

    pub fn metric_name(&self) -> &'static str {
        match self.kind {
            EvalKind::Chain { .. } => "q_l2_error",
            EvalKind::Lqr { .. } => "param_l2_error",
            EvalKind::Grid { .. } => "weighted_return",
            EvalKind::Rollouts { .. } => "mean_return",
        }
    }

    pub fn score(&mut self, omega: &[f64]) -> Result<f64> {
        match &self.kind {
            EvalKind::Chain { q_star, n_states } => {
                q_l2_error(&self.family, omega, q_star, *n_states)
            }
            EvalKind::Lqr { omega_star } => param_l2_error(omega, omega_star),
            EvalKind::Grid {
                grid,
                weights,
                horizon,
            } => weighted_grid_return(
                &self.env,
                &self.family,
                omega,
                grid,
                weights,
                *horizon,
                &mut self.rng,
            ),
            EvalKind::Rollouts {
                start,
                horizon,
                simulations,
            } => mean_return(
                &self.env,
                &self.family,
                omega,
                start,
                *horizon,
                *simulations,
                &mut self.rng,
            ),
        }
    }

    pub fn score_all(&mut self, seq: &[Vec<f64>]) -> Result<Vec<MetricRow>> {
        let metric = self.metric_name();
        seq.iter()
            .enumerate()
            .map(|(k, w)| {
                Ok(MetricRow {
                    k,
                    metric,
                    value: self.score(w)?,
                })
            })
            .collect()
    }
}

/// Train and evaluate one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let env = build_env(cfg);
    let family = build_family(cfg, &env);
    let w = build_param_set(cfg, &family, seed)?;
    let omega0 = w[0].data.clone();
    let mut rng = stream(seed, Stream::Train);
    let k = cfg.experiment.k;
    let eval_k = cfg.eval.max_k.max(k);
    let mut stats = RunStats::default();
    let fit = FitConfig {
        fitting_steps: cfg.fqi.fitting_steps,
        patience: cfg.fqi.patience,
        start_lr: cfg.fqi.start_lr,
        end_lr: cfg.fqi.end_lr,
        batch_size: cfg.data.batch_size,
        tolerance: cfg.fqi.tolerance,
    };
    let algorithm = cfg.experiment.algorithm;
    let dataset = if algorithm.is_online() {
        None
    } else {
        let d = build_dataset(cfg, &env, seed)?;
        stats.dataset_size = d.len();
        Some(d)
    };
    let mut evaluator = Evaluator::new(cfg, &env, &family, dataset.as_ref(), seed)?;
    let (snapshots, eval_seq, log, pbo_params) = match algorithm {
        Algorithm::Fqi => {
            let mut log = TrainingLog::default();
            let d = dataset.as_ref().expect("offline");
            let seq = fqi(
                d,
                &family,
                k,
                &omega0,
                env.gamma(),
                &fit,
                &mut rng,
                &mut log,
            )?;
            (seq.clone(), seq, log, None)
        }
        Algorithm::Profqi => {
            let d = dataset.as_ref().expect("offline");
            let pbo = build_pbo(cfg, &env, &family, seed)?;
            let pcfg = ProFqiConfig {
                loss: loss_config(cfg, &env),
                epochs: cfg.pbo.epochs,
                training_steps: cfg.pbo.training_steps,
                start_lr: cfg.pbo.start_lr,
                end_lr: cfg.pbo.end_lr,
                sync: sync_mode(cfg),
            };
            let out = if pbo.params.is_empty() {
                // Nothing to learn for the closed forms.
                crate::algorithms::ProOutcome {
                    pbo,
                    log: TrainingLog::default(),
                    fixed_point_skips: 0,
                }
            } else {
                profqi(d, &w, &family, pbo, &pcfg, &mut rng)?
            };
            stats.fixed_point_skips = out.fixed_point_skips;
            let seq = iterate(&out.pbo, &omega0, eval_k)?;
            (
                seq.clone(),
                seq,
                out.log,
                Some(out.pbo.params.values().to_vec()),
            )
        }
        Algorithm::Dqn => {
            let dcfg = DqnConfig {
                online: online_config(cfg, &env),
                target_updates: k,
                fitting_steps: cfg.online.dqn_fitting_steps,
                start_lr: cfg.online.dqn_start_lr,
                end_lr: cfg.online.dqn_end_lr,
            };
            let out = dqn(&env, &family, &omega0, &dcfg, &mut rng)?;
            stats.interactions = out.interactions;
            stats.buffer_peak = out.buffer_peak;
            stats.buffer_capacity = out.buffer_capacity;
            stats.final_epsilon = Some(out.final_epsilon);
            (out.snapshots.clone(), out.snapshots, out.log, None)
        }
        Algorithm::Prodqn => {
            let pbo = build_pbo(cfg, &env, &family, seed)?;
            let pcfg = ProDqnConfig {
                online: online_config(cfg, &env),
                loss: loss_config(cfg, &env),
                epochs: cfg.pbo.epochs,
                training_steps: cfg.pbo.training_steps,
                start_lr: cfg.pbo.start_lr,
                end_lr: cfg.pbo.end_lr,
                sync: sync_mode(cfg),
            };
            let out = prodqn(&env, &w, &family, pbo, &pcfg, &mut rng)?;
            stats.interactions = out.interactions;
            stats.buffer_peak = out.buffer_peak;
            stats.buffer_capacity = out.buffer_capacity;
            stats.final_epsilon = Some(out.final_epsilon);
            let pbo = out.pbo.expect("prodqn returns its operator");
            let seq = iterate(&pbo, &omega0, eval_k)?;
            (
                out.snapshots,
                seq,
                out.log,
                Some(pbo.params.values().to_vec()),
            )
        }
    };
    let metrics = evaluator.score_all(&eval_seq)?;
    Ok(RunOutput {
        seed,
        snapshots,
        metrics,
        log,
        stats,
        pbo_params,
    })
}

/// Apply `f` to every item on at most `threads` worker threads, keeping the
/// input order in the output.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    fn chain_cfg(extra: &str) -> ExperimentConfig {
        let text = format!("[experiment]\nenvironment = \"chain_walk\"\n{extra}");
        ExperimentConfig::parse(&text, Some(Preset::Quick)).unwrap()
    }

    #[test]
    fn fqi_and_profqi_share_the_dataset() {
        let a = chain_cfg("algorithm = \"fqi\"\n");
        let b = chain_cfg("algorithm = \"profqi\"\n");
        let env = build_env(&a);
        assert_eq!(
            build_dataset(&a, &env, 3).unwrap(),
            build_dataset(&b, &env, 3).unwrap()
        );
    }

    #[test]
    fn recipe_sizes_match_defaults() {
        for env in [EnvId::ChainWalk, EnvId::Lqr, EnvId::CarOnHill] {
            let cfg = ExperimentConfig::defaults(env, Preset::Paper);
            let e = build_env(&cfg);
            let d = build_dataset(&cfg, &e, 0).unwrap();
            assert_eq!(d.len(), cfg.data.samples);
        }
    }

    #[test]
    fn mismatched_sample_count_is_a_config_error() {
        let cfg = chain_cfg("[data]\nsamples = 401\n");
        let env = build_env(&cfg);
        assert!(matches!(
            build_dataset(&cfg, &env, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn fqi_run_has_k_plus_one_metrics_and_is_reproducible() {
        let cfg = chain_cfg("algorithm = \"fqi\"\nk = 3\n");
        let a = run_seed(&cfg, 1).unwrap();
        assert_eq!(a.snapshots.len(), 4);
        assert_eq!(a.metrics.len(), 4);
        let b = run_seed(&cfg, 1).unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(a.snapshots_csv(), b.snapshots_csv());
    }

    #[test]
    fn closed_form_profqi_converges_without_training() {
        let cfg = chain_cfg("pbo = \"closed_form\"\n");
        let out = run_seed(&cfg, 0).unwrap();
        assert_eq!(out.metrics.len(), cfg.eval.max_k + 1);
        assert!(out.log.rows.is_empty());
        let first = out.metrics[0].value;
        let last = out.metrics.last().unwrap().value;
        assert!(last < 0.2 * first, "{first} -> {last}");
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..17).collect();
        assert_eq!(
            parallel_map(&items, 4, |x| x * x),
            items.iter().map(|x| x * x).collect::<Vec<_>>()
        );
        assert!(parallel_map(&[] as &[u64], 3, |x| *x).is_empty());
    }
}
