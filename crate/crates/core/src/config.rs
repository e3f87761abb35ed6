//! Experiment configuration: a sectioned TOML document whose unset fields
//! take per-environment defaults.
//!
//! A preset only changes the defaults. Explicit values are kept verbatim, so a
//! resolved configuration serializes to a document that parses back to the
//! same configuration under either preset.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    ChainWalk,
    Lqr,
    CarOnHill,
    Bicycle,
}

impl EnvId {
    pub fn name(self) -> &'static str {
        match self {
            EnvId::ChainWalk => "chain_walk",
            EnvId::Lqr => "lqr",
            EnvId::CarOnHill => "car_on_hill",
            EnvId::Bicycle => "bicycle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            EnvId::ChainWalk,
            EnvId::Lqr,
            EnvId::CarOnHill,
            EnvId::Bicycle,
        ]
        .into_iter()
        .find(|e| e.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fqi,
    Profqi,
    Dqn,
    Prodqn,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fqi => "fqi",
            Algorithm::Profqi => "profqi",
            Algorithm::Dqn => "dqn",
            Algorithm::Prodqn => "prodqn",
        }
    }

    pub fn uses_pbo(self) -> bool {
        matches!(self, Algorithm::Profqi | Algorithm::Prodqn)
    }

    pub fn is_online(self) -> bool {
        matches!(self, Algorithm::Dqn | Algorithm::Prodqn)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PboVariant {
    Linear,
    Mlp,
    StructuredFinite,
    StructuredLqr,
    ClosedForm,
}

impl PboVariant {
    pub fn name(self) -> &'static str {
        match self {
            PboVariant::Linear => "linear",
            PboVariant::Mlp => "mlp",
            PboVariant::StructuredFinite => "structured_finite",
            PboVariant::StructuredLqr => "structured_lqr",
            PboVariant::ClosedForm => "closed_form",
        }
    }
}

/// `eq3` is the unrolled K-step loss; `eq4` adds the fixed-point term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Eq3,
    Eq4,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Paper,
    Quick,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paper" => Some(Preset::Paper),
            "quick" => Some(Preset::Quick),
            _ => None,
        }
    }

    fn scale(self, n: usize) -> usize {
        match self {
            Preset::Paper => n,
            Preset::Quick => (n / 10).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub environment: EnvId,
    pub algorithm: Algorithm,
    pub pbo: PboVariant,
    pub loss: LossKind,
    /// Bellman iterations in the loss (ProFQI/ProDQN), iterations (FQI) or
    /// target updates (DQN).
    pub k: usize,
    pub seeds: Vec<u64>,
    pub preset: Preset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Offline dataset size; must match the environment's collection recipe.
    pub samples: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QSection {
    /// Hidden widths of the value network (ignored by tabular and quadratic
    /// families).
    pub hidden: Vec<usize>,
    /// Size of the parameter set `W`.
    pub w_size: usize,
    /// Standard deviation of the truncated normal used to draw `W`.
    pub w_std: f64,
    /// Replace `W[0]`, the initial parameters, by zeros.
    pub zero_start: bool,
    /// Fixed action coefficient of the quadratic LQR family.
    pub lqr_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FqiSection {
    pub fitting_steps: usize,
    pub patience: usize,
    pub start_lr: f64,
    pub end_lr: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PboSection {
    pub hidden: Vec<usize>,
    pub batch_w: usize,
    pub epochs: usize,
    pub training_steps: usize,
    pub start_lr: f64,
    pub end_lr: f64,
    pub init_std: f64,
    /// Soft target update rate; 1 is a hard copy.
    pub target_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineSection {
    pub initial_samples: usize,
    pub buffer_capacity: usize,
    pub steps_per_update: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub max_episode_steps: usize,
    /// Half-width of the uniform box episodes start in, around the origin.
    pub start_spread: f64,
    pub dqn_fitting_steps: usize,
    pub dqn_start_lr: f64,
    pub dqn_end_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Largest number of operator applications evaluated.
    pub max_k: usize,
    pub simulations: usize,
    pub horizon: usize,
    pub grid_resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub q: QSection,
    pub fqi: FqiSection,
    pub pbo: PboSection,
    pub online: OnlineSection,
    pub eval: EvalSection,
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Defaults for `env` under `preset`.
    pub fn defaults(env: EnvId, preset: Preset) -> Self {
        let s = |n| preset.scale(n);
        let (algorithm, pbo, k) = match env {
            EnvId::ChainWalk => (Algorithm::Profqi, PboVariant::Linear, 5),
            EnvId::Lqr => (Algorithm::Profqi, PboVariant::StructuredLqr, 2),
            EnvId::CarOnHill => (Algorithm::Profqi, PboVariant::Mlp, 9),
            EnvId::Bicycle => (Algorithm::Prodqn, PboVariant::Mlp, 8),
        };
        let experiment = ExperimentSection {
            environment: env,
            algorithm,
            pbo,
            loss: LossKind::Eq3,
            k,
            seeds: vec![0],
            preset,
        };
        let online = OnlineSection {
            initial_samples: s(10_000),
            buffer_capacity: s(10_000),
            steps_per_update: 2,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            max_episode_steps: 20,
            start_spread: 1e-3,
            dqn_fitting_steps: s(6_000),
            dqn_start_lr: 1e-4,
            dqn_end_lr: 1e-6,
        };
        let eval = EvalSection {
            max_k: 20,
            simulations: 1,
            horizon: 100,
            grid_resolution: 17,
        };
        match env {
            EnvId::ChainWalk => Self {
                experiment,
                data: DataSection {
                    samples: 400,
                    batch_size: 20,
                },
                q: QSection {
                    hidden: Vec::new(),
                    w_size: 100,
                    w_std: 1.0,
                    zero_start: false,
                    lqr_m: -1.2,
                },
                fqi: FqiSection {
                    fitting_steps: s(400),
                    patience: 100,
                    start_lr: 1e-2,
                    end_lr: 1e-5,
                    tolerance: 1e-8,
                },
                pbo: PboSection {
                    hidden: vec![50],
                    batch_w: 100,
                    epochs: s(1000),
                    training_steps: 5,
                    start_lr: 1e-2,
                    end_lr: 1e-7,
                    init_std: 5e-6,
                    target_tau: 1.0,
                },
                online,
                eval,
            },
            EnvId::Lqr => Self {
                experiment,
                data: DataSection {
                    samples: 121,
                    batch_size: 121,
                },
                q: QSection {
                    hidden: Vec::new(),
                    w_size: 5,
                    w_std: 1.0,
                    zero_start: true,
                    lqr_m: -1.2,
                },
                fqi: FqiSection {
                    fitting_steps: s(800),
                    patience: 100,
                    start_lr: 1e-2,
                    end_lr: 1e-5,
                    tolerance: 1e-8,
                },
                pbo: PboSection {
                    hidden: vec![8],
                    batch_w: 5,
                    epochs: s(1000),
                    training_steps: 4,
                    start_lr: 1e-2,
                    end_lr: 1e-5,
                    init_std: 5e-6,
                    target_tau: 1.0,
                },
                online,
                eval: EvalSection { max_k: 8, ..eval },
            },
            EnvId::CarOnHill => Self {
                experiment,
                data: DataSection {
                    samples: 5500,
                    batch_size: 500,
                },
                q: QSection {
                    hidden: vec![30],
                    w_size: 30,
                    w_std: 0.1,
                    zero_start: false,
                    lqr_m: -1.2,
                },
                fqi: FqiSection {
                    fitting_steps: s(1200),
                    patience: 30,
                    start_lr: 1e-3,
                    end_lr: 5e-7,
                    tolerance: 1e-8,
                },
                pbo: PboSection {
                    hidden: vec![302; 4],
                    batch_w: 30,
                    epochs: s(1000),
                    training_steps: 10,
                    start_lr: 1e-3,
                    end_lr: 5e-7,
                    init_std: 5e-7,
                    target_tau: 1.0,
                },
                online,
                eval,
            },
            EnvId::Bicycle => Self {
                experiment,
                data: DataSection {
                    samples: 70_000,
                    batch_size: 500,
                },
                q: QSection {
                    hidden: vec![30],
                    w_size: 30,
                    w_std: 0.1,
                    zero_start: false,
                    lqr_m: -1.2,
                },
                fqi: FqiSection {
                    fitting_steps: s(1200),
                    patience: 7,
                    start_lr: 5e-3,
                    end_lr: 1e-4,
                    tolerance: 1e-8,
                },
                pbo: PboSection {
                    hidden: vec![302; 3],
                    batch_w: 30,
                    epochs: s(4000),
                    training_steps: 25,
                    start_lr: 1e-5,
                    end_lr: 1e-7,
                    init_std: 5e-7,
                    target_tau: 1.0,
                },
                online,
                eval: EvalSection {
                    max_k: 16,
                    simulations: s(100),
                    horizon: s(50_000),
                    grid_resolution: 17,
                },
            },
        }
    }

    /// Parse a TOML document. `preset` overrides the document's
    /// `experiment.preset` when given.
    pub fn parse(text: &str, preset: Option<Preset>) -> Result<Self> {
        let mut user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err("document", e.message()))?;
        let section = match user.get("experiment") {
            Some(Value::Table(t)) => t.clone(),
            Some(_) => return Err(config_err("experiment", "must be a table")),
            None => return Err(config_err("experiment", "missing section")),
        };
        let env = match section.get("environment") {
            Some(Value::String(s)) => EnvId::parse(s).ok_or_else(|| {
                config_err(
                    "experiment.environment",
                    format!("unknown environment `{s}`; expected chain_walk, lqr, car_on_hill or bicycle"),
                )
            })?,
            Some(_) => return Err(config_err("experiment.environment", "must be a string")),
            None => return Err(config_err("experiment.environment", "missing")),
        };
        let preset = match preset {
            Some(p) => p,
            None => match section.get("preset") {
                Some(Value::String(s)) => Preset::parse(s).ok_or_else(|| {
                    config_err("experiment.preset", format!("unknown preset `{s}`"))
                })?,
                Some(_) => return Err(config_err("experiment.preset", "must be a string")),
                None => Preset::Paper,
            },
        };
        if let Some(Value::Table(t)) = user.get_mut("experiment") {
            t.insert("preset".into(), Value::String(preset_name(preset).into()));
        }
        let mut base = Self::defaults(env, preset);
        // Bicycle offline runs use the larger offline batch.
        if env == EnvId::Bicycle {
            if let Some(Value::String(a)) = section.get("algorithm") {
                if a == "fqi" || a == "profqi" {
                    base.data.batch_size = 1000;
                    base.pbo.batch_w = 25;
                    base.pbo.epochs = preset.scale(500);
                    base.pbo.training_steps = 20;
                    base.pbo.start_lr = 1e-4;
                    base.pbo.end_lr = 1e-7;
                    base.q.w_size = 50;
                }
            }
        }
        let mut merged =
            Table::try_from(&base).map_err(|e| config_err("document", e.to_string()))?;
        merge(&mut merged, user, "")?;
        let cfg: Self = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(&field_of(&e), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(config_err(
                "experiment.seeds",
                "at least one seed is required",
            ));
        }
        if e.algorithm != Algorithm::Fqi && e.k == 0 {
            return Err(config_err("experiment.k", "must be at least 1"));
        }
        if e.loss == LossKind::Eq4 && e.pbo != PboVariant::Linear {
            return Err(config_err(
                "experiment.loss",
                format!("eq4 needs the linear variant, got {}", e.pbo.name()),
            ));
        }
        if e.algorithm.uses_pbo() {
            match (e.pbo, e.environment) {
                (PboVariant::StructuredFinite, EnvId::ChainWalk)
                | (PboVariant::StructuredLqr, EnvId::Lqr)
                | (PboVariant::ClosedForm, EnvId::ChainWalk | EnvId::Lqr)
                | (PboVariant::Linear | PboVariant::Mlp, _) => {}
                (v, env) => {
                    return Err(config_err(
                        "experiment.pbo",
                        format!("{} is not available for {}", v.name(), env.name()),
                    ))
                }
            }
        }
        if e.algorithm.is_online() && matches!(e.environment, EnvId::Lqr) {
            return Err(config_err(
                "experiment.algorithm",
                "online agents need a discrete-action environment",
            ));
        }
        let positive = [
            ("data.batch_size", self.data.batch_size),
            ("q.w_size", self.q.w_size),
            ("pbo.batch_w", self.pbo.batch_w),
            ("eval.simulations", self.eval.simulations),
            ("eval.horizon", self.eval.horizon),
            ("eval.grid_resolution", self.eval.grid_resolution),
            ("online.buffer_capacity", self.online.buffer_capacity),
            ("online.steps_per_update", self.online.steps_per_update),
            ("online.max_episode_steps", self.online.max_episode_steps),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(config_err(field, "must be positive"));
            }
        }
        if !e.algorithm.is_online() && self.data.samples == 0 {
            return Err(config_err("data.samples", "must be positive"));
        }
        if e.algorithm.is_online() && self.online.initial_samples > self.online.buffer_capacity {
            return Err(config_err(
                "online.initial_samples",
                "exceeds online.buffer_capacity",
            ));
        }
        let rates = [
            ("fqi.start_lr", self.fqi.start_lr),
            ("fqi.end_lr", self.fqi.end_lr),
            ("pbo.start_lr", self.pbo.start_lr),
            ("pbo.end_lr", self.pbo.end_lr),
            ("online.dqn_start_lr", self.online.dqn_start_lr),
            ("online.dqn_end_lr", self.online.dqn_end_lr),
        ];
        for (field, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(field, "must be a positive number"));
            }
        }
        if !(self.pbo.target_tau > 0.0 && self.pbo.target_tau <= 1.0) {
            return Err(config_err("pbo.target_tau", "must lie in (0, 1]"));
        }
        for (field, v) in [
            ("online.epsilon_start", self.online.epsilon_start),
            ("online.epsilon_end", self.online.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(field, "must lie in [0, 1]"));
            }
        }
        if !(self.q.w_std >= 0.0 && self.pbo.init_std >= 0.0) {
            return Err(config_err(
                "q.w_std",
                "standard deviations must be non-negative",
            ));
        }
        if self.q.lqr_m >= 0.0 {
            return Err(config_err(
                "q.lqr_m",
                "must be negative for the greedy action to exist",
            ));
        }
        Ok(())
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Paper => "paper",
        Preset::Quick => "quick",
    }
}

/// Overlay `user` onto `base`. Sections must stay tables; unknown keys are
/// left for deserialization to reject.
fn merge(base: &mut Table, user: Table, prefix: &str) -> Result<()> {
    for (key, value) in user {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u, &path)?,
            (Some(Value::Table(_)), _) => return Err(config_err(&path, "must be a table")),
            (_, Value::Table(_)) if prefix.is_empty() => {
                return Err(config_err(&path, "unknown section"));
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    Ok(())
}

fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    match msg.find("field `") {
        Some(i) => msg[i + 7..]
            .split('`')
            .next()
            .unwrap_or("document")
            .to_string(),
        None => "document".into(),
    }
}
