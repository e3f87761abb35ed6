use std::path::{Path, PathBuf};

use pbo_core::config::{ExperimentConfig, Preset};
use pbo_core::experiment::{parallel_map, run_seed, RunOutput, RunStats};
use serde::{Deserialize, Serialize};

use crate::{create_dir, read_file, worker_threads, write_file, CliError, CliResult};

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub metric: String,
    pub stats: RunStats,
    pub pbo_params: Option<Vec<f64>>,
}

pub struct RunArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<Preset>,
}

pub fn load_config(
    path: &Path,
    preset: Option<Preset>,
    seed: Option<u64>,
) -> CliResult<ExperimentConfig> {
    let text = read_file(path)?;
    let mut cfg = ExperimentConfig::parse(&text, preset)
        .map_err(|e| CliError::from_core(&path.display().to_string(), e))?;
    if let Some(s) = seed {
        cfg.experiment.seeds = vec![s];
    }
    Ok(cfg)
}

pub fn default_out_dir(cfg: &ExperimentConfig) -> PathBuf {
    let e = &cfg.experiment;
    let mut name = format!("{}_{}", e.environment.name(), e.algorithm.name());
    if e.algorithm.uses_pbo() {
        name.push('_');
        name.push_str(e.pbo.name());
    }
    PathBuf::from("results").join(format!("{name}_K{}", e.k))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, run: &RunOutput) -> CliResult<()> {
    create_dir(dir)?;
    let record = RunRecord {
        seed: run.seed,
        config: cfg.clone(),
        metric: run
            .metrics
            .first()
            .map_or_else(String::new, |m| m.metric.to_string()),
        stats: run.stats.clone(),
        pbo_params: run.pbo_params.clone(),
    };
    let json =
        serde_json::to_string_pretty(&record).map_err(|e| CliError::Failed(e.to_string()))?;
    write_file(&dir.join("run.json"), &json)?;
    write_file(&dir.join("snapshots.csv"), &run.snapshots_csv())?;
    write_file(&dir.join("metrics.csv"), &run.metrics_csv())?;
    write_file(&dir.join("training_log.csv"), &run.log.to_csv())
}

/// Run every seed of the configuration and write one directory per seed.
/// Returns the output directory.
pub fn run(args: &RunArgs) -> CliResult<PathBuf> {
    let cfg = load_config(&args.config, args.preset, args.seed)?;
    let out = args.out.clone().unwrap_or_else(|| default_out_dir(&cfg));
    create_dir(&out)?;
    let seeds = cfg.experiment.seeds.clone();
    let results = parallel_map(&seeds, worker_threads(), |&seed| -> CliResult<()> {
        let context = format!(
            "{} {} seed {seed}",
            cfg.experiment.environment.name(),
            cfg.experiment.algorithm.name()
        );
        let output = run_seed(&cfg, seed).map_err(|e| CliError::from_core(&context, e))?;
        write_run(&seed_dir(&out, seed), &cfg, &output)
    });
    // Report the first failure in seed order.
    for r in results {
        r?;
    }
    Ok(out)
}
