//! Tidy CSV (plus an SVG rendering) for each figure, built from run
//! directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pbo_core::config::{Algorithm, EnvId, LossKind, PboVariant};
use pbo_core::environments::LqrEnv;
use pbo_core::evaluation::lqr_optimal_params;

use crate::run::RunRecord;
use crate::svg::{line_chart, Series};
use crate::{read_file, write_file, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FigureName {
    Fig4,
    Fig6,
    Fig7,
    Fig8,
}

impl FigureName {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fig4" => Some(FigureName::Fig4),
            "fig6" => Some(FigureName::Fig6),
            "fig7" => Some(FigureName::Fig7),
            "fig8" => Some(FigureName::Fig8),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FigureName::Fig4 => "fig4",
            FigureName::Fig6 => "fig6",
            FigureName::Fig7 => "fig7",
            FigureName::Fig8 => "fig8",
        }
    }
}

/// A run directory read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub metrics: Vec<(usize, f64)>,
    pub snapshots: Vec<Vec<f64>>,
}

impl LoadedRun {
    pub fn method(&self) -> String {
        let e = &self.record.config.experiment;
        let base = match (e.algorithm, e.pbo) {
            (Algorithm::Fqi, _) => return "FQI".into(),
            (Algorithm::Dqn, _) => return "DQN".into(),
            (Algorithm::Profqi, PboVariant::ClosedForm) => return "PBO".into(),
            (Algorithm::Profqi, PboVariant::Linear) => "ProFQI",
            (Algorithm::Profqi, PboVariant::Mlp) => "ProFQI_mlp",
            (Algorithm::Profqi, PboVariant::StructuredFinite) => "ProFQI_chain",
            (Algorithm::Profqi, PboVariant::StructuredLqr) => "ProFQI_LQR",
            (Algorithm::Prodqn, _) => "ProDQN",
        };
        if e.loss == LossKind::Eq4 {
            format!("{base}_inf")
        } else {
            base.into()
        }
    }

    fn k(&self) -> usize {
        self.record.config.experiment.k
    }

    fn env(&self) -> EnvId {
        self.record.config.experiment.environment
    }
}

fn parse_metrics(text: &str, path: &Path) -> CliResult<Vec<(usize, f64)>> {
    let bad = || CliError::Failed(format!("{}: malformed metrics file", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(bad());
            }
            Ok((
                cols[0].parse().map_err(|_| bad())?,
                cols[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

fn parse_snapshots(text: &str, path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let bad = || CliError::Failed(format!("{}: malformed snapshots file", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split(',')
                .skip(1)
                .map(|x| x.parse().map_err(|_| bad()))
                .collect()
        })
        .collect()
}

fn find_run_files(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let entries = std::fs::read_dir(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_run_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "run.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Every run below `dir`, in path order.
pub fn load_runs(dir: &Path) -> CliResult<Vec<LoadedRun>> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "results directory {} does not exist",
            dir.display()
        )));
    }
    let mut files = Vec::new();
    find_run_files(dir, &mut files)?;
    files
        .into_iter()
        .map(|path| {
            let run_dir = path.parent().expect("file has a parent").to_path_buf();
            let record: RunRecord = serde_json::from_str(&read_file(&path)?)
                .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
            let mpath = run_dir.join("metrics.csv");
            let spath = run_dir.join("snapshots.csv");
            Ok(LoadedRun {
                metrics: parse_metrics(&read_file(&mpath)?, &mpath)?,
                snapshots: parse_snapshots(&read_file(&spath)?, &spath)?,
                record,
                dir: run_dir,
            })
        })
        .collect()
}

/// Files written for one figure.
#[derive(Clone, Debug, PartialEq)]
pub struct FigureOutput {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub rows: usize,
}

pub fn figure(name: FigureName, results: &Path, out: Option<&Path>) -> CliResult<FigureOutput> {
    let runs = load_runs(results)?;
    if runs.is_empty() {
        return Err(CliError::Usage(format!(
            "no runs found under {}",
            results.display()
        )));
    }
    let (csv, svg, rows) = match name {
        FigureName::Fig4 => error_curves(
            &runs,
            EnvId::ChainWalk,
            "l2_error",
            "chain-walk: |Q* - Q_k|",
            "fig4",
        )?,
        FigureName::Fig6 => error_curves(&runs, EnvId::Lqr, "l2_error", "LQR: |w* - w_k|", "fig6")?,
        FigureName::Fig7 => lqr_trajectories(&runs)?,
        FigureName::Fig8 => error_curves(
            &runs,
            EnvId::CarOnHill,
            "return",
            "car-on-hill: weighted return",
            "fig8",
        )?,
    };
    let out = out.unwrap_or(results);
    crate::create_dir(out)?;
    let csv_path = out.join(format!("{}.csv", name.name()));
    let svg_path = out.join(format!("{}.svg", name.name()));
    write_file(&csv_path, &csv)?;
    write_file(&svg_path, &svg)?;
    Ok(FigureOutput {
        csv: csv_path,
        svg: svg_path,
        rows,
    })
}

fn missing(figure: &str, what: &[&str]) -> CliError {
    CliError::Usage(format!("{figure}: missing runs: {}", what.join(", ")))
}

/// `method, K, k, <value>, seed` for every run of `env`, and the seed-mean
/// curve per `(method, K)`.
fn error_curves(
    runs: &[LoadedRun],
    env: EnvId,
    value: &str,
    title: &str,
    fig: &str,
) -> CliResult<(String, String, usize)> {
    let selected: Vec<&LoadedRun> = runs.iter().filter(|r| r.env() == env).collect();
    if selected.is_empty() {
        return Err(missing(fig, &[&format!("{} runs", env.name())]));
    }
    let mut csv = format!("method,K,k,{value},seed\n");
    let mut rows = 0;
    let mut curves: BTreeMap<(String, usize), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in &selected {
        for &(k, v) in &r.metrics {
            let _ = writeln!(
                csv,
                "{},{},{k},{v:.16e},{}",
                r.method(),
                r.k(),
                r.record.seed
            );
            rows += 1;
            curves
                .entry((r.method(), r.k()))
                .or_default()
                .entry(k)
                .or_default()
                .push(v);
        }
    }
    let series: Vec<Series> = curves
        .into_iter()
        .map(|((method, k), pts)| Series {
            label: format!("{method} K={k}"),
            points: pts
                .into_iter()
                .map(|(x, v)| (x as f64, v.iter().sum::<f64>() / v.len() as f64))
                .collect(),
            scatter: false,
        })
        .collect();
    Ok((csv, line_chart(title, "iteration k", value, &series), rows))
}

/// Applications of a learned operator shown in the LQR trajectory figure.
const TRAJECTORY_APPLICATIONS: usize = 8;

fn lqr_trajectories(runs: &[LoadedRun]) -> CliResult<(String, String, usize)> {
    let lqr: Vec<&LoadedRun> = runs.iter().filter(|r| r.env() == EnvId::Lqr).collect();
    let fqi: Vec<&&LoadedRun> = lqr
        .iter()
        .filter(|r| r.record.config.experiment.algorithm == Algorithm::Fqi)
        .collect();
    let pro: Vec<&&LoadedRun> = lqr
        .iter()
        .filter(|r| r.record.config.experiment.algorithm == Algorithm::Profqi)
        .collect();
    let mut absent = Vec::new();
    if fqi.is_empty() {
        absent.push("lqr fqi");
    }
    if pro.is_empty() {
        absent.push("lqr profqi");
    }
    if !absent.is_empty() {
        return Err(missing("fig7", &absent));
    }
    let mut csv = String::from("method,K,seed,point,G,I\n");
    let mut rows = 0;
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in fqi.iter().chain(pro.iter()) {
        let points = if r.record.config.experiment.algorithm == Algorithm::Fqi {
            r.k() + 1
        } else {
            TRAJECTORY_APPLICATIONS + 1
        };
        let first_seed = !series.contains_key(&r.method());
        for (i, w) in r.snapshots.iter().take(points).enumerate() {
            let _ = writeln!(
                csv,
                "{},{},{},{i},{:.16e},{:.16e}",
                r.method(),
                r.k(),
                r.record.seed,
                w[0],
                w[1]
            );
            rows += 1;
            if first_seed {
                series.entry(r.method()).or_default().push((w[0], w[1]));
            }
        }
    }
    let m = lqr[0].record.config.q.lqr_m;
    let star = lqr_optimal_params(&LqrEnv::default(), m)
        .map_err(|e| CliError::from_core("fig7", e))?
        .params;
    let _ = writeln!(csv, "optimal,0,0,0,{:.16e},{:.16e}", star[0], star[1]);
    rows += 1;
    let mut plot: Vec<Series> = series
        .into_iter()
        .map(|(label, points)| Series {
            label,
            points,
            scatter: false,
        })
        .collect();
    plot.push(Series {
        label: "optimal".into(),
        points: vec![(star[0], star[1])],
        scatter: true,
    });
    Ok((
        csv,
        line_chart("LQR parameter trajectories", "G", "I", &plot),
        rows,
    ))
}
