use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pbo-lab"));
    cmd.env("PBO_LAB_THREADS", "1");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const CHAIN_FQI: &str = r#"
[experiment]
environment = "chain_walk"
algorithm = "fqi"
k = 3
seeds = [0, 1]

[fqi]
fitting_steps = 50

[eval]
max_k = 3
"#;

fn run_config(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn run_writes_one_directory_per_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "chain.toml", CHAIN_FQI);
    let out = tmp.path().join("res");
    let o = run_config(&cfg, &out, &["--preset", "quick"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for seed in [0, 1] {
        let dir = out.join(format!("seed_{seed}"));
        for f in [
            "run.json",
            "snapshots.csv",
            "metrics.csv",
            "training_log.csv",
        ] {
            assert!(dir.join(f).is_file(), "missing {f} for seed {seed}");
        }
        let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("k,metric,value\n"));
        // k = 0..=3
        assert_eq!(metrics.lines().count(), 5);
        let snaps = fs::read_to_string(dir.join("snapshots.csv")).unwrap();
        assert_eq!(snaps.lines().count(), 5);
    }
}

#[test]
fn same_seed_gives_identical_metrics() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "chain.toml", CHAIN_FQI);
    let read = |name: &str| {
        let out = tmp.path().join(name);
        let o = run_config(&cfg, &out, &["--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("seed_7").join("metrics.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn unknown_environment_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.toml",
        "[experiment]\nenvironment = \"lunar\"\nalgorithm = \"fqi\"\n",
    );
    let o = run_config(&cfg, &tmp.path().join("res"), &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("experiment.environment"));
}

#[test]
fn unknown_field_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.toml",
        "[experiment]\nenvironment = \"chain_walk\"\n\n[pbo]\nepochz = 3\n",
    );
    let o = run_config(&cfg, &tmp.path().join("res"), &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(code(&run(&["run"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    let tmp = TempDir::new().unwrap();
    let o = run(&["figure", "fig5", "--results", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn figure_without_runs_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["figure", "fig4", "--results", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let missing = tmp.path().join("nope");
    let o = run(&["figure", "fig4", "--results", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn fig4_csv_from_chain_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "chain.toml", CHAIN_FQI);
    let results = tmp.path().join("results");
    let o = run_config(&cfg, &results.join("chain_fqi"), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["figure", "fig4", "--results", results.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(results.join("fig4.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,K,k,l2_error,seed"));
    // Two seeds, k = 0..=3.
    assert_eq!(lines.clone().count(), 8);
    assert!(lines.all(|l| l.starts_with("FQI,3,")));
    let svg = fs::read_to_string(results.join("fig4.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn fig7_has_k_plus_one_fqi_points() {
    let tmp = TempDir::new().unwrap();
    let results = tmp.path().join("results");
    let fqi = write(
        tmp.path(),
        "lqr_fqi.toml",
        "[experiment]\nenvironment = \"lqr\"\nalgorithm = \"fqi\"\nk = 2\nseeds = [0]\n\n[fqi]\nfitting_steps = 100\n",
    );
    let pro = write(
        tmp.path(),
        "lqr_pro.toml",
        "[experiment]\nenvironment = \"lqr\"\nalgorithm = \"profqi\"\npbo = \"structured_lqr\"\nk = 2\nseeds = [0]\n\n[pbo]\nepochs = 20\n",
    );
    for (cfg, name) in [(&fqi, "fqi"), (&pro, "pro")] {
        let o = run_config(cfg, &results.join(name), &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = run(&["figure", "fig7", "--results", results.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(results.join("fig7.csv")).unwrap();
    let count = |m: &str| {
        csv.lines()
            .filter(|l| l.split(',').next() == Some(m))
            .count()
    };
    assert_eq!(count("FQI"), 3);
    assert_eq!(count("ProFQI_LQR"), 9);
    assert_eq!(count("optimal"), 1);
}

#[test]
fn fig7_needs_both_methods() {
    let tmp = TempDir::new().unwrap();
    let results = tmp.path().join("results");
    let fqi = write(
        tmp.path(),
        "lqr_fqi.toml",
        "[experiment]\nenvironment = \"lqr\"\nalgorithm = \"fqi\"\nk = 2\nseeds = [0]\n\n[fqi]\nfitting_steps = 20\n",
    );
    assert_eq!(code(&run_config(&fqi, &results.join("fqi"), &[])), 0);
    let o = run(&["figure", "fig7", "--results", results.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_passes() {
    let o = run(&["verify"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        for preset in [None, Some(pbo_core::config::Preset::Quick)] {
            pbo_core::config::ExperimentConfig::parse(&text, preset)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
        n += 1;
    }
    assert!(n >= 10);
}
