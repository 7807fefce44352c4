use std::path::Path;
use std::process::{Command, Output};

fn treeavg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treeavg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "k = 2\nn_per_site = 50\nc = 0.0\nreplications = 2\nn_test = 50\nforest_trees = 20\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn minimal_simulation_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = treeavg(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let reps = std::fs::read_to_string(out.join("replicates.csv")).unwrap();
    assert!(reps.starts_with("replicate_idx,estimator,mse,mse_ratio\n"));
    let loc: Vec<&str> = reps.lines().filter(|l| l.split(',').nth(1) == Some("LOC")).collect();
    assert_eq!(loc.len(), 2);
    assert!(loc.iter().all(|l| l.ends_with(",1")));

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("estimator,c,grouping,mean_ratio,sd_ratio,q25,q50,q75\n"));
    let weights = std::fs::read_to_string(out.join("weights.csv")).unwrap();
    let mut sums = std::collections::BTreeMap::<String, f64>::new();
    for line in weights.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *sums.entry(f[0].to_string()).or_default() += f[2].parse::<f64>().unwrap();
    }
    assert_eq!(sums.len(), 61);
    assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-9));
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"config_digest\""));
}

#[test]
fn csv_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = treeavg(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", threads]);
        assert!(o.status.success());
        outputs.push(std::fs::read(out.join("replicates.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "k = 2\nsites_total = 3\n").unwrap();
    let o = treeavg(&["simulate", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sites_total"));

    let o = treeavg(&["simulate", "--set", "k=1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fitting_error_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // a forest subsample of 0.01 * 30 target subjects rounds down to nothing
    let o = treeavg(&[
        "simulate",
        "--set",
        "k=2",
        "--set",
        "n_per_site=60",
        "--set",
        "replications=1",
        "--set",
        "n_test=5",
        "--set",
        "forest_subject_fraction=0.01",
        "--out",
        dir.path().to_str().unwrap(),
        "--estimators",
        "EF",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("EF") && err.contains("replicate 0"), "{err}");
}

#[test]
fn export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let file = dir.path().join("site2.model");
    let o = treeavg(&["export-model", "--config", &cfg, "--site", "2", "--out", file.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = treeavg(&["import-model", file.to_str().unwrap(), "--predict", "0.5,-1,0,0,0"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("kind=causal_tree") && text.contains("site_id=2") && text.contains("prediction="));

    let envelope = std::fs::read_to_string(&file).unwrap();
    std::fs::write(&file, envelope.replacen(" n=", " n=9", 1)).unwrap();
    let o = treeavg(&["import-model", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("digest"));
}

#[test]
fn ensemble_export_and_weights_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let file = dir.path().join("ef.model");
    let o = treeavg(&["export-model", "--config", &cfg, "--ensemble", "EF", "--out", file.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = treeavg(&["import-model", file.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("kind=ensemble_forest"));

    let out = dir.path().join("w");
    let o = treeavg(&[
        "weights-report",
        "--config",
        &cfg,
        "--ensemble",
        "ET",
        "--grid=-1:1:5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let w = std::fs::read_to_string(out.join("weights.csv")).unwrap();
    assert_eq!(w.lines().count(), 1 + 5 * 2);
}
