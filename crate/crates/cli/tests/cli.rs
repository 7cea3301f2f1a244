use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use tempfile::TempDir;
use vboost::driver::pct_change_of;
use vboost::{GaussianComponent, MixtureApprox};

fn vboost(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vboost"))
        .args(args)
        .output()
        .expect("failed to launch vboost")
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            headers.iter().map(String::from).zip(r.iter().map(String::from)).collect()
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

const FOUR_MODE: &str = r#"{
  "target": {
    "kind": "gmm",
    "components": [
      { "weight": 0.25, "mean": [-1.5, -1.5], "cov": [[0.25, 0.0], [0.0, 0.25]] },
      { "weight": 0.25, "mean": [-1.5, 1.5], "cov": [[0.25, 0.0], [0.0, 0.25]] },
      { "weight": 0.25, "mean": [1.5, -1.5], "cov": [[0.25, 0.0], [0.0, 0.25]] },
      { "weight": 0.25, "mean": [1.5, 1.5], "cov": [[0.25, 0.0], [0.0, 0.25]] }
    ]
  },
  "vboost": {
    "max_components": 4,
    "rank": { "kind": "fixed", "rank": 1 },
    "first_steps": 300,
    "component_steps": 200,
    "eval_samples": 2000,
    "seed": 5
  },
  "out": "run"
}"#;

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn run_writes_the_four_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "four.json", FOUR_MODE);
    let out = vboost(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let dir = tmp.path().join("run");
    let files: Vec<String> = snapshot(&dir).into_keys().collect();
    assert_eq!(files, ["config.resolved.json", "mixture.json", "stages.csv", "trace.csv"]);

    let stages = read_csv(&dir.join("stages.csv"));
    assert_eq!(stages.len(), 4);
    for (i, row) in stages.iter().enumerate() {
        assert_eq!(row["stage"], (i + 1).to_string());
        assert_eq!(row["n_components"], (i + 1).to_string());
        assert_eq!(row["rank"], "1");
        assert!(num(row, "eval_se") > 0.0);
    }
    let trace = read_csv(&dir.join("trace.csv"));
    assert_eq!(trace.first().unwrap()["stage"], "1");
    assert_eq!(trace.last().unwrap()["stage"], "4");
    assert!(trace.iter().all(|r| num(r, "elbo_estimate").is_finite() && num(r, "grad_norm") >= 0.0));

    let mix = MixtureApprox::load(&dir.join("mixture.json")).unwrap();
    assert_eq!(mix.n_components(), 4);
    assert_eq!(mix.dim(), 2);
}

#[test]
fn same_seed_gives_identical_bytes_and_resolved_config_reproduces() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "four.json", FOUR_MODE);
    let dir = tmp.path().join("run");
    assert!(vboost(&["run", "--config", cfg.to_str().unwrap()]).status.success());
    let first = snapshot(&dir);
    fs::remove_dir_all(&dir).unwrap();
    assert!(vboost(&["run", "--config", cfg.to_str().unwrap()]).status.success());
    assert_eq!(first, snapshot(&dir));

    // rerunning from the resolved config writes the same files again
    let resolved = tmp.path().join("resolved.json");
    fs::copy(dir.join("config.resolved.json"), &resolved).unwrap();
    fs::remove_dir_all(&dir).unwrap();
    assert!(vboost(&["run", "--config", resolved.to_str().unwrap()]).status.success());
    assert_eq!(first, snapshot(&dir));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "four.json", FOUR_MODE);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(vboost(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    assert!(vboost(&["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "6"])
        .status
        .success());
    assert_ne!(fs::read(a.join("trace.csv")).unwrap(), fs::read(b.join("trace.csv")).unwrap());
    let resolved: serde_json::Value = serde_json::from_slice(&fs::read(b.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["vboost"]["seed"], 6);
}

#[test]
fn missing_data_file_exits_1_without_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bb.json",
        r#"{"target": {"kind": "baseball", "data": "nowhere.csv"}, "out": "run"}"#,
    );
    let out = vboost(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn bad_configs_exit_1() {
    let tmp = TempDir::new().unwrap();
    let unknown = write_config(
        tmp.path(),
        "unknown.json",
        r#"{"target": {"kind": "gaussian", "mean": [0], "cov": [[1]]}, "vboost": {"max_component": 2}, "out": "run"}"#,
    );
    assert_eq!(vboost(&["run", "--config", unknown.to_str().unwrap()]).status.code(), Some(1));
    let rank = write_config(
        tmp.path(),
        "rank.json",
        r#"{"target": {"kind": "gaussian", "mean": [0, 0], "cov": [[1, 0], [0, 1]]}, "vboost": {"rank": {"kind": "fixed", "rank": 3}}, "out": "run"}"#,
    );
    assert_eq!(vboost(&["run", "--config", rank.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(
        vboost(&["run", "--config", tmp.path().join("absent.json").to_str().unwrap()]).status.code(),
        Some(1)
    );
    assert_eq!(vboost(&["run"]).status.code(), Some(1));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn baseball_csv_errors_name_the_row() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.csv"), "name,hits,at_bats\nA,3,45\nB,50,45\n").unwrap();
    let cfg = write_config(
        tmp.path(),
        "bb.json",
        r#"{"target": {"kind": "baseball", "data": "bad.csv"}, "out": "run"}"#,
    );
    let out = vboost(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("'B'"));
}

fn sweep_config(threshold: f64) -> String {
    format!(
        r#"{{
  "target": {{ "kind": "gaussian", "mean": [0, 1, 2], "cov": [[1, 0, 0], [0, 2, 0], [0, 0, 0.5]] }},
  "vboost": {{ "rank": {{ "kind": "sweep", "threshold": {threshold}, "max_rank": 3 }}, "first_steps": 1500 }},
  "out": "sweep"
}}"#
    )
}

#[test]
fn rank_sweep_on_a_diagonal_target_stops_at_zero() {
    for threshold in [0.05, 1.0] {
        let tmp = TempDir::new().unwrap();
        let cfg = write_config(tmp.path(), "sweep.json", &sweep_config(threshold));
        let out = vboost(&["rank", "--config", cfg.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let rows = read_csv(&tmp.path().join("sweep").join("rank_sweep.csv"));
        assert_eq!(rows.len(), 2, "threshold {threshold}");
        assert_eq!(rows[0]["rank"], "0");
        assert_eq!(rows[1]["rank"], "1");
        assert!(num(&rows[0], "pct_change") < threshold);
        assert_eq!(rows[1]["pct_change"], "");
        let vars: Vec<DVector<f64>> = rows
            .iter()
            .map(|row| DVector::from_fn(3, |d, _| num(row, &format!("var_{d}"))))
            .collect();
        let recomputed = pct_change_of(&vars[0], &vars[1]).unwrap();
        assert_eq!(recomputed.to_bits(), num(&rows[0], "pct_change").to_bits());
        for (row, v) in rows.iter().zip(&vars) {
            assert!((v.mean() - num(row, "mean_marginal_variance")).abs() < 1e-14);
        }
        let (v0, v1) = (num(&rows[0], "mean_marginal_variance"), num(&rows[1], "mean_marginal_variance"));
        assert!((v0 - 7.0 / 6.0).abs() < 0.1, "{v0}");
        assert!((v1 - v0).abs() / v0 < 0.05);
    }
}

#[test]
fn rank_requires_a_sweep_policy() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "four.json", FOUR_MODE);
    assert_eq!(vboost(&["rank", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
}

fn exact_gaussian(tmp: &Path) -> (PathBuf, PathBuf) {
    let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, -0.3, 0.6, 1.0, 0.2, -0.3, 0.2, 0.5]);
    let mean = DVector::from_vec(vec![1.0, -1.0, 0.5]);
    let chol = cov.clone().cholesky().unwrap().l();
    let comp = GaussianComponent::from_parts(mean.clone(), chol, DVector::from_element(3, -40.0)).unwrap();
    let mixture = tmp.join("exact.json");
    MixtureApprox::single(comp).save(&mixture).unwrap();
    let rows: Vec<String> = (0..3)
        .map(|i| format!("[{}]", (0..3).map(|j| cov[(i, j)].to_string()).collect::<Vec<_>>().join(", ")))
        .collect();
    let config = write_config(
        tmp,
        "gauss.json",
        &format!(
            r#"{{"target": {{"kind": "gaussian", "mean": [1.0, -1.0, 0.5], "cov": [{}]}}, "out": "cmp"}}"#,
            rows.join(", ")
        ),
    );
    (mixture, config)
}

#[test]
fn compare_exact_gaussian_within_three_se() {
    let tmp = TempDir::new().unwrap();
    let (mixture, config) = exact_gaussian(tmp.path());
    let out = vboost(&["compare", "--config", config.to_str().unwrap(), "--mixture", mixture.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&tmp.path().join("cmp").join("compare_moments.csv"));
    let ids: Vec<&str> = rows.iter().map(|r| r["statistic"].as_str()).collect();
    assert_eq!(ids, ["mean[0]", "mean[1]", "mean[2]", "std[0]", "std[1]", "std[2]", "cov[0,1]", "cov[0,2]", "cov[1,2]"]);
    for r in &rows {
        let (vb, oracle, se) = (num(r, "vb_value"), num(r, "oracle_value"), num(r, "oracle_se"));
        assert!(se > 0.0);
        assert!((vb - oracle).abs() <= 3.0 * se, "{r:?}");
    }
}

#[test]
fn compare_uses_quadrature_in_one_dimension() {
    let tmp = TempDir::new().unwrap();
    let comp = GaussianComponent::diagonal(DVector::from_element(1, 0.3), DVector::from_element(1, 0.0)).unwrap();
    let mixture = tmp.path().join("mix.json");
    MixtureApprox::single(comp).save(&mixture).unwrap();
    let config = write_config(
        tmp.path(),
        "bimodal.json",
        r#"{"target": {"kind": "gmm", "components": [
            {"weight": 0.5, "mean": [-2.0], "cov": [[0.25]]},
            {"weight": 0.5, "mean": [2.0], "cov": [[0.25]]}]}, "out": "cmp"}"#,
    );
    let out = vboost(&["compare", "--config", config.to_str().unwrap(), "--mixture", mixture.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&tmp.path().join("cmp").join("compare_moments.csv"));
    assert_eq!(rows.len(), 2);
    // within-mode variance 0.25 plus between-mode spread 4
    assert!(num(&rows[0], "oracle_value").abs() < 1e-9);
    assert!((num(&rows[1], "oracle_value") - 4.25f64.sqrt()).abs() < 1e-6);
    assert_eq!(num(&rows[1], "oracle_se"), 0.0);
}

#[test]
fn compare_mixture_dimension_must_match() {
    let tmp = TempDir::new().unwrap();
    let (_, config) = exact_gaussian(tmp.path());
    let mixture = tmp.path().join("mix.json");
    MixtureApprox::single(GaussianComponent::standard(2)).save(&mixture).unwrap();
    let out = vboost(&["compare", "--config", config.to_str().unwrap(), "--mixture", mixture.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("cmp").exists());
}

#[test]
fn baseball_compare_covers_all_moments_and_is_seed_stable() {
    let tmp = TempDir::new().unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join("baseball.csv");
    let config = write_config(
        tmp.path(),
        "bb.json",
        &format!(r#"{{"target": {{"kind": "baseball", "data": {:?}}}, "out": "cmp"}}"#, data.to_str().unwrap()),
    );
    let mut start = DVector::zeros(20);
    start[0] = -1.0;
    start[1] = 4.0;
    for j in 2..20 {
        start[j] = -1.0;
    }
    let comp = GaussianComponent::diagonal(start, DVector::from_element(20, -3.0)).unwrap();
    let mixture = tmp.path().join("mix.json");
    MixtureApprox::single(comp).save(&mixture).unwrap();

    let mut oracle = Vec::new();
    for seed in ["11", "12"] {
        let out_dir = tmp.path().join(format!("cmp{seed}"));
        let out = vboost(&[
            "compare",
            "--config",
            config.to_str().unwrap(),
            "--mixture",
            mixture.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let rows = read_csv(&out_dir.join("compare_moments.csv"));
        assert_eq!(rows.len(), 230);
        assert_eq!(rows.iter().filter(|r| r["statistic"].starts_with("mean")).count(), 20);
        assert_eq!(rows.iter().filter(|r| r["statistic"].starts_with("std")).count(), 20);
        oracle.push(rows);
    }
    let agree = oracle[0]
        .iter()
        .zip(&oracle[1])
        .filter(|(a, b)| {
            let se = num(a, "oracle_se").hypot(num(b, "oracle_se"));
            (num(a, "oracle_value") - num(b, "oracle_value")).abs() <= 3.0 * se
        })
        .count();
    assert!(agree as f64 >= 0.95 * 230.0, "{agree}/230 rows agree");
}
