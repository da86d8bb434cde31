//! End-to-end runs of the `prefchain` binary against committed fixtures.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefchain")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Writes `run.toml` into `dir` with the given body and returns its path.
fn config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.display().to_string()
}

fn fixture(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

fn csv_rows(path: &str) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn build_graph_counts_and_stable_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("[paths]\nreference = {:?}\n", fixture("reference_50.csv")));
    let stdout = ok(dir.path(), &["--config", &cfg, "--out", "a", "build-graph"]);

    // counting oracle over the raw rows
    let rows = csv_rows(&fixture("reference_50.csv"));
    let persons: BTreeSet<_> = rows.iter().map(|r| r[..6].to_vec()).collect();
    let desires: BTreeSet<_> = rows.iter().map(|r| r[..8].to_vec()).collect();
    let intentions = rows.iter().map(|r| r[8].clone()).collect::<BTreeSet<_>>().len()
        + rows.iter().map(|r| r[9].clone()).collect::<BTreeSet<_>>().len();
    let nodes = persons.len() + desires.len() + intentions;
    let edges = desires.len() + 2 * rows.len();
    assert_eq!(
        stdout.trim(),
        format!(
            "nodes {nodes} edges {edges} persons {} desires {} intentions {intentions}",
            persons.len(),
            desires.len()
        )
    );

    ok(dir.path(), &["--config", &cfg, "--out", "b", "build-graph"]);
    let a = std::fs::read(dir.path().join("a/graph.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/graph.jsonl")).unwrap();
    assert_eq!(a, b);
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "build-graph");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn build_graph_rejects_empty_reference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("[paths]\nreference = {:?}\n", fixture("errors/empty.csv")));
    let out = run(dir.path(), &["--config", &cfg, "build-graph"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no records"));
}

fn distribution(v: &Value) -> BTreeMap<String, f64> {
    let options = v["choice_set"]["options"].as_array().unwrap();
    let probs = v["probabilities"].as_array().unwrap();
    options.iter().zip(probs).map(|(o, p)| (o.as_str().unwrap().to_string(), p.as_f64().unwrap())).collect()
}

#[test]
fn predict_identity_keeps_prior() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("[paths]\nreference = {:?}\n", fixture("reference_50.csv")));
    let stdout = ok(dir.path(), &["--config", &cfg, "--out", "o", "predict", "--query", &fixture("query_work.json")]);
    let v: Value = serde_json::from_str(&stdout).unwrap();
    for o in v["outputs"].as_array().unwrap() {
        assert_eq!(o["prior"], o["posterior"]);
        assert_eq!(o["source"], "llm_accepted");
        let total: f64 = distribution(&o["prior"]).values().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    assert!(dir.path().join("o/prediction.json").exists());
}

#[test]
fn predict_matches_hand_oracle_on_toy_graph() {
    // One person with one desire chose walking once and biking twice. Every
    // path shares the same similarity, desire and time factors, so the
    // prior is the edge count ratio.
    let dir = tempfile::tempdir().unwrap();
    let header = "age_group,income_group,employment_status,household_size,available_vehicles,education,trip_purpose,start_time,primary_mode,duration_minutes";
    let person = "25-34,$50k-$100k,employed,2,three_plus,bachelors_degree,work,8";
    let csv = format!("{header}\n{person},walking,0-10\n{person},biking,10-20\n{person},biking,10-20\n");
    std::fs::write(dir.path().join("toy.csv"), csv).unwrap();
    let cfg = config(dir.path(), "[paths]\nreference = \"toy.csv\"\n");
    let v: Value = serde_json::from_str(&ok(
        dir.path(),
        &["--config", &cfg, "--out", "o", "predict", "--query", &fixture("query_work.json")],
    ))
    .unwrap();
    let mode = distribution(&v["outputs"][0]["prior"]);
    assert!((mode["walking"] - 1.0 / 3.0).abs() < 1e-12);
    assert!((mode["biking"] - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(mode["private_auto"], 0.0);
    let duration = distribution(&v["outputs"][1]["prior"]);
    assert!((duration["10-20"] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn predict_missing_profile_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("[paths]\nreference = {:?}\n", fixture("reference_50.csv")));
    let out = run(dir.path(), &["--config", &cfg, "predict", "--query", &fixture("errors/query_missing_field.json")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn evaluate_closed_loop_and_baselines() {
    // Everyone walks for under ten minutes, so every prior is a point mass
    // and the simulated population equals the truth.
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("reference_50.csv")).unwrap();
    let mut lines = text.lines();
    let mut uniform = String::from(lines.next().unwrap());
    uniform.push('\n');
    for l in lines {
        let mut cells: Vec<&str> = l.split(',').collect();
        cells[8] = "walking";
        cells[9] = "0-10";
        uniform.push_str(&cells.join(","));
        uniform.push('\n');
    }
    std::fs::write(dir.path().join("same.csv"), uniform).unwrap();
    let cfg = config(dir.path(), "seed = 4\n[paths]\nreference = \"same.csv\"\nvalidation = \"same.csv\"\n");
    ok(dir.path(), &["--config", &cfg, "--out", "a", "evaluate", "--baselines"]);
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report.as_array().unwrap().iter().map(|r| r["predictor"].as_str().unwrap()).collect();
    assert_eq!(names, ["chain", "uniform", "marginal"]);
    for e in report[0]["entries"].as_array().unwrap() {
        assert!(e["kld"].as_f64().unwrap() < 1e-6, "{e}");
        assert!(e["mae"].as_f64().unwrap() < 1e-12);
    }
    assert!(report[1]["mean_kld"].as_f64().unwrap() > 0.5);

    ok(dir.path(), &["--config", &cfg, "--out", "b", "evaluate", "--baselines"]);
    let a = std::fs::read(dir.path().join("a/report.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/report.csv")).unwrap());
    let csv = String::from_utf8(a).unwrap();
    assert!(csv.starts_with("predictor,dimension,output,metric,value\n"));
    assert!(csv.contains("\nuniform,mean,all,kld,"));
}

#[test]
fn evaluate_scores_external_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        &format!(
            "[paths]\nreference = {:?}\nvalidation = {:?}\n",
            fixture("reference_50.csv"),
            fixture("validation_300.csv")
        ),
    );
    // the truth scored against itself, and a population from elsewhere
    let truth = fixture("validation_300.csv");
    let other = fixture("reference_50.csv");
    let mut reports = Vec::new();
    for (name, predictions) in [("self", &truth), ("other", &other)] {
        ok(dir.path(), &["--config", &cfg, "--out", name, "evaluate", "--predictions", predictions]);
        let report: Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(name).join("report.json")).unwrap()).unwrap();
        assert_eq!(report[1]["predictor"], "external");
        reports.push(report[1]["mean_kld"].as_f64().unwrap());
    }
    assert!(reports[0] < 1e-6, "{reports:?}");
    assert!(reports[1] > reports[0]);

    let missing = run(dir.path(), &["--config", &cfg, "--out", "m", "evaluate", "--predictions", "absent.csv"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn sweep_shape_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        &format!(
            "[paths]\nreference = {:?}\nvalidation = {:?}\n",
            fixture("reference_50.csv"),
            fixture("validation_300.csv")
        ),
    );
    let args = ["--config", &cfg, "sweep", "--sizes", "10,50", "--seeds", "3"];
    ok(dir.path(), &[&args[..], &["--out", "a"]].concat());
    ok(dir.path(), &[&args[..], &["--out", "b"]].concat());
    let a = std::fs::read_to_string(dir.path().join("a/sweep.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.path().join("b/sweep.csv")).unwrap());
    let rows: Vec<&str> = a.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 3 * 2);
    assert_eq!(a.lines().next(), Some("size,seed,metric,value"));
}

#[test]
fn simulate_matches_golden_tally() {
    let dir = tempfile::tempdir().unwrap();
    let golden = fixtures().join("golden");
    let cfg = golden.join("run.toml").display().to_string();
    let out = dir.path().join("o").display().to_string();
    ok(dir.path(), &["--config", &cfg, "--out", &out, "simulate"]);
    for name in ["edges.csv", "pois.csv"] {
        let got = std::fs::read(dir.path().join("o").join(name)).unwrap();
        let want = std::fs::read(golden.join(name)).unwrap();
        assert!(got == want, "{name} differs from the golden tally");
    }
    let summary: Value = serde_json::from_slice(&std::fs::read(dir.path().join("o/summary.json")).unwrap()).unwrap();
    assert!(summary["flow_kld"].is_null());
}

#[test]
fn simulate_with_reference_tally_reports_kld() {
    let dir = tempfile::tempdir().unwrap();
    let golden = fixtures().join("golden");
    let cfg = config(
        dir.path(),
        &format!(
            "seed = 42\n[paths]\nreference = {:?}\ncity = {:?}\n[simulation]\nagents = 10\nreference_edges = {:?}\nreference_pois = {:?}\n",
            fixture("reference_50.csv"),
            fixture("toy_city.json"),
            golden.join("edges.csv"),
            golden.join("pois.csv"),
        ),
    );
    let stdout = ok(dir.path(), &["--config", &cfg, "--out", "o", "simulate"]);
    assert!(stdout.contains("flow KLD 0.000000"), "{stdout}");
    let summary: Value = serde_json::from_slice(&std::fs::read(dir.path().join("o/summary.json")).unwrap()).unwrap();
    assert!(summary["flow_kld"].as_f64().unwrap() < 1e-9);
    assert!(summary["visit_kld"].as_f64().unwrap() < 1e-9);
}

#[test]
fn simulate_missing_city_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        &format!("[paths]\nreference = {:?}\ncity = \"absent.json\"\n", fixture("reference_50.csv")),
    );
    assert_eq!(run(dir.path(), &["--config", &cfg, "simulate"]).status.code(), Some(2));
}

#[test]
fn gen_synth_examples() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-synth", "--size", "0", "--out", "empty"]);
    let empty = std::fs::read_to_string(dir.path().join("empty/synthetic.csv")).unwrap();
    assert_eq!(empty.lines().count(), 1);

    ok(dir.path(), &["gen-synth", "--size", "10000", "--seed", "8", "--out", "a"]);
    ok(dir.path(), &["gen-synth", "--size", "10000", "--seed", "8", "--out", "b"]);
    let a = std::fs::read_to_string(dir.path().join("a/synthetic.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.path().join("b/synthetic.csv")).unwrap());

    let rows: Vec<Vec<&str>> = a.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let three_plus: Vec<_> = rows.iter().filter(|r| r[4] == "three_plus").collect();
    let auto = three_plus.iter().filter(|r| r[8] == "private_auto").count();
    let freq = auto as f64 / three_plus.len() as f64;
    assert!((freq - 0.7).abs() <= 0.02, "P(private_auto | three_plus) = {freq}");
}
