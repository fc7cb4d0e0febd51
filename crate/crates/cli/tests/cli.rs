use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mixrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixrec"))
        .args(args)
        .env_remove("MIXREC_THREADS")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const MINIMAL: &str = r#"{
  "process": {"n": 100, "kind": "ar1_mixture", "p": 0.3, "r": 0.0, "mu2": 2.5},
  "kernel": {"kind": "gaussian_location", "sigma2": 1.0},
  "grid": "atoms:0,2.5",
  "seeds": [7]
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let file = dir.join("config.json");
    fs::write(&file, text).unwrap();
    path(&file).to_string()
}

#[test]
fn simulate_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let out = mixrec(&["simulate", "--example", "ex1", "--n", "200", "--out", path(&sim)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(sim.join("stream.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("i,t,x"));
    assert_eq!(csv.lines().count(), 201);
    assert!(sim.join("stream.meta.json").exists());

    let fit = dir.path().join("fit");
    let stream = sim.join("stream.csv");
    let out = mixrec(&[
        "fit", "--stream", path(&stream), "--grid", "atoms:0,2.5", "--kernel", "gaussian", "--sigma2", "1", "--out",
        path(&fit),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let density = fs::read_to_string(fit.join("density.csv")).unwrap();
    assert_eq!(density.lines().next(), Some("theta_1,mass,density"));
    assert_eq!(density.lines().count(), 3);
    assert!(fit.join("trace.csv").exists());
}

#[test]
fn run_writes_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let out_dir = dir.path().join("out");
    let out = mixrec(&["run", "--config", &config, "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert_eq!(names, ["density.csv", "stream.csv", "summary.json", "trace.csv"]);
    for f in files {
        let bytes = fs::read(out_dir.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_u64(), Some(bytes.len() as u64));
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        &MINIMAL.replace("\"seeds\": [7]", "\"seeds\": [1, 2, 3, 4, 5]"),
    );
    let one = dir.path().join("one");
    let many = dir.path().join("many");
    let out = mixrec(&["run", "--config", &config, "--threads", "1", "--out", path(&one)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = Command::new(env!("CARGO_BIN_EXE_mixrec"))
        .args(["run", "--config", &config, "--out", path(&many)])
        .env("MIXREC_THREADS", "4")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        fs::read(one.join("manifest.json")).unwrap(),
        fs::read(many.join("manifest.json")).unwrap()
    );
}

#[test]
fn reproduce_emits_report_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("rep");
    let out = mixrec(&["reproduce", "ma_q", "--n", "300", "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["example"], "ma_q");
    assert!(report["mass_at_0"].as_f64().is_some());
    let plot = fs::read_to_string(out_dir.join("fit/plot.csv")).unwrap();
    assert!(plot.starts_with("n,theta"));
}

#[test]
fn npmle_oracle_from_stream() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(mixrec(&["simulate", "--example", "ma_q", "--n", "500", "--out", path(&sim)]).status.success());
    let np = dir.path().join("np");
    let stream = sim.join("stream.csv");
    let out = mixrec(&[
        "oracle", "--stream", path(&stream), "--grid=-2:4:13", "--kernel", "gaussian", "--sigma2", "1", "--max-iter",
        "200", "--out", path(&np),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(np.join("npmle_density.csv")).unwrap();
    assert_eq!(csv.lines().count(), 14);
}

#[test]
fn dependence_diagnostic_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &MINIMAL.replace("\"r\": 0.0", "\"r\": 0.7"));
    let out_dir = dir.path().join("dep");
    let out = mixrec(&["diagnose", "--config", &config, "--lags", "2", "--mc-size", "10000", "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("dependence.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("lag,chi2,stderr,rho_hat"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = mixrec(&["reproduce", "ex9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("ex4b_misspec"));

    let broken = write_config(dir.path(), "{\"process\":");
    assert_eq!(mixrec(&["run", "--config", &broken]).status.code(), Some(2));

    let invalid = write_config(dir.path(), &MINIMAL.replace("\"p\": 0.3", "\"p\": 1.5"));
    let out = mixrec(&["run", "--config", &invalid, "--out", path(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(mixrec(&["fit", "--bogus"]).status.code(), Some(2));
}

#[test]
fn numeric_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(mixrec(&["simulate", "--example", "ex1", "--n", "50", "--out", path(&sim)]).status.success());
    let stream = sim.join("stream.csv");
    let out = mixrec(&[
        "fit", "--stream", path(&stream), "--grid", "atoms:100", "--kernel", "gaussian", "--sigma2", "1e-6", "--out",
        path(&dir.path().join("fit")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("outside model support"));
}
