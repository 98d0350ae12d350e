use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_implicit-herd"));
    cmd.env("IMPLICIT_HERD_THREADS", "1");
    cmd
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"))
}

fn exec(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (status.code().unwrap(), String::from_utf8(stdout).unwrap(), String::from_utf8(stderr).unwrap())
}

fn load(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(shipped(name)).unwrap()).unwrap()
}

fn save(dir: &Path, file: &str, doc: &Value) -> PathBuf {
    let path = dir.join(file);
    std::fs::write(&path, doc.to_string()).unwrap();
    path
}

/// Number after `label` on the first stdout line that contains it.
fn number_after(stdout: &str, label: &str) -> f64 {
    let line = stdout.lines().find(|l| l.contains(label)).unwrap_or_else(|| panic!("no `{label}` in {stdout}"));
    line.split(label).nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn run_writes_artifacts_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = load("inverse-5v5");
    doc["output"]["plots"] = json!(["error-curves", "theta"]);
    let cfg = save(dir.path(), "run.json", &doc);
    let out = dir.path().join("out");
    let (code, stdout, stderr) = exec(bin().arg("run").arg(&cfg).arg("--out-dir").arg(&out));
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("settling"), "{stdout}");
    for f in ["config.json", "trace.csv", "metrics.json", "plot-error-curves.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(!out.join("packets.csv").exists());
    // perfect-model runs have no theta column to plot
    assert!(!out.join("plot-theta.csv").exists());
    assert!(stderr.contains("skipped plot theta"), "{stderr}");
    let header = std::fs::read_to_string(out.join("plot-error-curves.csv")).unwrap();
    assert!(header.starts_with("t,err0,err1,err2,err3,err4\n"));
}

#[test]
fn overrides_land_in_written_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = load("inverse-5v5");
    doc["scenario"]["horizon"] = json!(1.0);
    let cfg = save(dir.path(), "short.json", &doc);
    let args = ["--seed", "9", "--mode", "adaptive", "--estimator", "dkf", "--out-dir"];
    let (code, _, stderr) = exec(bin().arg("run").arg("--config").arg(&cfg).args(args).arg(dir.path()));
    assert_eq!(code, 0, "{stderr}");
    let written: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(written["scenario"]["seed"], json!(9));
    assert_eq!(written["scenario"]["mode"], json!("adaptive"));
    assert!(written["scenario"]["estimator"].is_object());
    assert!(dir.path().join("packets.csv").is_file());
}

#[test]
fn invalid_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(exec(bin().arg("run").arg(&missing)).0, 2);

    let garbled = dir.path().join("garbled.json");
    std::fs::write(&garbled, "{ not json").unwrap();
    assert_eq!(exec(bin().arg("run").arg(&garbled)).0, 2);

    let mut unknown = load("equilibrium-1v2");
    unknown["scenario"]["speed_limit"] = json!(1.0);
    assert_eq!(exec(bin().arg("run").arg(save(dir.path(), "unknown.json", &unknown))).0, 2);

    let mut negative = load("equilibrium-1v2");
    negative["scenario"]["dt"] = json!(-0.01);
    let (code, _, stderr) = exec(bin().arg("run").arg(save(dir.path(), "negative.json", &negative)));
    assert_eq!(code, 2);
    assert!(stderr.starts_with("implicit-herd: "), "{stderr}");

    // the root-finding baseline cannot run with the estimator
    let (code, _, _) = exec(bin().arg("run").arg(shipped("inverse-5v5-dkf")).args(["--mode", "baseline"]));
    assert_eq!(code, 2);

    let (code, _, _) = exec(bin().arg("run").arg(shipped("caging-3v3")).args(["--integrator", "rk4"]));
    assert_eq!(code, 2);
}

#[test]
fn mid_run_failure_exits_3_and_keeps_the_trace() {
    // one herder cannot place two evaders: J_u has rank 2 of 4
    let dir = tempfile::tempdir().unwrap();
    let mut doc = load("equilibrium-1v2");
    let sc = &mut doc["scenario"];
    sc["evaders"] = json!([sc["evaders"][0], sc["evaders"][0]]);
    sc["x0"] = json!([[1.0, 2.0], [1.0, 3.5]]);
    sc["u0"] = json!([[-0.5, 2.0]]);
    sc["reference"]["targets"] = json!([[2.0, 2.0], [2.0, 3.5]]);
    let cfg = save(dir.path(), "underactuated.json", &doc);
    let (code, _, stderr) = exec(bin().arg("run").arg(&cfg).arg("--out-dir").arg(dir.path()));
    assert_eq!(code, 3, "{stderr}");
    assert!(stderr.contains("rank"), "{stderr}");
    assert!(dir.path().join("trace.csv").is_file());
    let metrics: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!(!metrics["completed"].as_bool().unwrap());
}

#[test]
fn validate_gains_reports_matrices() {
    let (code, stdout, stderr) = exec(bin().arg("validate-gains").arg(shipped("exponential-5v5")));
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("K    negative definite: yes"), "{stdout}");
    assert!(stdout.contains("J_u rank 10/10"), "{stdout}");

    // K̄ is indefinite at the start of the inverse fixture: warning, not an error
    let (code, stdout, stderr) = exec(bin().arg("validate-gains").arg(shipped("inverse-5v5")));
    assert_eq!(code, 0);
    assert!(stdout.contains("Kbar negative definite: no"), "{stdout}");
    assert!(stderr.contains("warning"), "{stderr}");

    // K_f·K_h < 1/4 leaves K indefinite
    let dir = tempfile::tempdir().unwrap();
    let mut doc = load("inverse-5v5");
    doc["scenario"]["gains"]["k_f"] = json!(0.01);
    doc["scenario"]["gains"]["k_h"] = json!(1.0);
    let (code, stdout, _) = exec(bin().arg("validate-gains").arg(save(dir.path(), "weak.json", &doc)));
    assert_eq!(code, 2);
    assert!(stdout.contains("K    negative definite: no"), "{stdout}");
}

#[test]
fn compare_implicit_against_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("implicit"), dir.path().join("lm"));
    assert_eq!(exec(bin().arg("run").arg(shipped("inverse-5v5")).arg("--out-dir").arg(&a)).0, 0);
    assert_eq!(exec(bin().arg("run").arg(shipped("inverse-5v5-lm")).arg("--out-dir").arg(&b)).0, 0);
    let diff = dir.path().join("du.csv");
    let (code, stdout, stderr) =
        exec(bin().arg("compare").arg(a.join("trace.csv")).arg(b.join("trace.csv")).arg("--plot-out").arg(&diff));
    assert_eq!(code, 0, "{stderr}");
    assert!(stderr.contains("different scenarios"), "{stderr}");
    assert!(number_after(&stdout, "max evader gap after 2 s:") < 0.05, "{stdout}");
    assert!(std::fs::read_to_string(&diff).unwrap().starts_with("t,du0,"));

    let (code, _, _) = exec(bin().arg("compare").arg(a.join("trace.csv")).arg(shipped("inverse-5v5")));
    assert_eq!(code, 2);
}

#[test]
fn replay_matches_recorded_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = load("inverse-5v5-dkf");
    doc["scenario"]["horizon"] = json!(3.0);
    let cfg = save(dir.path(), "dkf.json", &doc);
    let out = dir.path().join("run");
    assert_eq!(exec(bin().arg("run").arg(&cfg).arg("--out-dir").arg(&out)).0, 0);
    let trace = out.join("trace.csv");
    let (code, stdout, stderr) = exec(bin().arg("replay-estimator").arg(&trace));
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("mismatched ticks: 0"), "{stdout}");
    assert_eq!(number_after(&stdout, "max RMSE difference:"), 0.0);

    // a config that differs from the recorded one is rejected up front
    doc["scenario"]["seed"] = json!(1234);
    let other = save(dir.path(), "other.json", &doc);
    let (code, _, stderr) = exec(bin().arg("replay-estimator").arg(&trace).arg("--config").arg(&other));
    assert_eq!(code, 2);
    assert!(stderr.contains("hash"), "{stderr}");
}

#[test]
fn sweep_prints_a_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = load("inverse-5v5-dkf");
    doc["scenario"]["horizon"] = json!(2.0);
    let cfg = save(dir.path(), "dkf.json", &doc);
    let (code, stdout, stderr) = exec(
        bin()
            .arg("sweep")
            .arg(&cfg)
            .args(["--param", "estimator.r", "--values", "0.07,0.3", "--out-dir"])
            .arg(dir.path()),
    );
    assert_eq!(code, 0, "{stderr}");
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3, "{stdout}");
    assert!(lines[0].contains("herding_error"));
    assert!(lines[1].trim_start().starts_with("0.07") && lines[2].trim_start().starts_with("0.3"));
    assert!(dir.path().join("estimator.r=0.07/trace.csv").is_file());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert_eq!(report["runs"][1]["value"], json!(0.3));
    let run_cfg = std::fs::read_to_string(dir.path().join("estimator.r=0.3/config.json")).unwrap();
    let run_cfg: Value = serde_json::from_str(&run_cfg).unwrap();
    assert_eq!(run_cfg["scenario"]["estimator"]["r"], json!(0.3));

    let (code, _, _) = exec(bin().arg("sweep").arg(&cfg).args(["--param", "estimator.nope", "--values", "1"]));
    assert_eq!(code, 2);
    let (code, _, _) = exec(
        bin().env("IMPLICIT_HERD_THREADS", "many").arg("sweep").arg(&cfg).args(["--param", "seed", "--values", "1"]),
    );
    assert_eq!(code, 2);
}

#[test]
fn plot_data_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = load("inverse-5v5");
    doc["scenario"]["horizon"] = json!(0.5);
    let cfg = save(dir.path(), "short.json", &doc);
    assert_eq!(exec(bin().arg("run").arg(&cfg).arg("--out-dir").arg(dir.path())).0, 0);
    let trace = dir.path().join("trace.csv");

    let (code, stdout, _) = exec(bin().arg("plot-data").arg(&trace).args(["--kind", "error-curves"]));
    assert_eq!(code, 0);
    assert!(stdout.starts_with("t,err0,"));
    assert_eq!(stdout.lines().count(), 52);

    let (code, _, stderr) = exec(bin().arg("plot-data").arg(&trace).args(["--kind", "heatmap"]));
    assert_eq!(code, 2);
    assert!(stderr.contains("heatmap"), "{stderr}");
    // no estimator, so no RMSE to plot
    assert_eq!(exec(bin().arg("plot-data").arg(&trace).args(["--kind", "rmse"])).0, 2);
    assert_eq!(exec(bin().arg("plot-data").arg(&trace).args(["--kind", "input-diff"])).0, 2);
}
