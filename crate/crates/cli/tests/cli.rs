use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use labelshift_core::estimators::{mlls_em, EstimatorConfig, Method};
use labelshift_core::simulation::{run_trial, CalibrationSpec, ExperimentConfig, ShiftSpec, TrialIndex};
use labelshift_core::{PredictorTable, ProbVector};
use serde_json::Value;
use tempfile::TempDir;

fn labelshift(args: &[&str]) -> Output {
    labelshift_env(args, &[])
}

fn labelshift_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_labelshift"));
    cmd.args(args).env_remove("LABELSHIFT_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "exit {:?}, stderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn err_json(out: &Output, code: i32) -> Value {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is an error JSON document");
    assert_eq!(v["error"]["exit_code"], code);
    v
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().expect("array").iter().map(|x| x.as_f64().expect("number")).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a prediction CSV with `count` copies of each `(output, label)` row.
fn write_rows(path: &Path, rows: &[(&[f64], Option<usize>, usize)]) {
    let k = rows[0].0.len();
    let labeled = rows[0].1.is_some();
    let mut text: String = (0..k).map(|c| format!("c{c}")).collect::<Vec<_>>().join(",");
    if labeled {
        text.push_str(",label");
    }
    text.push('\n');
    for &(output, label, count) in rows {
        for _ in 0..count {
            let fields: Vec<String> = output.iter().map(|p| p.to_string()).collect();
            text.push_str(&fields.join(","));
            if let Some(y) = label {
                write!(text, ",{y}").unwrap();
            }
            text.push('\n');
        }
    }
    std::fs::write(path, text).unwrap();
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path
}

/// Joint `P(ŷ, y)` = [[.4, .05], [.1, .45]] from 20 source rows and a
/// target prediction marginal of [.275, .725]: `C w = μ` gives w = [.5, 1.5].
fn bbse_instance(dir: &Path) -> (PathBuf, PathBuf) {
    let (a, b): (&[f64], &[f64]) = (&[0.9, 0.1], &[0.2, 0.8]);
    let source = dir.join("source.csv");
    let target = dir.join("target.csv");
    write_rows(&source, &[(a, Some(0), 8), (b, Some(0), 2), (a, Some(1), 1), (b, Some(1), 9)]);
    write_rows(&target, &[(a, None, 11), (b, None, 29)]);
    (source, target)
}

#[test]
fn bbse_hand_solvable_files() {
    let dir = TempDir::new().unwrap();
    let (source, target) = bbse_instance(dir.path());
    let v = ok_json(&labelshift(&["estimate", "--source", s(&source), "--target", s(&target), "--method", "bbse_hard"]));
    let w = floats(&v["weights"]);
    assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 1.5).abs() < 1e-12, "{w:?}");
    assert_eq!(v["method"], "bbse_hard");
    assert!(v["calibration"].is_null());
    let q = floats(&v["target_marginal"]);
    assert!((q[0] - 0.25).abs() < 1e-12);
}

#[test]
fn output_flag_writes_report_file() {
    let dir = TempDir::new().unwrap();
    let (source, target) = bbse_instance(dir.path());
    let out = dir.path().join("report.json");
    let o = labelshift(&["estimate", "--source", s(&source), "--target", s(&target), "--method", "bbse_hard", "--output", s(&out)]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(floats(&v["weights"]).len(), 2);
}

const SIX_F: [[f64; 3]; 6] =
    [[0.1, 0.2, 0.7], [0.1, 0.7, 0.2], [0.2, 0.1, 0.7], [0.2, 0.7, 0.1], [0.7, 0.1, 0.2], [0.7, 0.2, 0.1]];
/// Target masses of the six outputs under the prior [0.8, 0.1, 0.1], in
/// thousandths.
const SIX_COUNTS: [usize; 6] = [120, 50, 85, 155, 330, 260];

#[test]
fn six_point_counterexample_files_match_in_process_estimate() {
    let dir = TempDir::new().unwrap();
    let source = dir.path().join("source.csv");
    let target = dir.path().join("target.csv");
    let src_rows: Vec<(&[f64], Option<usize>, usize)> = SIX_F.iter().enumerate().map(|(i, f)| (&f[..], Some(i % 3), 1)).collect();
    write_rows(&source, &src_rows);
    let tgt_rows: Vec<(&[f64], Option<usize>, usize)> = SIX_F.iter().zip(SIX_COUNTS).map(|(f, c)| (&f[..], None, c)).collect();
    write_rows(&target, &tgt_rows);
    let config = write_config(dir.path(), r#"{"source": {"marginal": [0.3333333333333333, 0.3333333333333333, 0.3333333333333334]}}"#);
    let v = ok_json(&labelshift(&[
        "estimate", "--config", s(&config), "--source", s(&source), "--target", s(&target), "--method", "mlls_em", "--no-calibration",
    ]));
    let w = floats(&v["weights"]);

    let table = PredictorTable::from_outputs(
        SIX_F.iter().zip(SIX_COUNTS).flat_map(|(f, c)| std::iter::repeat_n(ProbVector::new(f.to_vec()).unwrap(), c)),
    )
    .unwrap();
    let p = ProbVector::new(vec![0.3333333333333333, 0.3333333333333333, 0.3333333333333334]).unwrap();
    let reference = mlls_em(&table, &p, &EstimatorConfig::default()).unwrap();
    for (a, b) in w.iter().zip(reference.weights.as_slice()) {
        assert!((a - b).abs() < 1e-12, "{w:?} vs {:?}", reference.weights);
    }
    // Marginal calibration alone does not recover the true weights.
    let dist = w.iter().zip([2.4, 0.3, 0.3]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    assert!(dist > 0.05, "{w:?}");
}

/// Two outputs whose label frequencies match them exactly in each half of
/// the source, so identity is the optimal map on the validation split.
fn calibrated_instance(dir: &Path) -> (PathBuf, PathBuf) {
    let (a, b): (&[f64], &[f64]) = (&[0.25, 0.75], &[0.75, 0.25]);
    let source = dir.join("source.csv");
    let target = dir.join("target.csv");
    let mut rows = Vec::new();
    for _ in 0..2 {
        rows.extend([(a, Some(0), 1), (a, Some(1), 3), (b, Some(0), 3), (b, Some(1), 1)]);
    }
    write_rows(&source, &rows);
    write_rows(&target, &[(a, None, 30), (b, None, 70)]);
    (source, target)
}

#[test]
fn calibration_is_a_no_op_on_calibrated_outputs() {
    let dir = TempDir::new().unwrap();
    let (source, target) = calibrated_instance(dir.path());
    let base = ["estimate", "--source", s(&source), "--target", s(&target), "--method", "mlls_em"];
    let with = ok_json(&labelshift(&base));
    let mut args = base.to_vec();
    args.push("--no-calibration");
    let without = ok_json(&labelshift(&args));
    assert!((with["calibration"]["temperature"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    for (a, b) in floats(&with["weights"]).iter().zip(floats(&without["weights"])) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
}

#[test]
fn simulate_then_estimate_matches_in_process_pipeline_exactly() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sim");
    ok_json(&labelshift(&["simulate", "--output", s(&out), "--seed", "77", "--alpha", "0.5", "--n-source", "2000", "--m", "500"]));
    let sidecar: Value = serde_json::from_str(&std::fs::read_to_string(out.join("target_marginal.json")).unwrap()).unwrap();
    let p_s = sidecar["source_marginal"].to_string();
    let config = write_config(dir.path(), &format!(r#"{{"source": {{"marginal": {p_s}}}}}"#));

    let experiment = ExperimentConfig {
        shifts: vec![ShiftSpec::Dirichlet { alpha: 0.5 }],
        methods: vec![Method::BbseHard, Method::MllsEm, Method::MllsCm],
        sizes: vec![500],
        n_trials: 1,
        base_seed: 77,
        calibration: CalibrationSpec::Bcts,
        dataset: labelshift_core::simulation::GmmDataset { n_source: 2000, ..Default::default() },
        ..ExperimentConfig::default()
    };
    let reports = run_trial(&experiment, TrialIndex { shift: 0, size: 0, trial: 0 });
    assert_eq!(floats(&sidecar["target_marginal"]), reports[0].target_marginal.as_slice());
    for report in reports {
        let v = ok_json(&labelshift(&[
            "estimate",
            "--config",
            s(&config),
            "--source",
            s(&out.join("source.csv")),
            "--target",
            s(&out.join("target.csv")),
            "--method",
            report.method.name(),
            "--clip-negative",
        ]));
        assert_eq!(floats(&v["weights"]), report.w_hat.unwrap().as_slice(), "{}", report.method);
    }
}

#[test]
fn simulate_is_deterministic_and_records_marginals() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |o: &Path| vec!["simulate".to_string(), "--output".into(), s(o).into(), "--seed".into(), "5".into(), "--alpha".into(), "1e6".into()];
    for o in [&a, &b] {
        let argv = args(o);
        ok_json(&labelshift(&argv.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    for f in ["source.csv", "target.csv", "target_marginal.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let side: Value = serde_json::from_str(&std::fs::read_to_string(a.join("target_marginal.json")).unwrap()).unwrap();
    let q = floats(&side["target_marginal"]);
    assert!((q[0] - 0.5).abs() < 0.01, "{q:?}");

    let c = dir.path().join("c");
    ok_json(&labelshift(&["simulate", "--output", s(&c), "--target-marginal", "0.01,0.99", "--m", "50"]));
    let side: Value = serde_json::from_str(&std::fs::read_to_string(c.join("target_marginal.json")).unwrap()).unwrap();
    assert_eq!(floats(&side["target_marginal"]), [0.01, 0.99]);
    assert_eq!(side["shift"]["mode"], "explicit");
    let target = std::fs::read_to_string(c.join("target.csv")).unwrap();
    assert_eq!(target.lines().next(), Some("0,1"));
    assert_eq!(target.lines().count(), 51);
}

#[test]
fn simulate_to_unwritable_path_is_io_error() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let v = err_json(&labelshift(&["simulate", "--output", s(&blocker.join("sub")), "--alpha", "1", "--m", "10"]), 5);
    assert_eq!(v["error"]["kind"], "io");
}

#[test]
fn benchmark_preset_has_one_row_per_cell() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("mse.csv");
    let v = ok_json(&labelshift(&["benchmark", "--preset", "gmm", "--n-trials", "2", "--seed", "3", "--output", s(&csv)]));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("shift_param,method,m,n_trials,mse,stderr"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5 * Method::ALL.len());
    let mut cells: Vec<(&str, &str, &str)> = rows.iter().map(|r| (r[0], r[1], r[2])).collect();
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), rows.len());
    assert!(rows.iter().all(|r| r[2] == "1000"));
    assert_eq!(v["methods"].as_array().unwrap().len(), Method::ALL.len());
}

#[test]
fn benchmark_csv_is_byte_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"benchmark": {"shifts": [{"mode": "dirichlet", "alpha": 1.0}], "methods": ["bbse_hard", "mlls_em", "rlls"], "sizes": [200], "n_trials": 1, "base_seed": 9}}"#,
    );
    let run = |threads: &str| {
        let o = labelshift_env(&["benchmark", "--config", s(&config)], &[("LABELSHIFT_THREADS", threads)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let first = run("1");
    assert_eq!(first, run("1"));
    assert_eq!(first, run("4"));
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 4);
}

#[test]
fn benchmark_rejects_empty_method_list_and_bad_thread_cap() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), r#"{"benchmark": {"methods": []}}"#);
    err_json(&labelshift(&["benchmark", "--config", s(&config)]), 2);
    err_json(&labelshift_env(&["benchmark", "--n-trials", "1"], &[("LABELSHIFT_THREADS", "zero")]), 2);
}

#[test]
fn diagnose_constant_predictor_is_not_identifiable() {
    let dir = TempDir::new().unwrap();
    let source = dir.path().join("source.csv");
    let target = dir.path().join("target.csv");
    let c: &[f64] = &[0.5, 0.5];
    write_rows(&source, &[(c, Some(0), 5), (c, Some(1), 5)]);
    write_rows(&target, &[(c, None, 10)]);
    let v = ok_json(&labelshift(&["diagnose", "--source", s(&source), "--target", s(&target), "--weights", "1,1", "--no-calibration"]));
    assert_eq!(v["identifiable"], false);
    assert!(v["hessian_nsd"].is_boolean());
    assert!(v["bound_terms"]["total"].is_number() || v["bound_terms"]["total"].is_null());

    // The moment-matching system is singular too.
    let e = err_json(&labelshift(&["estimate", "--source", s(&source), "--target", s(&target), "--method", "bbse_hard"]), 3);
    assert_eq!(e["error"]["kind"], "identifiability");
}

#[test]
fn diagnose_at_the_estimate_of_oracle_files_is_stationary() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sim");
    ok_json(&labelshift(&["simulate", "--output", s(&out), "--seed", "1", "--target-marginal", "0.3,0.7", "--m", "2000"]));
    let v = ok_json(&labelshift(&[
        "diagnose",
        "--source",
        s(&out.join("source.csv")),
        "--target",
        s(&out.join("target.csv")),
        "--method",
        "mlls_em",
    ]));
    assert_eq!(v["stationary"], true, "{v}");
    assert_eq!(v["hessian_nsd"], true);
    assert_eq!(v["identifiable"], true);
    assert!(v["sigma_min"].as_f64().unwrap() > 0.0);
    assert!(v["bound_terms"]["total"].as_f64().unwrap() > 0.0);
    assert!(v["calibration_error"].as_f64().unwrap() < 0.05);
    assert!(v["sandwich"].is_object());
    assert_eq!(floats(&v["gradient"]).len(), 2);
}

#[test]
fn calibrate_reports_fit_and_rewrites_file() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sim");
    ok_json(&labelshift(&["simulate", "--output", s(&out), "--seed", "2", "--alpha", "1", "--m", "100", "--n-source", "4000"]));
    let rewritten = dir.path().join("calibrated.csv");
    let v = ok_json(&labelshift(&[
        "calibrate",
        "--source",
        s(&out.join("source.csv")),
        "--apply",
        s(&out.join("target.csv")),
        "--output",
        s(&rewritten),
        "--bins",
        "10",
    ]));
    assert_eq!(v["validation_size"], 2000);
    assert_eq!(v["converged"], true);
    assert!((v["temperature"].as_f64().unwrap() - 1.0).abs() < 0.2);
    assert!(v["calibration_error_after"].as_f64().unwrap() <= v["calibration_error_before"].as_f64().unwrap() + 0.01);
    let text = std::fs::read_to_string(rewritten).unwrap();
    assert_eq!(text.lines().count(), 101);
}

#[test]
fn non_convergence_exits_4_with_partial_result() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sim");
    ok_json(&labelshift(&["simulate", "--output", s(&out), "--seed", "4", "--target-marginal", "0.1,0.9", "--m", "300"]));
    let config = write_config(dir.path(), r#"{"method": {"max_iters": 1, "accelerate_em": false}}"#);
    let v = err_json(
        &labelshift(&[
            "estimate",
            "--config",
            s(&config),
            "--source",
            s(&out.join("source.csv")),
            "--target",
            s(&out.join("target.csv")),
            "--method",
            "mlls_em",
            "--no-calibration",
        ]),
        4,
    );
    assert_eq!(v["error"]["kind"], "convergence");
    assert_eq!(floats(&v["error"]["details"]["weights"]).len(), 2);
}

#[test]
fn input_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let (source, target) = bbse_instance(dir.path());
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "c0,c1\n0.5,oops\n").unwrap();
    err_json(&labelshift(&["estimate", "--source", s(&source), "--target", s(&bad)]), 2);

    let off = dir.path().join("off.csv");
    std::fs::write(&off, "c0,c1\n0.5,0.4\n").unwrap();
    err_json(&labelshift(&["estimate", "--source", s(&source), "--target", s(&off)]), 2);

    let unknown = write_config(dir.path(), r#"{"method": {"mthod": "bbse_hard"}}"#);
    err_json(&labelshift(&["estimate", "--config", s(&unknown), "--source", s(&source), "--target", s(&target)]), 2);

    let e = err_json(&labelshift(&["estimate", "--method", "nope", "--source", s(&source), "--target", s(&target)]), 2);
    assert!(e["error"]["message"].as_str().unwrap().contains("mlls_em"));

    // Target file used as source: no label column.
    err_json(&labelshift(&["estimate", "--source", s(&target), "--target", s(&target)]), 2);
    err_json(&labelshift(&["estimate", "--target", s(&target)]), 2);
    err_json(&labelshift(&["diagnose", "--source", s(&source), "--target", s(&target), "--weights", "1,2"]), 2);
}

#[test]
fn missing_input_file_is_io_error() {
    let dir = TempDir::new().unwrap();
    let (source, _) = bbse_instance(dir.path());
    err_json(&labelshift(&["estimate", "--source", s(&source), "--target", s(&dir.path().join("absent.csv"))]), 5);
}
