use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nowcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn failed_with_one_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

const SMALL: &str = "synth_hours = 300\nlayer1_filters = 3\nlayer2_filters = 2\nmax_epochs = 2\ninput_length = 8\n";

#[test]
fn synth_output_passes_ingest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), SMALL).unwrap();
    ok(&nowcast(dir.path(), &["--config", "run.cfg", "synth"]));
    let msg = ok(&nowcast(dir.path(), &["--config", "run.cfg", "ingest", "out/synthetic.csv"]));
    assert!(msg.starts_with("ok: 300 hours"), "{msg}");
    assert!(dir.path().join("out/ingest_report.txt").exists());
}

#[test]
fn gradcheck_on_default_tiny_spec_is_small() {
    let dir = tempfile::tempdir().unwrap();
    let msg = ok(&nowcast(dir.path(), &["gradcheck", "--out", "g"]));
    let value: f64 = msg
        .strip_prefix("max relative error ")
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| panic!("unexpected output {msg}"));
    assert!(value < 1e-4, "{value}");
    assert!(dir.path().join("g/gradcheck.txt").exists());
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("timestamp_utc,row,col,observed_mm,predicted_mm\n");
    for h in 0..10 {
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let v = 0.5 * h as f64 + r as f64 + 0.1 * c as f64;
            csv.push_str(&format!("2020-01-01T{h:02}:00:00Z,{r},{c},{v},{v}\n"));
        }
    }
    fs::create_dir(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/predictions_lead6_testing.csv"), &csv).unwrap();
    ok(&nowcast(dir.path(), &["evaluate"]));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/metrics.json")).unwrap()).unwrap();
    let entries = json.as_array().expect("a list of entries");
    assert_eq!(entries.len(), 4);
    for e in entries {
        assert_eq!((e["cc"].as_f64(), e["nse"].as_f64(), e["nrmse"].as_f64()), (Some(1.0), Some(1.0), Some(0.0)), "{e}");
    }
    let text = fs::read_to_string(dir.path().join("out/metrics.txt")).unwrap();
    assert_eq!(text.matches("1.0000    1.0000    0.0000").count(), 4, "{text}");
}

#[test]
fn pipeline_leaves_inputs_untouched_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), SMALL).unwrap();
    ok(&nowcast(dir.path(), &["--config", "run.cfg", "--out", "data", "synth"]));
    let data = fs::read(dir.path().join("data/synthetic.csv")).unwrap();
    let cfg = ["--config", "run.cfg"];
    for cmd in [
        vec!["correlate", "data/synthetic.csv"],
        vec!["train", "--data", "data/synthetic.csv"],
        vec!["predict", "--data", "data/synthetic.csv"],
        vec!["evaluate"],
        vec!["report"],
    ] {
        ok(&nowcast(dir.path(), &[&cfg[..], &cmd[..]].concat()));
    }
    assert_eq!(fs::read(dir.path().join("data/synthetic.csv")).unwrap(), data);
    let first = fs::read(dir.path().join("out/metrics.json")).unwrap();
    ok(&nowcast(dir.path(), &[&cfg[..], &["evaluate"][..]].concat()));
    assert_eq!(fs::read(dir.path().join("out/metrics.json")).unwrap(), first);
    for f in [
        "checkpoint_lead6.txt",
        "train_log_lead6.txt",
        "correlation.csv",
        "correlation_advisory.txt",
        "predictions_lead6_training.csv",
        "predictions_lead6_testing.csv",
        "table2.txt",
        "plots/grid4_lead6_testing_scatter.svg",
        "plots/grid1_lead6_training_series.svg",
        "plots/grid2_lead6_testing.csv",
    ] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
    let preds = fs::read_to_string(dir.path().join("out/predictions_lead6_testing.csv")).unwrap();
    assert!(preds.starts_with("timestamp_utc,row,col,observed_mm,predicted_mm\n"));
}

#[test]
fn bad_inputs_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    failed_with_one_line(&nowcast(dir.path(), &["ingest", "missing.csv"]));
    failed_with_one_line(&nowcast(dir.path(), &["train"]));
    failed_with_one_line(&nowcast(dir.path(), &["evaluate", "--out", "empty"]));

    fs::write(dir.path().join("bad.cfg"), "lead = 6\ncolour = red\n").unwrap();
    let err = failed_with_one_line(&nowcast(dir.path(), &["--config", "bad.cfg", "--out", "never", "synth"]));
    assert!(err.contains("colour"));
    assert!(!dir.path().join("never").exists());

    fs::write(dir.path().join("neg.cfg"), "learning_rate = -0.1\n").unwrap();
    failed_with_one_line(&nowcast(dir.path(), &["--config", "neg.cfg", "--out", "never", "synth"]));
    assert!(!dir.path().join("never").exists());

    fs::write(dir.path().join("broken.csv"), "timestamp_utc,row,col,variable,value\nnot,a,valid,row,here\n").unwrap();
    let err = failed_with_one_line(&nowcast(dir.path(), &["ingest", "broken.csv"]));
    assert!(err.contains("line 2"), "{err}");
}
