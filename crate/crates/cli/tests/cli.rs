use std::path::Path;
use std::process::{Command, Output};

fn sgr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgr"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .expect("run sgr")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: &str = "size=12\nk=6\nl=4\nd=8\nsteps=5\ntrain-scenes=3\neval-scenes=2\n";

#[test]
fn train_writes_report_params_metrics_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    ok(&sgr(&["train", "--config", "tiny.cfg", "--steps", "7", "--out", "run"], dir.path()));
    let run = dir.path().join("run");

    let report = json(&run.join("report.json"));
    assert_eq!(report["losses"].as_array().unwrap().len(), 7);
    let acc = report["evaluation"]["pixel_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let metrics = json(&run.join("metrics.json"));
    for key in ["s_class", "s_instance", "d_class", "d_instance", "images"] {
        assert!(metrics.get(key).is_some(), "{key}");
    }

    let model = json(&run.join("params.json"));
    assert_eq!(model["config"]["model"]["concepts"], 6);
    assert_eq!(model["config"]["steps"], 7);

    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 8);
    assert!(lines[7].starts_with("6,"));

    // a trained model evaluates, and a rendered scene reads back as input
    ok(&sgr(&["eval", "--params", "run/params.json", "--set", "eval-scenes=2", "--out", "ev"], dir.path()));
    let ev = json(&dir.path().join("ev/evaluation.json"));
    assert_eq!(ev["class_iou"].as_array().unwrap().len(), 4);

    ok(&sgr(&["render", "--params", "run/params.json", "--seed", "9", "--out", "img"], dir.path()));
    let masks = std::fs::read_dir(dir.path().join("img/masks")).unwrap().count();
    assert_eq!(masks, 6);
    assert!(dir.path().join("img/predicted_class.pgm").exists());

    let out = ok(&sgr(&["metrics", "--params", "run/params.json", "--scene", "img/scene", "--out", "m"], dir.path()));
    assert!(out.contains("s_class"));
    assert_eq!(json(&dir.path().join("m/metrics.json"))["images"].as_array().unwrap().len(), 1);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.cfg"), format!("{TINY}no-token-supervision=true\nbeta=0.5\n")).unwrap();
    ok(&sgr(&["train", "--config", "a.cfg", "--beta", "0", "--lr", "0.003", "--out", "r"], dir.path()));
    let cfg = &json(&dir.path().join("r/params.json"))["config"];
    assert_eq!(cfg["weights"]["beta"], 0.0);
    assert_eq!(cfg["lr"], 0.003);
    assert_eq!(cfg["supervision"], false);
    assert_eq!(cfg["steps"], 5);
}

#[test]
fn bad_settings_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "size=12\ncolour=red\n").unwrap();
    let out = sgr(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = sgr(&["eval", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--params"));

    let out = sgr(&["train", "--l", "40", "--set", "size=12"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn suites_report_and_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&sgr(&["oracle", "--trials", "30", "--out", "o"], dir.path()));
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 3);
    assert_eq!(json(&dir.path().join("o/oracle.json")).as_array().unwrap().len(), 3);

    let out = ok(&sgr(&["gradcheck", "--instances", "2", "--seed", "4", "--out", "g"], dir.path()));
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    assert_eq!(json(&dir.path().join("g/gradcheck.json")).as_array().unwrap().len(), 7);
}
