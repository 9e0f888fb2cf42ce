use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use egip_core::train::rmse;

struct Corpus {
    _dir: tempfile::TempDir,
    train: PathBuf,
    test: PathBuf,
}

fn egip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egip"))
        .args(args)
        .env_remove("EGIP_OUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let o = egip(&[
            "synth-gen",
            "--listeners",
            "4",
            "--clips-per-listener",
            "8",
            "--duration",
            "0.4",
            "--holdout",
            "L03",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Corpus {
            train: dir.path().join("train.jsonl"),
            test: dir.path().join("test.jsonl"),
            _dir: dir,
        }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let c = corpus();
    let mut args = vec!["train", "--manifest", s(&c.train), "--out", s(out)];
    if !extra.contains(&"--epochs") {
        args.extend(["--epochs", "2"]);
    }
    args.extend_from_slice(extra);
    egip(&args)
}

fn effective(out: &Path) -> toml::Table {
    std::fs::read_to_string(out.join("effective-config.toml")).unwrap().parse().unwrap()
}

fn single_error_line(o: &Output, class: &str) {
    let e = stderr(o);
    let errors: Vec<&str> = e.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(errors.len(), 1, "{e}");
    assert!(errors[0].starts_with(&format!("error[{class}]: ")), "{e}");
    assert_eq!(e.lines().last(), Some(errors[0]), "{e}");
}

#[test]
fn gradcheck_passes_and_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = egip(&["gradcheck", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let err: f64 = text
        .split("max relative error ")
        .nth(1)
        .and_then(|r| r.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4, "{text}");
}

#[test]
fn full_protocol_flags_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--epochs", "50", "--batch-size", "128", "--lr", "4e-5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = &effective(dir.path())["train"];
    assert_eq!(t["epochs"].as_integer(), Some(50));
    assert_eq!(t["batch_size"].as_integer(), Some(128));
    assert_eq!(t["lr"].as_float(), Some(4e-5));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("from-config");
    std::fs::write(&cfg, format!("out_dir = {:?}\n[train]\nepochs = 1\nseed = 5\n", s(&out))).unwrap();
    let c = corpus();
    let o = egip(&["--config", s(&cfg), "train", "--manifest", s(&c.train), "--epochs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = &effective(&out)["train"];
    assert_eq!(t["epochs"].as_integer(), Some(2));
    assert_eq!(t["seed"].as_integer(), Some(5));
}

#[test]
fn effective_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = train(&a, &["--threads", "1", "--seed", "3", "--enhancer", "oracle_clean"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c = corpus();
    let cfg = a.join("effective-config.toml");
    let o = egip(&["--threads", "1", "--config", s(&cfg), "train", "--manifest", s(&c.train), "--out", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["ensemble.json", "members/oracle_clean-fold0.ckpt", "members/oracle_clean-fold2.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_flags_are_usage_errors() {
    let o = egip(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    single_error_line(&o, "usage");
    let o = egip(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    single_error_line(&o, "usage");
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--lr=-1"]);
    assert_eq!(o.status.code(), Some(2));
    single_error_line(&o, "config");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let o = egip(&["--config", s(&cfg), "gradcheck"]);
    assert_eq!(o.status.code(), Some(2));
    single_error_line(&o, "config");
    let o = train(dir.path(), &["--enhancer", "nope"]);
    single_error_line(&o, "config");
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let ens = dir.path().join("ens");
    let o = train(&ens, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::remove_file(ens.join("members/identity-fold1.ckpt")).unwrap();
    let c = corpus();
    let o = egip(&["predict", "--ensemble", s(&ens), "--manifest", s(&c.test), "--out", s(&dir.path().join("p"))]);
    assert_eq!(o.status.code(), Some(1));
    single_error_line(&o, "io");
    let o = egip(&["predict", "--ensemble", "/nonexistent", "--manifest", s(&c.test), "--out", s(&dir.path().join("q"))]);
    single_error_line(&o, "io");
}

#[test]
fn evaluate_writes_parseable_consistent_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ens = dir.path().join("ens");
    assert!(train(&ens, &[]).status.success());
    let c = corpus();
    let out = dir.path().join("eval");
    let o = egip(&["evaluate", "--ensemble", s(&ens), "--manifest", s(&c.test), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(json["n"], 8);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("clip_id,target,prediction"));
    let (mut t, mut p) = (Vec::new(), Vec::new());
    for (line, row) in lines.zip(rows) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], row["clip_id"].as_str().unwrap());
        t.push(f[1].parse::<f64>().unwrap());
        p.push(f[2].parse::<f64>().unwrap());
        assert_eq!(p.last().copied(), row["prediction"].as_f64());
    }
    assert!((rmse(&p, &t).unwrap() - json["rmse"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn predict_scores_selected_clips() {
    let dir = tempfile::tempdir().unwrap();
    let ens = dir.path().join("ens");
    assert!(train(&ens, &[]).status.success());
    let c = corpus();
    let out = dir.path().join("p");
    let o = egip(&[
        "predict", "--ensemble", s(&ens), "--manifest", s(&c.test), "--clip", "L03_0002", "--clip", "L03_0005", "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let ids: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["L03_0002", "L03_0005"]);
    let o = egip(&["predict", "--ensemble", s(&ens), "--manifest", s(&c.test), "--clip", "zzz", "--out", s(&out)]);
    single_error_line(&o, "contract");
}

#[test]
fn augment_adds_pairs_and_merges() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus();
    let out = dir.path().join("aug");
    let o = egip(&[
        "augment", "--manifest", s(&c.train), "--per-listener", "5", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("augmented.jsonl")).unwrap();
    let n = text.lines().filter(|l| l.contains("\"sources\"")).count();
    assert_eq!(n, 3 * 5);
    let o = egip(&["augment", "--manifest", s(&c.train), "--no-two-clips", "--nh", s(&c.train), "--out", s(&out)]);
    single_error_line(&o, "contract");
}
