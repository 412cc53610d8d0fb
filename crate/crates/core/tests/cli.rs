use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmir::dataio::load_feature_file;

fn cmir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmir"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cmir(args);
    assert!(
        out.status.success(),
        "cmir {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    cmir(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec![
        "synth",
        "--classes",
        "3",
        "--per-class",
        "20",
        "--da",
        "6",
        "--db",
        "5",
        "--seed",
        "3",
        "--out",
        s(&out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

const SMALL: [&str; 10] = [
    "--set",
    "stage1_hidden=12",
    "--set",
    "z_dim=8",
    "--set",
    "encoder_hidden=8",
    "--epochs",
    "3",
    "--set",
    "batch_size=16",
];

#[test]
fn synth_counts_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("full");
    let args = [
        "synth",
        "--classes",
        "8",
        "--per-class",
        "200",
        "--da",
        "32",
        "--db",
        "16",
        "--sep",
        "10",
        "--seed",
        "1",
        "--out",
        s(&out),
    ];
    ok(&args);
    let a = load_feature_file(out.join("a.cmfv")).unwrap();
    let b = load_feature_file(out.join("b.cmfv")).unwrap();
    assert_eq!((a.len(), a.dim(), b.len(), b.dim()), (1600, 32, 1600, 16));
    let first = std::fs::read(out.join("a.cmfv")).unwrap();
    ok(&args);
    assert_eq!(std::fs::read(out.join("a.cmfv")).unwrap(), first);
}

#[test]
fn negative_separation_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["synth", "--sep", "-1", "--out", s(dir.path())]), 3);
}

#[test]
fn help_documents_exit_codes() {
    let help = ok(&["--help"]);
    assert!(help.contains("Exit codes"));
    assert!(help.contains("corrupt"));
}

#[test]
fn staged_pipeline_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let (a, b) = (data.join("a.cmfv"), data.join("b.cmfv"));
    let pre = dir.path().join("pre");
    let models = dir.path().join("models");
    let mut args = vec!["pretrain", "--a", s(&a), "--b", s(&b), "--out", s(&pre)];
    args.extend_from_slice(&SMALL);
    ok(&args);
    for f in [
        "stage1_a.cmm1",
        "stage1_b.cmm1",
        "stage1_a_history.csv",
        "stage1_b_history.csv",
        "pretrain.conf",
    ] {
        assert!(pre.join(f).exists(), "{f}");
    }

    let mut args = vec![
        "train",
        "--a",
        s(&a),
        "--b",
        s(&b),
        "--pretrained",
        s(&pre),
        "--out",
        s(&models),
        "--dv",
        "4",
        "--dv",
        "6",
    ];
    args.extend_from_slice(&SMALL);
    ok(&args);
    for f in [
        "embed_dv4.cmm2",
        "embed_dv6.cmm2",
        "history_dv4.csv",
        "train.conf",
    ] {
        assert!(models.join(f).exists(), "{f}");
    }
    let hist = std::fs::read_to_string(models.join("history_dv4.csv")).unwrap();
    assert_eq!(hist.lines().count(), 4);

    let mut args = vec![
        "eval",
        "--a",
        s(&a),
        "--b",
        s(&b),
        "--pretrained",
        s(&pre),
        "--models",
        s(&models),
        "--dv",
        "4",
        "--dv",
        "6",
        "--k",
        "1,5",
    ];
    args.extend_from_slice(&SMALL);
    ok(&args);
    let csv = std::fs::read_to_string(models.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    for dir in ["A2B", "B2A", "A2A", "B2B"] {
        assert!(lines[0].contains(&format!("{dir}_map")));
        assert!(lines[0].contains(&format!("{dir}_p@5")));
    }
    assert!(lines[1].starts_with("4,") && lines[2].starts_with("6,"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(models.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    assert!(json[0]["a2b"]["map"].is_number());

    let conf = std::fs::read_to_string(models.join("eval.conf")).unwrap();
    assert!(conf.contains("dv = 4,6"));
    assert!(conf.contains("lambda5 = "));

    let model = models.join("embed_dv4.cmm2");
    let mut args = vec![
        "retrieve",
        "--a",
        s(&a),
        "--b",
        s(&b),
        "--pretrained",
        s(&pre),
        "--model",
        s(&model),
        "--query-id",
        "7",
        "--k",
        "3",
        "--direction",
        "A2B",
    ];
    args.extend_from_slice(&SMALL);
    let out = ok(&args);
    let rows: Vec<Vec<&str>> = out
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 3, "{out}");
    let d: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]), "{d:?}");
    assert!(rows.iter().all(|r| r[0] == "7"));

    let mut held = vec![
        "retrieve",
        "--a",
        s(&a),
        "--b",
        s(&b),
        "--pretrained",
        s(&pre),
        "--model",
        s(&model),
        "--query-id",
        "2",
        "--k",
        "4",
        "--direction",
        "b2b",
        "--gallery",
        "heldout",
    ];
    held.extend_from_slice(&SMALL);
    let out = ok(&held);
    assert_eq!(out.lines().count(), 5);
    assert!(
        out.lines()
            .skip(1)
            .all(|l| l.split(',').nth(2) != Some("2")),
        "query retrieved itself"
    );
}

#[test]
fn end_to_end_mode_needs_no_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--regime", "unpaired", "--max-labels", "2"]);
    let out = dir.path().join("run");
    let (a, b) = (data.join("a.cmfv"), data.join("b.cmfv"));
    let mut args = vec![
        "run",
        "--a",
        s(&a),
        "--b",
        s(&b),
        "--out",
        s(&out),
        "--preset",
        "merced-like",
        "--regime",
        "unpaired",
        "--set",
        "end_to_end=true",
        "--dv",
        "4",
    ];
    args.extend_from_slice(&SMALL);
    ok(&args);
    assert!(out.join("report.csv").exists());
    assert!(!out.join("stage1_a.cmm1").exists());
}

#[test]
fn failures_map_to_documented_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let (a, b) = (data.join("a.cmfv"), data.join("b.cmfv"));
    let out = dir.path().join("x");

    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "colour = blue\n").unwrap();
    assert_eq!(
        code(&[
            "pretrain",
            "--a",
            s(&a),
            "--b",
            s(&b),
            "--out",
            s(&out),
            "--config",
            s(&conf)
        ]),
        3
    );
    assert_eq!(
        code(&[
            "pretrain",
            "--a",
            s(&a),
            "--b",
            s(&b),
            "--out",
            s(&out),
            "--set",
            "lr=-1"
        ]),
        3
    );
    assert_eq!(
        code(&[
            "pretrain",
            "--a",
            "/nonexistent/a.cmfv",
            "--b",
            s(&b),
            "--out",
            s(&out)
        ]),
        4
    );

    let corrupt = dir.path().join("corrupt.cmfv");
    let mut bytes = std::fs::read(&a).unwrap();
    bytes[0] = b'Z';
    std::fs::write(&corrupt, bytes).unwrap();
    assert_eq!(
        code(&[
            "pretrain",
            "--a",
            s(&corrupt),
            "--b",
            s(&b),
            "--out",
            s(&out)
        ]),
        5
    );

    assert_eq!(
        code(&["train", "--a", s(&a), "--b", s(&b), "--out", s(&out)]),
        3,
        "missing --pretrained"
    );
    assert_eq!(code(&["pretrain", "--a", s(&a)]), 2);
}
