//! Drives the installed binary through every subcommand on a small
//! synthetic problem and checks the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn rednet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rednet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = rednet(args);
    assert!(
        out.status.success(),
        "rednet {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_code(args: &[&str]) -> (i32, String) {
    let out = rednet(args);
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Accuracy printed as `accuracy 0.xxxxxx`.
fn parse_accuracy(stdout: &str) -> f64 {
    let line = stdout
        .lines()
        .find(|l| l.starts_with("accuracy "))
        .unwrap_or_else(|| panic!("no accuracy line in {stdout:?}"));
    line.trim_start_matches("accuracy ").parse().unwrap()
}

fn gen_data(dir: &Path, seed: u64) -> String {
    let data = s(&dir.join("data"));
    run_ok(&[
        "gen-data",
        "--seed",
        &seed.to_string(),
        "--n-class",
        "2",
        "--n-per-class",
        "25",
        "--height",
        "8",
        "--width",
        "8",
        "--noise",
        "0.4",
        "--out",
        &data,
    ]);
    data
}

fn train_teacher(dir: &Path, data: &str) -> String {
    let teacher = s(&dir.join("teacher"));
    run_ok(&[
        "train-teacher",
        "--data",
        data,
        "--arch",
        "mlp",
        "--hidden",
        "12",
        "--epochs",
        "10",
        "--out",
        &teacher,
    ]);
    format!("{teacher}/model.toml")
}

#[test]
fn gen_data_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = s(&dir.path().join("a"));
    let b = s(&dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&["gen-data", "--seed", "9", "--n-class", "3", "--n-per-class", "10", "--height", "6", "--width", "6", "--out", out]);
    }
    for name in ["train.nsds", "test.nsds"] {
        let x = std::fs::read(format!("{a}/{name}")).unwrap();
        let y = std::fs::read(format!("{b}/{name}")).unwrap();
        assert_eq!(x, y, "{name} differs for the same seed");
    }
}

#[test]
fn the_whole_toolchain_composes() {
    let dir = TempDir::new().unwrap();
    let data = gen_data(dir.path(), 1);
    let model = train_teacher(dir.path(), &data);

    let teacher_acc = parse_accuracy(&run_ok(&["eval", "--model", &model, "--data", &data]));
    assert!((0.0..=1.0).contains(&teacher_acc));

    let halves = s(&dir.path().join("halves"));
    let stdout = run_ok(&["split", "--model", &model, "--cut-layer", "2", "--out", &halves]);
    assert!(stdout.contains("pre: 2 layers"), "{stdout}");
    assert!(Path::new(&halves).join("pre.toml").is_file());
    assert!(Path::new(&halves).join("post.bin").is_file());

    let feats = s(&dir.path().join("feats"));
    let stdout = run_ok(&["features", "--model", &model, "--data", &data, "--cut-layer", "2", "--out", &feats]);
    assert!(stdout.contains("12 x 40"), "{stdout}");
    assert!(Path::new(&feats).join("features.nsds").is_file());

    let proj = s(&dir.path().join("proj"));
    run_ok(&["reduce", "--model", &model, "--data", &data, "--cut-layer", "2", "--rank", "6", "--reducer", "pod", "--center", "--out", &proj]);
    assert!(Path::new(&proj).join("projection.toml").is_file());

    let student = s(&dir.path().join("student"));
    run_ok(&["fit-head", "--model", &model, "--data", &data, "--cut-layer", "2", "--rank", "6", "--reducer", "pod", "--head", "pce", "--out", &student]);
    let epoch0 = parse_accuracy(&run_ok(&["eval", "--student", &student, "--data", &data]));

    let distilled = s(&dir.path().join("distilled"));
    let stdout = run_ok(&["distill", "--model", &model, "--data", &data, "--student", &student, "--epochs", "3", "--out", &distilled]);
    assert!(stdout.contains("final test accuracy"), "{stdout}");
    assert!(Path::new(&distilled).join("history.txt").is_file());
    let final_acc = parse_accuracy(&run_ok(&["eval", "--student", &distilled, "--data", &data]));
    assert!((0.0..=1.0).contains(&epoch0) && (0.0..=1.0).contains(&final_acc));
}

#[test]
fn pipeline_report_agrees_with_eval() {
    let dir = TempDir::new().unwrap();
    let data = gen_data(dir.path(), 4);
    let model = train_teacher(dir.path(), &data);

    let out = s(&dir.path().join("run"));
    let stdout = run_ok(&[
        "pipeline", "--model", &model, "--data", &data, "--cut-layer", "2", "--rank", "6",
        "--reducer", "pod", "--head", "fnn", "--hidden", "10", "--epochs", "3", "--seed", "5",
        "--out", &out,
    ]);
    assert!(stdout.contains("final accuracy:"), "{stdout}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{out}/report.json")).unwrap()).unwrap();
    let final_acc = report["final_accuracy"].as_f64().unwrap();
    let evaluated = parse_accuracy(&run_ok(&["eval", "--student", &out, "--data", &data]));
    assert_eq!(evaluated, final_acc);
    assert!(report.get("init_seconds").is_none(), "timings belong to report.txt only");

    let total = report["storage"]["total_bytes"].as_u64().unwrap();
    let parts = ["pre_model_bytes", "projection_bytes", "head_bytes"]
        .iter()
        .map(|k| report["storage"][k].as_u64().unwrap())
        .sum::<u64>();
    assert_eq!(total, parts);
}

#[test]
fn sweep_heads_writes_the_table() {
    let dir = TempDir::new().unwrap();
    let data = gen_data(dir.path(), 6);
    let model = train_teacher(dir.path(), &data);
    let out = s(&dir.path().join("sweep"));
    let stdout = run_ok(&[
        "sweep-heads", "--model", &model, "--data", &data, "--cut-layer", "2", "--rank", "6",
        "--reducer", "pod", "--head", "fnn", "--epochs", "1", "--head-fit-epochs", "20",
        "--widths", "5,10", "--depths", "1", "--out", &out,
    ]);
    let table = std::fs::read_to_string(format!("{out}/sweep.txt")).unwrap();
    assert_eq!(stdout, table);
    assert!(table.starts_with("# width depth epoch0 final head_bytes\n"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = TempDir::new().unwrap();
    let data = gen_data(dir.path(), 8);
    let model = train_teacher(dir.path(), &data);

    // 2: config errors, from clap and from the library alike.
    let (code, _) = run_code(&["pipeline", "--model", &model, "--data", &data, "--cut-layer", "2", "--reducer", "pod", "--head", "pce", "--out", &s(&dir.path().join("x1"))]);
    assert_eq!(code, 2, "missing --rank");
    let (code, stderr) = run_code(&["pipeline", "--model", &model, "--data", &data, "--cut-layer", "2", "--rank", "99", "--reducer", "pod", "--head", "pce", "--out", &s(&dir.path().join("x2"))]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("validate"), "{stderr}");
    let (code, _) = run_code(&["eval", "--data", &data]);
    assert_eq!(code, 2, "neither --model nor --student");

    // 3: missing or malformed inputs.
    let (code, _) = run_code(&["eval", "--model", &s(&dir.path().join("nope.toml")), "--data", &data]);
    assert_eq!(code, 3);
    let (code, _) = run_code(&["pipeline", "--model", &model, "--data", &s(&dir.path().join("nodata")), "--cut-layer", "2", "--rank", "6", "--reducer", "pod", "--head", "pce", "--out", &s(&dir.path().join("x3"))]);
    assert_eq!(code, 3);

    // 4: training failures.
    let student = s(&dir.path().join("student"));
    run_ok(&["fit-head", "--model", &model, "--data", &data, "--cut-layer", "2", "--rank", "6", "--reducer", "pod", "--head", "pce", "--out", &student]);
    let (code, stderr) = run_code(&["distill", "--model", &model, "--data", &data, "--student", &student, "--epochs", "2", "--lr", "1e18", "--out", &s(&dir.path().join("x4"))]);
    assert_eq!(code, 4, "{stderr}");
    assert!(stderr.contains("diverged"), "{stderr}");
}
