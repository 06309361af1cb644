use std::path::Path;
use std::process::{Command, Output};

fn countshift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_countshift"))
        .args(args)
        .env("COUNTSHIFT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = countshift(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, domain: &str, n: &str, seed: &str) {
    ok(&["gen", "--domain", domain, "--n", n, "--size", "64", "--seed", seed, "--out", p(dir)]);
}

fn manifest_without_timing(dir: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("run.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timing");
    v
}

#[test]
fn gen_with_zero_images_is_a_valid_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    gen(&out, "target", "0", "1");
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["domain"], "target");
    for split in ["train", "val", "test"] {
        assert_eq!(m["splits"][split].as_array().unwrap().len(), 0);
    }
    assert!(out.join("run.json").exists());
}

#[test]
fn unknown_flag_is_a_usage_error_naming_the_token() {
    let out = countshift(&["gen", "--domain", "source", "--n", "1", "--out", "x", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus-flag"));
}

#[test]
fn out_of_range_numbers_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "source", "3", "1");
    let out = countshift(&[
        "train-source", "--data", p(dir.path()), "--epochs", "1", "--batch", "0", "--out", p(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_source_annotation_is_a_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "source", "5", "2");
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    let id = m["splits"]["train"][0].as_str().unwrap();
    std::fs::remove_file(dir.path().join(format!("{id}.json"))).unwrap();
    let out = countshift(&["train-source", "--data", p(dir.path()), "--epochs", "1", "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(id));
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "source", "5", "3");
    let out = countshift(&[
        "train-source", "--data", p(dir.path()), "--epochs", "3", "--lr", "1e300", "--batch", "1",
        "--out", p(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

/// gen → train-source → dma → cwi → cai → eval, in `root`.
fn pipeline(root: &Path) -> Vec<u8> {
    let (s, t) = (root.join("src"), root.join("tgt"));
    gen(&s, "source", "10", "11");
    gen(&t, "target", "10", "12");
    let src_model = root.join("m_src");
    ok(&[
        "train-source", "--data", p(&s), "--epochs", "1", "--lr", "1e-3", "--batch", "4", "--seed", "3",
        "--out", p(&src_model),
    ]);
    let mut model = src_model.join("model.bin");
    for stage in ["dma", "cwi", "cai"] {
        let out = root.join(format!("m_{stage}"));
        ok(&[
            "adapt", "--stage", stage, "--model", p(&model), "--source", p(&s), "--target", p(&t), "--epochs", "1",
            "--lr", "1e-4", "--batch", "4", "--seed", "3", "--out", p(&out),
        ]);
        model = out.join("model.bin");
    }
    let ev = root.join("eval");
    ok(&["eval", "--model", p(&model), "--data", p(&t), "--out", p(&ev), "--dump-maps"]);
    assert!(ev.join("maps").read_dir().unwrap().next().is_some());
    let mut bytes = std::fs::read(ev.join("eval.csv")).unwrap();
    bytes.extend(std::fs::read(ev.join("eval_summary.json")).unwrap());
    bytes
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ea = pipeline(a.path());
    let eb = pipeline(b.path());
    assert_eq!(ea, eb);
    for sub in ["m_src", "m_dma", "m_cwi", "m_cai"] {
        let (x, y) = (a.path().join(sub), b.path().join(sub));
        assert_eq!(std::fs::read(x.join("model.bin")).unwrap(), std::fs::read(y.join("model.bin")).unwrap());
        assert_eq!(std::fs::read(x.join("train_log.csv")).unwrap(), std::fs::read(y.join("train_log.csv")).unwrap());
    }
    // same paths, same everything except wall-clock
    let again = a.path().join("again");
    std::fs::create_dir_all(&again).unwrap();
    let s = a.path().join("src");
    ok(&[
        "train-source", "--data", p(&s), "--epochs", "1", "--lr", "1e-3", "--batch", "4", "--seed", "3",
        "--out", p(&again),
    ]);
    ok(&[
        "train-source", "--data", p(&s), "--epochs", "1", "--lr", "1e-3", "--batch", "4", "--seed", "3",
        "--out", p(&a.path().join("m_src")),
    ]);
    let first = manifest_without_timing(&a.path().join("m_src"));
    assert_eq!(first["outputs"]["model"]["sha256"], manifest_without_timing(&again)["outputs"]["model"]["sha256"]);
}

#[test]
fn cai_without_lambda2_matches_cwi() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("src"), dir.path().join("tgt"));
    gen(&s, "source", "8", "21");
    gen(&t, "target", "8", "22");
    let m0 = dir.path().join("m0");
    ok(&["train-source", "--data", p(&s), "--epochs", "1", "--batch", "4", "--seed", "5", "--out", p(&m0)]);
    let model = m0.join("model.bin");
    let run = |stage: &str, out: &Path| {
        ok(&[
            "adapt", "--stage", stage, "--model", p(&model), "--source", p(&s), "--target", p(&t), "--lambda2", "0",
            "--epochs", "1", "--batch", "4", "--seed", "5", "--out", p(out),
        ]);
        std::fs::read(out.join("model.bin")).unwrap()
    };
    assert_eq!(run("cwi", &dir.path().join("cwi")), run("cai", &dir.path().join("cai")));
}

#[test]
fn sweep_writes_table_and_selection() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("src"), dir.path().join("tgt"));
    gen(&s, "source", "8", "31");
    gen(&t, "target", "10", "32");
    let m0 = dir.path().join("m0");
    ok(&["train-source", "--data", p(&s), "--epochs", "1", "--batch", "4", "--seed", "5", "--out", p(&m0)]);
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"{"alpha": [0.1, 1.0], "lambda1": [45.0], "lambda2": [0.038461538461538464, 1.0]}"#).unwrap();
    let out = dir.path().join("sweep");
    ok(&[
        "sweep", "--model", p(&m0.join("model.bin")), "--source", p(&s), "--target", p(&t), "--grid", p(&grid),
        "--subset-frac", "0.5", "--epochs", "1", "--batch", "4", "--out", p(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "experiment,parameters,mre,omega");
    assert_eq!(lines.len(), 6);
    assert!(lines[5].starts_with("L_CAI,\"alpha = "));
    assert!(lines[4].contains("lambda2 = 1/26"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(report["complete"], true);
    let selected = report["rows"].as_array().unwrap().iter().filter(|r| r["selected"] == true).count();
    assert_eq!(selected, 3);
}

#[test]
fn bad_grid_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"{"alpha": [0.1], "gamma": [1]}"#).unwrap();
    gen(&dir.path().join("s"), "source", "4", "1");
    let m0 = dir.path().join("m0");
    ok(&["train-source", "--data", p(&dir.path().join("s")), "--epochs", "1", "--out", p(&m0)]);
    let out = countshift(&[
        "sweep", "--model", p(&m0.join("model.bin")), "--source", p(&dir.path().join("s")), "--target",
        p(&dir.path().join("s")), "--grid", p(&grid), "--out", p(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
