use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nunet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nunet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("NUNET_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn synth_is_deterministic_and_rejects_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&nunet(&["synth", "--n", "10", "--seed", "7", "--out", "a"], d));
    ok(&nunet(&["synth", "--n", "10", "--seed", "7", "--out", "b"], d));
    let (a, b) = (tree(&d.join("a")), tree(&d.join("b")));
    assert_eq!(a.len(), 1 + 2 + 20);
    assert_eq!(a, b);

    let out = nunet(&["synth", "--n", "0", "--out", "z"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_summary_matches_metadata_range() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&nunet(&["synth", "--n", "12", "--seed", "3", "--out", "d"], dir.path()));
    let rows = read_csv(&dir.path().join("d/metadata.csv"));
    let mass: Vec<f64> = rows[1..].iter().map(|r| r[2].parse().unwrap()).collect();
    let lo = mass.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mass.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let line = stdout.lines().find(|l| l.starts_with("mass")).unwrap();
    let printed: Vec<f64> = line.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
    assert!((printed[0] - lo).abs() < 5e-5, "{printed:?} vs {lo}");
    assert!((printed[1] - hi).abs() < 5e-5, "{printed:?} vs {hi}");
}

#[test]
fn gradcheck_passes_on_default_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&nunet(&["gradcheck"], dir.path()));
    assert_eq!(stdout.lines().filter(|l| l.ends_with(" ok")).count(), 16, "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn train_eval_contrib_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&nunet(&["synth", "--n", "10", "--seed", "1", "--out", "data"], d));
    fs::write(d.join("cfg.json"), r#"{"train": {"epochs": 2, "batch_size": 4, "checkpoint_every": 1}}"#).unwrap();
    ok(&nunet(&["train", "--config", "cfg.json", "--data", "data", "--out", "run"], d));
    for f in ["train_log.csv", "model.ckpt", "checkpoint_epoch0001.ckpt", "checkpoint_epoch0002.ckpt", "config.resolved.json"] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }
    assert_eq!(read_csv(&d.join("run/train_log.csv")).len(), 3);

    // same seed and config: identical checkpoint bytes
    ok(&nunet(&["train", "--config", "cfg.json", "--data", "data", "--out", "run2"], d));
    assert_eq!(fs::read(d.join("run/model.ckpt")).unwrap(), fs::read(d.join("run2/model.ckpt")).unwrap());

    ok(&nunet(&["eval", "--checkpoint", "run/model.ckpt", "--data", "data", "--out", "ev"], d));
    let rows = read_csv(&d.join("ev/eval.csv"));
    assert_eq!(rows[0], ["nutrient", "mae", "mape"]);
    assert_eq!(rows.len(), 7);
    assert!(d.join("ev/config.resolved.json").is_file());

    ok(&nunet(&["eval", "--checkpoint", "run/model.ckpt", "--data", "data", "--out", "or", "--oracle-predictions"], d));
    for row in &read_csv(&d.join("or/eval.csv"))[1..] {
        assert_eq!(row[2].parse::<f64>().unwrap(), 0.0, "{row:?}");
    }

    ok(&nunet(
        &["eval", "--checkpoint", "run/model.ckpt", "--data", "data", "--config", "run/config.resolved.json"],
        d,
    ));
    fs::write(d.join("other.json"), r#"{"model": {"init_seed": 99, "auto": 1}}"#).unwrap();
    let bad = nunet(&["eval", "--checkpoint", "run/model.ckpt", "--data", "data", "--config", "other.json"], d);
    assert_eq!(bad.status.code(), Some(2));
    fs::write(d.join("other.json"), r#"{"model": {"init_seed": 99, "window_size": 2}}"#).unwrap();
    let bad = nunet(&["eval", "--checkpoint", "run/model.ckpt", "--data", "data", "--config", "other.json"], d);
    assert_eq!(bad.status.code(), Some(2));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("init_seed") && err.contains("window_size"), "{err}");

    ok(&nunet(&["contrib", "--checkpoint", "run/model.ckpt", "--data", "data", "--split", "train"], d));
    let rows = read_csv(&d.join("run/contrib.csv"));
    assert_eq!(rows[0], ["scale", "calorie", "mass", "fat", "carb", "protein"]);
    assert_eq!(rows.len(), 6);
    for j in 1..=5 {
        let sum: f64 = rows[1..].iter().map(|r| r[j].parse::<f64>().unwrap()).sum();
        assert!((sum - 100.0).abs() < 1e-6, "{sum}");
    }
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&nunet(&["synth", "--n", "6", "--seed", "2", "--out", "data"], d));
    fs::write(d.join("cfg.json"), r#"{"train": {"epochs": 1, "batch_size": 5}}"#).unwrap();
    let stdout = ok(&nunet(
        &["ablate", "--config", "cfg.json", "--data", "data", "--out", "ab", "--variants", "fe-plain-concat,single-scale"],
        d,
    ));
    assert!(stdout.contains("single-scale"));
    let rows = read_csv(&d.join("ab/ablate.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], "fe-plain-concat");
    assert!(d.join("ab/config.resolved.json").is_file());

    let bad = nunet(&["ablate", "--config", "cfg.json", "--data", "data", "--out", "ab", "--variants", "nope"], d);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(nunet(&["train", "--bogus"], d).status.code(), Some(2));
    assert_eq!(nunet(&["train", "--out", "x"], d).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_nunet"))
        .args(["gradcheck"])
        .current_dir(d)
        .env("NUNET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // missing data root is a runtime failure
    assert_eq!(nunet(&["train", "--data", "missing", "--out", "x"], d).status.code(), Some(1));
}
