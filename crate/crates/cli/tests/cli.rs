use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn treegraph(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treegraph"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = treegraph(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Synthetic clouds plus a prepared dataset at `target` points.
fn prepared(dir: &Path, n_per_class: &str, target: &str) {
    ok(dir, &["synth", "--out", "raw", "--n-per-class", n_per_class, "--points", "300", "--seed", "2"]);
    ok(dir, &["preprocess", "--manifest", "raw/manifest.csv", "--out", "data", "--target-points", target]);
}

#[test]
fn synth_writes_sixty_clouds_in_three_classes() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "raw", "--n-per-class", "20", "--points", "64"]);
    let manifest = fs::read_to_string(dir.path().join("raw/manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 60);
    for class in ["conifer", "broadleaf", "shrub"] {
        assert_eq!(rows.iter().filter(|r| r.contains(&format!(",{class},"))).count(), 20);
    }
    assert!(dir.path().join("raw/run.json").exists());
    let too_few = treegraph(dir.path(), &["synth", "--out", "x", "--n-per-class", "3"]);
    assert!(!too_few.status.success());
}

fn write_cloud(path: &Path, n: usize, seed: usize) {
    let text: String = (0..n)
        .map(|i| {
            let t = (i * 7 + seed * 13) as f64;
            format!("{} {} {}\n", (t * 0.37).sin(), (t * 0.11).cos(), i as f64 / n as f64)
        })
        .collect();
    fs::write(path, text).unwrap();
}

#[test]
fn preprocess_counts_skips_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut manifest = String::from("path,class,split\n");
    for i in 0..10 {
        write_cloud(&d.join(format!("c{i}.xyz")), 1500, i);
        manifest.push_str(&format!("c{i}.xyz,{},{}\n", ["a", "b"][i % 2], if i < 8 { "train" } else { "test" }));
    }
    fs::write(d.join("m.csv"), &manifest).unwrap();
    let out = ok(d, &["preprocess", "--manifest", "m.csv", "--out", "p1"]);
    assert!(out.contains("wrote 8 train and 2 test samples of 1024 points"), "{out}");
    // header + 10 records of 1024 × 3 floats and a label
    assert_eq!(fs::metadata(d.join("p1/train.tgpc")).unwrap().len(), 16 + 8 * (1024 * 12 + 2));

    ok(d, &["preprocess", "--manifest", "m.csv", "--out", "p2"]);
    for f in ["train.tgpc", "test.tgpc", "classes.txt"] {
        assert_eq!(fs::read(d.join("p1").join(f)).unwrap(), fs::read(d.join("p2").join(f)).unwrap(), "{f}");
    }

    // One degenerate cloud out of eleven is tolerated and reported.
    fs::write(d.join("tiny.xyz"), "0 0 0\n1 0 0\n0 1 0\n").unwrap();
    fs::write(d.join("m2.csv"), format!("{manifest}tiny.xyz,a,train\n")).unwrap();
    let o = treegraph(d, &["preprocess", "--manifest", "m2.csv", "--out", "p3"]);
    assert!(o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("tiny.xyz") && err.contains("degenerate"), "{err}");

    // Two of twelve is over the limit.
    fs::write(d.join("m3.csv"), format!("{manifest}tiny.xyz,a,train\nmissing.xyz,b,train\n")).unwrap();
    assert!(!treegraph(d, &["preprocess", "--manifest", "m3.csv", "--out", "p4"]).status.success());
    assert!(!d.join("p4/train.tgpc").exists());
}

#[test]
fn eval_replays_best_training_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d, "6", "96");
    ok(d, &["train", "--data", "data", "--out", "run", "--epochs", "3", "--svg"]);
    for f in ["model.tgnw", "model.toml", "history.csv", "confusion.csv", "curves.svg", "run.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(d.join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    let best_oa = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);

    ok(d, &["eval", "--data", "data", "--checkpoint", "run/model.tgnw", "--out", "ev"]);
    let metrics = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    let oa: f64 = metrics.lines().find_map(|l| l.strip_prefix("oa,")).unwrap().parse().unwrap();
    assert_eq!(oa.to_bits(), best_oa.to_bits());

    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/run.json")).unwrap()).unwrap();
    assert_eq!(json["command"], "train");
    assert_eq!(json["config"]["train"]["epochs"], 3);
}

#[test]
fn sweep_rejects_bad_triples_and_writes_one_row_each() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = treegraph(d, &["sweep-k", "--data", "nowhere", "--triple", "20,20,50", "--out", "s.csv"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("k1 < k2 < k3"));

    prepared(d, "4", "64");
    ok(d, &["sweep-k", "--data", "data", "--triple", "5,20,30", "--triple", "5,20,50", "--epochs", "1", "--out", "sw/s.csv"]);
    let csv = fs::read_to_string(d.join("sw/s.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k1,k2,k3,oa,ba,kappa,epoch_time");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("5,20,30,") && lines[2].starts_with("5,20,50,"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d, "4", "64");
    fs::write(d.join("cfg.toml"), "[train]\nepochs = 1\nbatch_size = 4\n\n[model]\nvariant = \"dgcnn\"\n").unwrap();
    ok(d, &["train", "--data", "data", "--out", "r", "--config", "cfg.toml", "--epochs", "2"]);
    assert_eq!(fs::read_to_string(d.join("r/history.csv")).unwrap().lines().count(), 3);
    assert!(fs::read_to_string(d.join("r/model.toml")).unwrap().contains("variant = \"dgcnn\""));
}

#[test]
fn augment_preview_and_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_cloud(&d.join("c.xyz"), 200, 1);
    ok(d, &["augment-preview", "--input", "c.xyz", "--out", "a.xyz", "--svg", "a.svg", "--seed", "3"]);
    assert_eq!(fs::read_to_string(d.join("a.xyz")).unwrap().lines().count(), 200);
    assert!(fs::read_to_string(d.join("a.svg")).unwrap().contains("<circle"));

    let o = Command::new(env!("CARGO_BIN_EXE_treegraph"))
        .current_dir(d)
        .args(["augment-preview", "--input", "c.xyz", "--out", "b.xyz"])
        .env("TG_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!o.status.success());
}
