use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cosplace::config::RunConfig;
use cosplace::embed::EmbeddingModel;
use cosplace::experiment::run_synthetic;
use tempfile::TempDir;

fn cosplace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cosplace")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cosplace(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: &str, exit: i32) -> String {
    let out = cosplace(args);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(out.status.code(), Some(exit), "{args:?}: {err}");
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{code}]: ")), "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Desk preset with a shorter schedule, written as a config file.
fn short_config(dir: &Path) -> (RunConfig, PathBuf) {
    let mut cfg = RunConfig::desk();
    cfg.train.total_epochs = 4;
    cfg.train.iterations_per_epoch = 100;
    let path = dir.join("short.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    (cfg, path)
}

struct World {
    _dir: TempDir,
    root: PathBuf,
}

impl World {
    fn new(global: &[&str]) -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let out = root.join("w");
        let mut args = global.to_vec();
        args.extend(["synth", "--out-dir", s(&out)]);
        ok(&args);
        Self { _dir: dir, root }
    }

    fn file(&self, name: &str) -> String {
        self.root.join("w").join(name).to_str().unwrap().to_owned()
    }

    fn train(&self, global: &[&str], out: &str, extra: &[&str]) -> (PathBuf, Output) {
        let out_dir = self.root.join(out);
        let (m, v, q, f) = (self.file("train.csv"), self.file("val_db.csv"), self.file("val_queries.csv"), self.file("features.bin"));
        let mut args = global.to_vec();
        args.extend(["train", "--manifest", &m, "--val-db", &v, "--val-queries", &q, "--features", &f, "--out-dir", s(&out_dir)]);
        args.extend(extra);
        let output = cosplace(&args);
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
        (out_dir, output)
    }

    fn eval_args(&self) -> Vec<String> {
        [
            "--db-manifest",
            &self.file("database.csv"),
            "--db-features",
            &self.file("features.bin"),
            "--query-manifest",
            &self.file("queries.csv"),
            "--query-features",
            &self.file("queries.bin"),
        ]
        .map(String::from)
        .to_vec()
    }

    fn eval_json(&self, global: &[&str], extra: &[&str]) -> serde_json::Value {
        let json = self.root.join("eval.json");
        let mut args: Vec<&str> = global.to_vec();
        args.push("eval");
        let base = self.eval_args();
        args.extend(base.iter().map(String::as_str));
        args.extend(extra);
        args.extend(["--json", s(&json)]);
        ok(&args);
        serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap()
    }
}

fn recall(doc: &serde_json::Value, method: &str, k: usize) -> f64 {
    let reports = doc["reports"].as_array().unwrap();
    let r = reports.iter().find(|r| r["method"] == method).unwrap();
    r["report"]["recall_at"][k.to_string()].as_f64().unwrap()
}

#[test]
fn convert_adds_utm_and_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.csv");
    fs::write(&input, "id,lat,lon,heading\na,37.7749,-122.4194,90\nb,37.7750,-122.4190,180\n").unwrap();
    let once = dir.path().join("once.csv");
    let twice = dir.path().join("twice.csv");
    ok(&["convert", "--input", s(&input), "--output", s(&once)]);
    let text = fs::read_to_string(&once).unwrap();
    assert!(text.starts_with("id,east,north,heading,zone,lat,lon\n"), "{text}");
    assert!(text.contains("a,551130.76"), "{text}");
    ok(&["convert", "--input", s(&once), "--output", s(&twice)]);
    assert_eq!(fs::read(&once).unwrap(), fs::read(&twice).unwrap());
}

#[test]
fn convert_rejects_mixed_zones() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.csv");
    fs::write(&input, "id,lat,lon,heading\na,37.77,-122.42,0\nb,40.71,-74.00,0\n").unwrap();
    let out = dir.path().join("out.csv");
    let err = fails(&["convert", "--input", s(&input), "--output", s(&out)], "E_MIXED_ZONES", 1);
    assert!(err.contains("line"), "{err}");
    assert!(!out.exists());
}

#[test]
fn partition_reports_fifty_groups_and_is_stable() {
    let w = World::new(&["--desk"]);
    let manifest = w.file("train.csv");
    let a = w.root.join("a.json");
    let b = w.root.join("b.json");
    let table = ok(&["partition", "--manifest", &manifest, "--output", s(&a)]);
    assert!(table.starts_with("groups: 50 "), "{table}");
    let first = fs::read(&a).unwrap();
    ok(&["partition", "--manifest", &manifest, "--output", s(&a)]);
    assert_eq!(first, fs::read(&a).unwrap());

    let all = ok(&["partition", "--manifest", &manifest, "--output", s(&b), "--min-images", "0"]);
    assert!(all.contains("classes: 400 retained, 0 discarded"), "{all}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&b).unwrap()).unwrap();
    assert!(json["provenance"].as_str().unwrap().contains("min_images_per_class = 0"));
}

#[test]
fn cli_pipeline_matches_the_library_run() {
    let w = World::new(&["--desk"]);
    let (out, _) = w.train(&["--desk"], "run", &[]);
    for f in ["model.bin", "training.ckpt", "history.csv", "run.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let run = run_synthetic(&RunConfig::desk()).unwrap();
    let model = EmbeddingModel::load(fs::File::open(out.join("model.bin")).unwrap()).unwrap();
    assert_eq!(model, run.exported);

    let ckpt = s(&out.join("model.bin")).to_owned();
    let oracle = w.file("oracle.bin");
    let doc = w.eval_json(&["--desk"], &["--checkpoint", &ckpt, "--baseline", "--oracle", &oracle]);
    assert_eq!(recall(&doc, "trained", 1), run.outcome.trained.recall(1).unwrap());
    assert_eq!(recall(&doc, "random-init", 1), run.outcome.baseline.recall(1).unwrap());
    assert_eq!(recall(&doc, "oracle", 1), 1.0);
    assert!(doc["config"].as_str().unwrap().contains("[train]"));
}

#[test]
fn oracle_row_is_perfect() {
    let w = World::new(&["--desk"]);
    let mut args = vec!["--desk".to_string(), "eval".into(), "--oracle".into(), w.file("oracle.bin")];
    args.extend(w.eval_args());
    let table = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let row = table.lines().find(|l| l.starts_with("oracle")).unwrap();
    assert_eq!(row.split_whitespace().nth(1), Some("100.0"), "{table}");
}

#[test]
fn recall_grows_with_threshold() {
    let w = World::new(&["--desk"]);
    let mut last = 0.0;
    for thr in ["0", "5", "25", "100", "2000"] {
        let doc = w.eval_json(&["--desk"], &["--baseline", "--threshold", thr, "--ks", "1,5"]);
        let r1 = recall(&doc, "random-init", 1);
        assert!(r1 >= last, "threshold {thr}: {r1} < {last}");
        assert!(recall(&doc, "random-init", 5) >= r1);
        last = r1;
    }
    assert_eq!(last, 1.0);
}

#[test]
fn fixed_seed_reproduces_history_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let (_, cfg) = short_config(dir.path());
    let g = ["--config", s(&cfg), "--seed", "7", "--deterministic"];
    let w = World::new(&g);
    // same output directory both times: the echoed config records it
    let (out, _) = w.train(&[&g[..], &["--threads", "1"]].concat(), "run", &[]);
    let history = fs::read(out.join("history.csv")).unwrap();
    let model = fs::read(out.join("model.bin")).unwrap();
    fs::remove_dir_all(&out).unwrap();
    w.train(&[&g[..], &["--threads", "3"]].concat(), "run", &[]);
    assert_eq!(history, fs::read(out.join("history.csv")).unwrap());
    assert!(String::from_utf8_lossy(&history).contains("seed = 7"));
    assert_eq!(model, fs::read(out.join("model.bin")).unwrap());
}

#[test]
fn resume_continues_where_it_stopped() {
    let dir = TempDir::new().unwrap();
    let (_, cfg) = short_config(dir.path());
    let g = ["--config", s(&cfg)];
    let w = World::new(&g);
    let (out, _) = w.train(&g, "run", &[]);
    let files = ["model.bin", "training.ckpt", "history.csv"];
    let straight: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    fs::remove_dir_all(&out).unwrap();
    w.train(&g, "run", &["--epochs", "2"]);
    w.train(&g, "run", &["--resume"]);
    for (f, bytes) in files.iter().zip(&straight) {
        assert_eq!(bytes, &fs::read(out.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn one_group_logs_the_cosface_note() {
    let dir = TempDir::new().unwrap();
    let (_, cfg) = short_config(dir.path());
    let g = ["--config", s(&cfg)];
    let w = World::new(&g);
    let (out, output) = w.train(&g, "g1", &["--groups", "1", "--epochs", "1"]);
    assert!(String::from_utf8_lossy(&output.stderr).contains("plain CosFace"));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.contains("groups_used = 1"));
}

#[test]
fn sweep_over_group_counts_emits_one_row_each() {
    let dir = TempDir::new().unwrap();
    let (_, cfg) = short_config(dir.path());
    let out = dir.path().join("sweep.csv");
    ok(&["--config", s(&cfg), "sweep", "--dimension", "groups_used", "--values", "1,2,4,8", "--output", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "dimension,value,trained_r@1,trained_r@5,trained_r@10,trained_r@20,baseline_r@1,oracle_r@1,best_epoch");
    assert_eq!(rows.len(), 5);
    for (row, v) in rows[1..].iter().zip(["1", "2", "4", "8"]) {
        assert!(row.starts_with(&format!("groups_used,{v},")), "{row}");
    }
}

#[test]
fn sweep_row_matches_its_own_train_run() {
    let dir = TempDir::new().unwrap();
    let (_, cfg) = short_config(dir.path());
    let g = ["--config", s(&cfg)];
    let out = dir.path().join("sweep.csv");
    ok(&[&g[..], &["sweep", "--dimension", "N", "--values", "3", "--output", s(&out)]].concat());
    let text = fs::read_to_string(&out).unwrap();
    let row: Vec<&str> = text.lines().last().unwrap().split(',').collect();

    let w = World::new(&g);
    let (run, _) = w.train(&g, "n3", &["--spatial-groups", "3"]);
    let ckpt = s(&run.join("model.bin")).to_owned();
    let doc = w.eval_json(&g, &["--checkpoint", &ckpt, "--baseline"]);
    assert_eq!(row[2].parse::<f64>().unwrap(), recall(&doc, "trained", 1));
    assert_eq!(row[6].parse::<f64>().unwrap(), recall(&doc, "random-init", 1));
}

#[test]
fn usage_and_config_errors_are_single_lines() {
    fails(&["sweep", "--dimension", "groups_used", "--values", ""], "E_USAGE", 2);
    fails(&["sweep", "--dimension", "N", "--values", "two"], "E_USAGE", 2);
    fails(&["frobnicate"], "E_USAGE", 2);

    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rat = 0.1\n").unwrap();
    fails(&["--config", s(&bad), "synth", "--out-dir", s(dir.path())], "E_CONFIG", 1);

    let missing = dir.path().join("nope.csv");
    fails(&["partition", "--manifest", s(&missing), "--output", s(&dir.path().join("p.json"))], "E_IO", 1);

    let m = dir.path().join("m.csv");
    fs::write(&m, "id,east,north,heading\na,0,0,0\n").unwrap();
    fails(
        &["train", "--manifest", s(&m), "--features", s(&m), "--partition", s(&m), "--out-dir", s(dir.path())],
        "E_USAGE",
        2,
    );
}

#[test]
fn config_paths_stand_in_for_flags() {
    let w = World::new(&["--desk"]);
    let mut cfg = RunConfig::desk();
    cfg.paths.manifest = Some(w.file("train.csv").into());
    cfg.paths.partition = Some(w.root.join("from_config.json"));
    let path = w.root.join("paths.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    let table = ok(&["--config", s(&path), "partition"]);
    assert!(table.starts_with("groups: 50 "));
    assert!(w.root.join("from_config.json").exists());
    fails(&["partition", "--output", s(&w.root.join("x.json"))], "E_USAGE", 2);
}
