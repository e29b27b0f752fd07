use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use m2vae::datasets::Dataset;
use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_m2vae");

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("M2VAE_OUTPUT_ROOT", dir.join("runs"))
        .env("RAYON_NUM_THREADS", "1")
        .output()
        .expect("running m2vae")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn jsonl(path: &Path) -> Vec<Value> {
    read(path).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

const SMALL: &str = r#"
[data.synthetic]
users = 40
items = 30
interactions_per_user = 6

[train]
dim = 8
epochs = 3
batch_size = 16
"#;

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let dir = TempDir::new().unwrap();
    let args = |out: &str| {
        vec!["synth", "--out", out, "--users", "30", "--items", "20", "--seed", "3"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>()
    };
    for out in ["a", "b"] {
        let a = args(out);
        let o = run(&a.iter().map(String::as_str).collect::<Vec<_>>(), dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["interactions.tsv", "attributes.tsv", "features.bin"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let d = dir.path().join("a");
    let ds = Dataset::load(
        &d.join("interactions.tsv"),
        &d.join("attributes.tsv"),
        &d.join("features.bin"),
        None,
    )
    .unwrap();
    assert_eq!(ds.catalog.item_count(), ds.log.item_count);
    assert!(ds.log.len() >= 30);
}

#[test]
fn synth_rejects_zero_clusters() {
    let dir = TempDir::new().unwrap();
    let o = run(&["synth", "--out", "x", "--clusters", "0"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_data_file_fails_before_training() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "[data]\ninteractions = \"nope.tsv\"\nattributes = \"nope.tsv\"\nfeatures = \"nope.bin\"\n",
    );
    let o = run(&["train", "--config", &cfg, "--out", "t"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.tsv"), "{}", stderr(&o));
    assert!(!dir.path().join("t").join("checkpoint.m2vc").exists());
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[train]\ndimension = 8\n");
    let o = run(&["train", "--config", &cfg], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dimension"), "{}", stderr(&o));
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(&["train", "--config", &cfg, "--out", "full"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(
        &["train", "--config", &cfg, "--out", "split", "--stop-after", "1"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(jsonl(&dir.path().join("split/epochs.jsonl")).len(), 1);
    let o = run(&["train", "--config", &cfg, "--out", "split", "--resume"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["epochs.jsonl", "checkpoint.m2vc", "eval_test.jsonl"] {
        let a = std::fs::read(dir.path().join("full").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("split").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn eval_is_deterministic_and_matches_training() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(code(&run(&["train", "--config", &cfg, "--out", "t"], dir.path())), 0);
    let ckpt = dir.path().join("t/checkpoint.m2vc");
    let ckpt = ckpt.to_str().unwrap();
    let o1 = run(&["eval", "--checkpoint", ckpt, "--out", "e1"], dir.path());
    let o2 = run(&["eval", "--checkpoint", ckpt, "--out", "e2"], dir.path());
    assert_eq!(code(&o1), 0, "{}", stderr(&o1));
    assert_eq!(o1.stdout, o2.stdout);
    let trained = read(&dir.path().join("t/eval_test.jsonl"));
    assert_eq!(read(&dir.path().join("e1/eval_test.jsonl")), trained);

    let v = run(
        &["eval", "--checkpoint", ckpt, "--part", "validation", "--out", "e1"],
        dir.path(),
    );
    assert_eq!(code(&v), 0, "{}", stderr(&v));
    let rows = jsonl(&dir.path().join("e1/eval_validation.jsonl"));
    assert_eq!(rows[0]["part"], "validation");
}

#[test]
fn ablate_table_has_one_row_per_variant_and_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}epochs = 1\n").replace("epochs = 3\n", ""));
    let o = run(
        &[
            "ablate",
            "--config",
            &cfg,
            "--out",
            "ab",
            "--variants",
            "full,wo_dcl",
            "--seeds",
            "0,1",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let runs = jsonl(&dir.path().join("ab/runs.jsonl"));
    assert_eq!(runs.len(), 4);
    let summary = jsonl(&dir.path().join("ab/ablation.jsonl"));
    assert_eq!(summary.len(), 2);
    let table = read(&dir.path().join("ab/ablation.txt"));
    assert!(table.contains("full") && table.contains("wo_dcl"));

    let bad = run(&["ablate", "--config", &cfg, "--variants", "full,no_such"], dir.path());
    assert_eq!(code(&bad), 2);
    let err = stderr(&bad);
    assert!(err.contains("no_such") && err.contains("wo_common"), "{err}");
}

#[test]
fn sweep_runs_once_per_value() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("epochs = 3", "epochs = 1"));
    let o = run(
        &[
            "sweep",
            "--config",
            &cfg,
            "--out",
            "sw",
            "--parameter",
            "tau",
            "--grid",
            "0.05,0.1,0.5",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = jsonl(&dir.path().join("sw/sweep.jsonl"));
    assert_eq!(rows.len(), 3);
    assert!(read(&dir.path().join("sw/sweep.txt")).contains("tau"));
}

#[test]
fn single_value_sweep_matches_train() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("epochs = 3", "epochs = 2"));
    let o = run(
        &[
            "sweep",
            "--config",
            &cfg,
            "--out",
            "sw",
            "--parameter",
            "tau",
            "--grid",
            "0.1",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["train", "--config", &cfg, "--out", "t"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sweep = &jsonl(&dir.path().join("sw/sweep.jsonl"))[0];
    let train = &jsonl(&dir.path().join("t/eval_test.jsonl"))[0];
    let metrics = train["metrics"].as_array().unwrap();
    let at = |k: u64, field: &str| metrics.iter().find(|m| m["k"] == k).unwrap()[field].as_f64().unwrap();
    assert_eq!(sweep["hr5"].as_f64().unwrap(), at(5, "hit_rate"), "{sweep}\n{train}");
    assert_eq!(sweep["ndcg5"].as_f64().unwrap(), at(5, "ndcg"));
    assert_eq!(sweep["hr10"].as_f64().unwrap(), at(10, "hit_rate"));
    assert_eq!(sweep["ndcg10"].as_f64().unwrap(), at(10, "ndcg"));
}

#[test]
fn unknown_sweep_parameter_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(
        &["sweep", "--config", &cfg, "--parameter", "gamma", "--grid", "1"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_passes_and_flags_bad_fixtures() {
    let dir = TempDir::new().unwrap();
    let o = run(
        &["verify", "--draws", "2000", "--elbo-samples", "0", "--out", "v"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = jsonl(&dir.path().join("v/verify.jsonl"));
    assert!(!rows.is_empty());

    std::fs::write(
        dir.path().join("bad.json"),
        r#"[{"q": [2.0, 3.0], "alpha": [0.5, 0.5]}]"#,
    )
    .unwrap();
    let o = run(
        &["verify", "--draws", "100", "--elbo-samples", "0", "--cases", "bad.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn gradcheck_detects_a_corrupted_gradient() {
    let dir = TempDir::new().unwrap();
    let ok = run(&["gradcheck"], dir.path());
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let bad = run(&["gradcheck", "--corrupt", "dec.out.w"], dir.path());
    assert_eq!(code(&bad), 1);
    let out = String::from_utf8_lossy(&bad.stdout);
    assert!(out.contains("worst tensor dec.out.w"), "{out}");
    let unknown = run(&["gradcheck", "--corrupt", "no.such"], dir.path());
    assert_eq!(code(&unknown), 2);
    assert!(stderr(&unknown).contains("emb.user"));
}

#[test]
fn smoke_config_finishes_quickly() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[data.synthetic]\n\n[train]\ndim = 8\nepochs = 5\n");
    let start = Instant::now();
    let o = run(&["train", "--config", &cfg], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 60);
    assert_eq!(jsonl(&dir.path().join("runs/train/epochs.jsonl")).len(), 5);
    assert!(dir.path().join("runs/train/config.toml").exists());
}
