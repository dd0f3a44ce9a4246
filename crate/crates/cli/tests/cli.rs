use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mtfm_core::data::{deserialize_dataset, Exposure, InferenceRequest};
use mtfm_core::heads::PredictionRecord;

const SMALL: &str = r#"
seed = 3
threads = 2

[data]
n_users = 120

[model]
d_emb = 8

[model.hta]
d_model = 16
blocks = 1
target_layers = 1
full_layers = 1
heads = 2
kv_heads = 1

[train]
steps = 12
batch_size = 8
"#;

fn mtfm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtfm")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtfm(dir.path(), &["verify", "--out", "verify.json"]);
    assert_ok(&o);
    let text = stdout(&o);
    assert_eq!(text.matches("[PASS]").count(), 7, "{text}");
    assert!(!text.contains("[FAIL]"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 7);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mtfm(dir.path(), &["train", "--config", "missing.cfg"]).status.code(), Some(2));
    assert_eq!(mtfm(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(mtfm(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(mtfm(dir.path(), &["eval"]).status.code(), Some(2));

    fs::write(dir.path().join("bad.toml"), "[train]\nstepz = 3\n").unwrap();
    let o = mtfm(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));

    fs::write(dir.path().join("zero.toml"), "[model.hta]\nheads = 3\nkv_heads = 2\n").unwrap();
    assert_eq!(mtfm(dir.path(), &["train", "--config", "zero.toml"]).status.code(), Some(2));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        assert_ok(&mtfm(dir.path(), &["gen-data", "--seed", "7", "--users", "150", "--out", name]));
    }
    let (a, b) = (fs::read(dir.path().join("a.jsonl")).unwrap(), fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(a, b);
    assert_ok(&mtfm(dir.path(), &["gen-data", "--seed", "8", "--users", "150", "--out", "c.jsonl"]));
    assert_ne!(a, fs::read(dir.path().join("c.jsonl")).unwrap());
    let data = deserialize_dataset(&String::from_utf8(a).unwrap()).unwrap();
    assert_eq!(data.samples.len(), 150);
}

fn request_from(data_path: &Path) -> String {
    let data = deserialize_dataset(&fs::read_to_string(data_path).unwrap()).unwrap();
    let mut lines = String::new();
    for sample in data.samples.iter().filter(|s| !s.exposures.is_empty()).take(5) {
        let first = &sample.exposures[0];
        let candidates: Vec<Exposure> = sample
            .exposures
            .iter()
            .filter(|e| e.scenario_id == first.scenario_id)
            .map(|e| Exposure { timestamp: first.timestamp, labels: Default::default(), ..e.clone() })
            .collect();
        let req = InferenceRequest {
            user_id: sample.user_id,
            scenario_id: first.scenario_id,
            historical: sample.historical.clone(),
            realtime: sample.realtime.clone(),
            candidates,
        };
        lines.push_str(&serde_json::to_string(&req).unwrap());
        lines.push('\n');
    }
    lines
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("small.toml"), SMALL).unwrap();
    assert_ok(&mtfm(p, &["gen-data", "--config", "small.toml", "--out", "data.jsonl"]));

    let o = mtfm(p, &["train", "--config", "small.toml", "--data", "data.jsonl", "--steps", "10", "--out", "m.ckpt"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("2 threads"), "{}", stdout(&o));
    let history: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("m.ckpt.history.json")).unwrap()).unwrap();
    assert_eq!(history["history"]["steps"].as_array().unwrap().len(), 10);
    assert_eq!(history["threads"], 2);

    let o = mtfm(p, &["eval", "--config", "small.toml", "--model", "m.ckpt", "--data", "data.jsonl", "--all", "--prune", "--out", "eval.json"]);
    assert_ok(&o);
    let text = stdout(&o);
    assert!(text.contains("HP") && text.contains("auc degradation"), "{text}");
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["users"], 120);
    assert!(eval["pruned"]["zeroed_weights"].as_u64().unwrap() > 0);

    let requests = request_from(&p.join("data.jsonl"));
    fs::write(p.join("req.jsonl"), &requests).unwrap();
    assert_ok(&mtfm(p, &["infer", "--model", "m.ckpt", "--requests", "req.jsonl", "--out", "pred.jsonl"]));
    let preds: Vec<PredictionRecord> = fs::read_to_string(p.join("pred.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!preds.is_empty());
    assert!(preds.iter().all(|r| r.probability > 0.0 && r.probability < 1.0 && r.label.is_none()));

    // a checkpoint trained at another precision is not silently reinterpreted
    assert_ok(&mtfm(p, &["train", "--config", "small.toml", "--data", "data.jsonl", "--steps", "2", "--precision", "f64", "--out", "m64.ckpt"]));
    assert_ok(&mtfm(p, &["eval", "--model", "m64.ckpt", "--data", "data.jsonl", "--all"]));
}

#[test]
fn identical_runs_write_identical_histories() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("small.toml"), SMALL).unwrap();
    for out in ["a.ckpt", "b.ckpt"] {
        assert_ok(&mtfm(p, &["train", "--config", "small.toml", "--out", out]));
    }
    let losses = |name: &str| {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join(name)).unwrap()).unwrap();
        v["history"]["steps"].as_array().unwrap().iter().map(|s| s["loss"].as_f64().unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(losses("a.ckpt.history.json"), losses("b.ckpt.history.json"));
    assert_eq!(fs::read(p.join("a.ckpt")).unwrap(), fs::read(p.join("b.ckpt")).unwrap());
}

#[test]
fn bench_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtfm(dir.path(), &["bench", "--n", "64", "--lt", "8", "--iters", "1", "--threads", "1", "--out", "bench.tsv"]);
    assert_ok(&o);
    let tsv = fs::read_to_string(dir.path().join("bench.tsv")).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next(), Some("# threads=1 precision=f32"));
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert!(header.contains(&"attention_MACs_per_layer"));
    let rows = lines.count();
    assert!(rows > 0 && rows.is_multiple_of(5), "{tsv}");
}
