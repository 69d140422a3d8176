use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bevcap::tensor_io::{Tensor, TensorData};

fn bevcap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevcap"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn encode_reports_the_toy_shape_chain() {
    let dir = tempfile::tempdir().unwrap();
    let o = bevcap(dir.path(), &["encode", "--out", "q.tns"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "32×16 → 8×32");
    let c = bevcap::tensor_io::TensorContainer::load(dir.path().join("q.tns")).unwrap();
    assert_eq!(c.get_f64("queries").unwrap().dim(), (8, 32));
    assert_eq!(c.get("view_map").unwrap().shape, [4, 4]);
    assert_eq!(c.metadata["shape_chain"], "32×16 → 8×32");
}

#[test]
fn encode_reads_feature_files_and_rejects_corrupt_ones() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = bevcap::tensor_io::TensorContainer::new();
    let values = (0..32 * 16).map(|i| (i / 16) as f64 * 0.01).collect();
    c.insert("features", Tensor::new(vec![32, 4, 4], TensorData::F64(values)).unwrap()).unwrap();
    c.save(dir.path().join("f.tns")).unwrap();
    let o = bevcap(dir.path(), &["encode", "--features", "f.tns", "--out", "q.tns"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "32×16 → 8×32");

    fs::write(dir.path().join("bad.tns"), b"not a tensor container").unwrap();
    let o = bevcap(dir.path(), &["encode", "--features", "bad.tns"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));

    let mut wrong = bevcap::tensor_io::TensorContainer::new();
    wrong.insert("features", Tensor::new(vec![16, 16], TensorData::F64(vec![0.0; 256])).unwrap()).unwrap();
    wrong.save(dir.path().join("wrong.tns")).unwrap();
    let o = bevcap(dir.path(), &["encode", "--features", "wrong.tns"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `features`"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.cfg"), "seed = 3\nqformer.queries = 8\n").unwrap();
    let o = bevcap(dir.path(), &["encode", "--config", "c.cfg"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("qformer.queries"), "{}", stderr(&o));
}

#[test]
fn train_then_caption() {
    let dir = tempfile::tempdir().unwrap();
    let o = bevcap(dir.path(), &["train-toy", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 200);
    let scenes = fs::read_to_string(dir.path().join("run/scenes.jsonl")).unwrap();
    assert_eq!(scenes.lines().count(), 4);

    let args = ["caption", "--checkpoint", "run/checkpoint.tns", "--scene", "0"];
    let a = bevcap(dir.path(), &args);
    let b = bevcap(dir.path(), &args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(!stdout(&a).trim().is_empty());
    assert_eq!(stdout(&a), stdout(&b));

    let o = bevcap(dir.path(), &["caption", "--checkpoint", "run/checkpoint.tns", "--scene", "9"]);
    assert!(!o.status.success());
}

#[test]
fn eval_scores_aligned_records() {
    let dir = tempfile::tempdir().unwrap();
    let records = "{\"id\":\"a\",\"text\":\"The front view shows one car.\"}\n\
                   {\"id\":\"b\",\"text\":\"The back view shows many buses.\"}\n";
    fs::write(dir.path().join("p.jsonl"), records).unwrap();
    fs::write(dir.path().join("r.jsonl"), records).unwrap();
    let o = bevcap(dir.path(), &["eval", "--pred", "p.jsonl", "--ref", "r.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for n in 1..=4 {
        assert_eq!(report["bleu"][n.to_string()], 1.0);
    }
    assert_eq!(report["corpus_size"], 2);

    fs::write(dir.path().join("r2.jsonl"), "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"c\",\"text\":\"y\"}\n").unwrap();
    let o = bevcap(dir.path(), &["eval", "--pred", "p.jsonl", "--ref", "r2.jsonl"]);
    assert!(!o.status.success());
}

#[test]
fn groundview_generation_modes() {
    let dir = tempfile::tempdir().unwrap();
    let lines: Vec<String> = (0..10)
        .map(|i| format!("{{\"sample_id\":\"s{i}\",\"objects\":[{{\"category\":\"car\",\"view\":{},\"count\":{}}}]}}", i % 6, i % 4))
        .collect();
    fs::write(dir.path().join("ann.jsonl"), lines.join("\n")).unwrap();

    let o = bevcap(dir.path(), &["gen-groundview", "--in", "ann.jsonl", "--view", "each", "--out", "each.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("each.jsonl")).unwrap().lines().count(), 60);
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("each.jsonl.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["records"], 10);
    assert_eq!(stats["template_version"], "groundview-v1");

    let o = bevcap(dir.path(), &["gen-groundview", "--in", "ann.jsonl", "--out", "all.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let all = fs::read_to_string(dir.path().join("all.jsonl")).unwrap();
    assert_eq!(all.lines().count(), 10);
    let again = bevcap(dir.path(), &["gen-groundview", "--in", "ann.jsonl", "--out", "all2.jsonl"]);
    assert!(again.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("all2.jsonl")).unwrap(), all);

    let o = bevcap(dir.path(), &["gen-groundview", "--in", "ann.jsonl", "--view", "8"]);
    assert!(!o.status.success());
}
