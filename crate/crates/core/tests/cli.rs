mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use rca::io::{read_instances, read_vocabulary, write_instances, write_vocabulary, Vocabulary};
use rca::model::Embedding;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn rca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rca"))
        .args(args)
        .env_remove("RCA_SEED")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = rca(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn rank_splits_the_top_m() {
    let v = ok_json(&[
        "rank",
        "--vocab",
        path(&fixture("vocab3.jsonl")),
        "--instances",
        path(&fixture("image1.jsonl")),
        "--m",
        "2",
    ]);
    let tags = &v["images"][0]["tags"];
    assert_eq!(tags[0]["tag_id"], "a");
    assert_eq!(tags[0]["side"], "P");
    assert_eq!(tags[0]["score"], 1.0);
    assert_eq!(tags[1]["tag_id"], "b");
    assert_eq!(tags[1]["side"], "N");
    assert_eq!(tags[1]["score"], 0.0);
}

#[test]
fn rank_fifty_of_a_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(5);
    let vocab = Vocabulary {
        dim: 6,
        entries: gaussian_rows(&mut r, 100, 6, 1.0)
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("w{i}"), Embedding::new(v).unwrap()))
            .collect(),
    };
    let vocab_path = dir.path().join("vocab.jsonl");
    write_vocabulary(std::fs::File::create(&vocab_path).unwrap(), &vocab).unwrap();
    let image = serde_json::json!({
        "image_id": "x",
        "image_embedding": gaussian_rows(&mut r, 1, 6, 1.0)[0],
        "regions": gaussian_rows(&mut r, 2, 6, 1.0),
        "caption_tokens": [],
    });
    let inst_path = dir.path().join("inst.jsonl");
    std::fs::write(&inst_path, format!("{image}\n")).unwrap();

    let v = ok_json(&["rank", "--vocab", path(&vocab_path), "--instances", path(&inst_path)]);
    let tags = v["images"][0]["tags"].as_array().unwrap();
    let sides: Vec<&str> = tags.iter().map(|t| t["side"].as_str().unwrap()).collect();
    assert_eq!(sides.iter().filter(|s| **s == "P").count(), 25);
    assert_eq!(sides.iter().filter(|s| **s == "N").count(), 25);
    assert!(sides[..25].iter().all(|s| *s == "P"));
}

#[test]
fn symmetric_pair_costs_ln2() {
    let v = ok_json(&[
        "loss",
        "--instances",
        path(&fixture("symmetric.jsonl")),
        "--enable_uasr",
        "false",
    ]);
    assert_close(
        v["images"][0]["cross"].as_f64().unwrap(),
        std::f64::consts::LN_2,
        1e-12,
        "cross",
    );
}

#[test]
fn loss_output_matches_golden_file_and_oracle() {
    let out = rca(&[
        "loss",
        "--instances",
        path(&fixture("tagged.jsonl")),
        "--enable_uasr",
        "false",
    ]);
    assert!(out.status.success());
    let golden = std::fs::read(fixture("golden_loss.json")).unwrap();
    assert_eq!(
        String::from_utf8(out.stdout.clone()).unwrap().trim_end(),
        String::from_utf8(golden).unwrap().trim_end()
    );

    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let records = read_instances(std::io::BufReader::new(
        std::fs::File::open(fixture("tagged.jsonl")).unwrap(),
    ))
    .unwrap();
    for (rec, img) in records.iter().zip(report["images"].as_array().unwrap()) {
        let d = rec.image_embedding.len();
        let mut tags = rec.tags.clone().unwrap();
        tags.sort_by(|a, b| b.score.total_cmp(&a.score));
        let k = tags.len() / 2;
        let emb: Vec<Vec<f64>> = tags.iter().map(|t| t.embedding.clone().unwrap()).collect();
        let pos = matrix(&emb[..k], d);
        let neg = matrix(&emb[k..], d);
        let regions = matrix(&rec.regions, d);
        let nouns: Vec<Vec<f64>> = rec
            .caption_tokens
            .iter()
            .filter(|t| t.is_noun)
            .map(|t| t.embedding.clone())
            .collect();
        let cross = naive_relative_loss(&regions, &pos, &neg, None);
        let inner = naive_relative_loss(&matrix(&nouns, d), &pos, &neg, None);
        assert!(rel_close(img["cross"].as_f64().unwrap(), cross, 1e-10));
        assert!(rel_close(img["inner"].as_f64().unwrap(), inner, 1e-10));
    }
}

#[test]
fn zero_inner_lambda_reports_zero_inner() {
    let v = ok_json(&[
        "loss",
        "--instances",
        path(&fixture("tagged.jsonl")),
        "--lambda_inner",
        "0",
    ]);
    for img in v["images"].as_array().unwrap() {
        assert_eq!(img["inner"], 0.0);
        assert_eq!(img["total"], img["cross"]);
    }
}

#[test]
fn uasr_report_is_consistent() {
    let v = ok_json(&["uasr", "--instances", path(&fixture("tagged.jsonl"))]);
    for img in v["images"].as_array().unwrap() {
        let k = img["positives"].as_array().unwrap().len();
        assert_eq!(img["negatives"].as_array().unwrap().len(), k);
        let w: Vec<f64> = img["weights"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        assert_close(w.iter().sum::<f64>() / k as f64, 1.0, 1e-12, "mean weight");
    }
}

#[test]
fn malformed_input_exits_2_with_line_number() {
    let out = rca(&["loss", "--instances", path(&fixture("malformed.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 5"));
}

#[test]
fn dimension_mismatch_exits_3() {
    let out = rca(&["loss", "--instances", path(&fixture("dim_mismatch.jsonl"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_file_and_bad_config_exit_2() {
    assert_eq!(
        rca(&["loss", "--instances", "/nonexistent/x.jsonl"]).status.code(),
        Some(2)
    );
    assert_eq!(rca(&["train", "--steps", "0"]).status.code(), Some(2));
    assert_eq!(rca(&["train", "--learning_rate", "abc"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_fails_honestly() {
    let v = ok_json(&["gradcheck", "--seed", "3"]);
    assert_eq!(v["passed"], true);
    assert!(v["max_relative_error"].as_f64().unwrap() < 1e-4);
    let out = rca(&["gradcheck", "--tolerance", "1e-15"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("relative error"));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let metrics = dir.path().join(format!("m{tag}.jsonl"));
        let out = rca(&[
            "train",
            "--n_images",
            "40",
            "--steps",
            "20",
            "--learning_rate",
            "0.5",
            "--flip_rate",
            "0.2",
            "--seed",
            "11",
            "--metrics",
            path(&metrics),
        ]);
        assert!(out.status.success());
        (out.stdout, std::fs::read(metrics).unwrap())
    };
    assert_eq!(run("a"), run("b"));
    let gc = || rca(&["gradcheck", "--seed", "8"]).stdout;
    assert_eq!(gc(), gc());
}

#[test]
fn seed_env_variable_is_honoured() {
    let with = |seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_rca"))
            .args(["gradcheck"])
            .env("RCA_SEED", seed)
            .output()
            .unwrap()
            .stdout
    };
    let flag = rca(&["gradcheck", "--seed", "6"]).stdout;
    assert_eq!(with("6"), flag);
    assert_ne!(with("7"), flag);
}

#[test]
fn zero_learning_rate_gives_flat_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("m.jsonl");
    let out = rca(&[
        "train",
        "--n_images",
        "20",
        "--steps",
        "30",
        "--learning_rate",
        "0",
        "--metrics",
        path(&metrics),
    ]);
    assert!(out.status.success());
    let lines: Vec<Value> = std::fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let steps: Vec<u64> = lines.iter().map(|l| l["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![0, 10, 20, 30]);
    assert!(lines.iter().all(|l| l["loss"] == lines[0]["loss"]));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# short run\nn_images = 20\nsteps = 10\nlearning_rate = 0.5\n").unwrap();
    let v = ok_json(&["train", "--config", path(&cfg), "--steps", "4"]);
    assert_eq!(v["steps"], 4);
    std::fs::write(&cfg, "n_images = 20\nbogus = 1\n").unwrap();
    let out = rca(&["train", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn trained_state_evaluates_to_its_final_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    let summary = ok_json(&[
        "train",
        "--noise_sigma",
        "0",
        "--steps",
        "200",
        "--learning_rate",
        "0.5",
        "--state",
        path(&state),
    ]);
    let eval = ok_json(&["eval", "--state", path(&state)]);
    assert_eq!(eval["retrieval_accuracy"], summary["final"]["retrieval_accuracy"]);
    assert_eq!(eval["step"], 200);
    assert!(eval["retrieval_accuracy"].as_f64().unwrap() >= 0.9);
}

#[test]
fn file_formats_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = read_vocabulary(std::io::BufReader::new(
        std::fs::File::open(fixture("vocab3.jsonl")).unwrap(),
    ))
    .unwrap();
    let p = dir.path().join("v.jsonl");
    write_vocabulary(std::fs::File::create(&p).unwrap(), &vocab).unwrap();
    let again = read_vocabulary(std::io::BufReader::new(std::fs::File::open(&p).unwrap())).unwrap();
    assert_eq!(vocab, again);

    let records = read_instances(std::io::BufReader::new(
        std::fs::File::open(fixture("tagged.jsonl")).unwrap(),
    ))
    .unwrap();
    let p = dir.path().join("i.jsonl");
    write_instances(std::fs::File::create(&p).unwrap(), &records).unwrap();
    let again = read_instances(std::io::BufReader::new(std::fs::File::open(&p).unwrap())).unwrap();
    assert_eq!(records, again);
}
