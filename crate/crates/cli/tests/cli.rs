use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use evirank::coverage::load_checkpoint;
use evirank::textnorm::load_embeddings;
use evirank::CoverageModel;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_evirank");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn toy_record(id: &str) -> Value {
    json!({
        "id": id,
        "question": "which song",
        "gold_answers": ["Danny Boy"],
        "passages": [
            {"id": "p1", "text": "danny boy is a song", "rank": 0},
            {"id": "p2", "text": "the song danny boy", "rank": 1},
            {"id": "p3", "text": "london is a city", "rank": 2}
        ],
        "candidates": [
            {"text": "Danny Boy", "passage_id": "p1", "prob": 0.3, "reader_rank": 1},
            {"text": "danny boy!", "passage_id": "p2", "prob": 0.2, "reader_rank": 2},
            {"text": "London", "passage_id": "p3", "prob": 0.4, "reader_rank": 0}
        ]
    })
}

fn write_lines(path: &Path, values: &[Value]) {
    let text: String = values.iter().map(|v| format!("{v}\n")).collect();
    fs::write(path, text).unwrap();
}

fn read_predictions(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

struct Synth {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Synth {
    fn new(train: usize, dev: usize) -> Synth {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let out = run(&[
            "synth",
            "--out-dir",
            p(&root.join("data")),
            "--train",
            &train.to_string(),
            "--dev",
            &dev.to_string(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        Synth { _dir: dir, root }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    fn train(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out_dir = self.root.join(name);
        let (train, dev, emb) = (
            self.file("train.jsonl"),
            self.file("dev.jsonl"),
            self.file("embeddings.txt"),
        );
        let mut args = vec![
            "train",
            "--train",
            p(&train),
            "--dev",
            p(&dev),
            "--embeddings",
            p(&emb),
            "--out-dir",
            p(&out_dir),
            "--l",
            "8",
        ];
        args.extend_from_slice(extra);
        let out = run(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out_dir
    }
}

#[test]
fn count_on_toy_record_picks_danny_boy() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.jsonl");
    let preds = dir.path().join("preds.jsonl");
    write_lines(&data, &[toy_record("q1")]);
    let out = run(&[
        "rerank",
        "--data",
        p(&data),
        "--method",
        "count",
        "--k",
        "3",
        "--out",
        p(&preds),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines = read_predictions(&preds);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["id"], "q1");
    assert_eq!(lines[0]["answer"].as_str().unwrap().to_lowercase(), "danny boy");
    assert!(stdout(&out).contains("EM 100.0"));
    assert!(dir.path().join("preds.jsonl.manifest.json").exists());
}

#[test]
fn prob_on_toy_record_also_picks_danny_boy() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.jsonl");
    let preds = dir.path().join("preds.jsonl");
    write_lines(&data, &[toy_record("q1")]);
    let out = run(&[
        "rerank",
        "--data",
        p(&data),
        "--method",
        "prob",
        "--k",
        "3",
        "--out",
        p(&preds),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        read_predictions(&preds)[0]["answer"].as_str().unwrap().to_lowercase(),
        "danny boy"
    );
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.jsonl");
    write_lines(&data, &[toy_record("q1")]);
    let preds = dir.path().join("preds.jsonl");
    let out = run(&["rerank", "--data", p(&data), "--method", "coverage", "--out", p(&preds)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--model"));
    assert_eq!(
        code(&run(&[
            "rerank",
            "--data",
            p(&data),
            "--method",
            "nope",
            "--out",
            p(&preds)
        ])),
        1
    );
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    let threads = Command::new(BIN)
        .args(["stats", "--data", p(&data)])
        .env("EVIRANK_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{not json\n").unwrap();
    assert_eq!(code(&run(&["stats", "--data", p(&bad)])), 2);
    assert_eq!(
        code(&run(&["stats", "--data", p(&dir.path().join("missing.jsonl"))])),
        2
    );
}

#[test]
fn eval_perfect_predictions_and_recall() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.jsonl");
    let preds = dir.path().join("preds.jsonl");
    write_lines(&data, &[toy_record("q1"), toy_record("q2")]);
    let out = run(&[
        "rerank",
        "--data",
        p(&data),
        "--method",
        "count",
        "--k",
        "3",
        "--out",
        p(&preds),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let csv = dir.path().join("recall.csv");
    let out = run(&[
        "eval",
        "--data",
        p(&data),
        "--predictions",
        p(&preds),
        "--recall",
        "1,3,5",
        "--recall-csv",
        p(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("EM 100.0  F1 100.0"), "{text}");

    let csv = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(csv.lines().next().unwrap(), "k,em,f1");
    assert_eq!(rows.len(), 3);
    for w in rows.windows(2) {
        assert!(w[1][1] >= w[0][1] && w[1][2] >= w[0][2]);
    }
}

#[test]
fn eval_names_missing_ids() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.jsonl");
    let preds = dir.path().join("preds.jsonl");
    write_lines(&data, &[toy_record("q1"), toy_record("q2")]);
    write_lines(
        &preds,
        &[json!({"id": "q1", "answer": "danny boy", "score": 2.0, "ranking": []})],
    );
    let out = run(&["eval", "--data", p(&data), "--predictions", p(&preds)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("q2"), "{}", stderr(&out));
}

#[test]
fn gradcheck_exit_codes() {
    let out = run(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("max relative error"));
    let again = run(&["gradcheck"]);
    assert_eq!(stdout(&out), stdout(&again));
    assert_eq!(code(&run(&["gradcheck", "--h", "1e-1"])), 3);
}

#[test]
fn zero_epochs_saves_initialization() {
    let s = Synth::new(20, 10);
    let a = s.train("a", &["--epochs", "0", "--seed", "4"]);
    let b = s.train("b", &["--epochs", "0", "--seed", "4"]);
    let c = s.train("c", &["--epochs", "0", "--seed", "5"]);
    let read = |d: &Path| fs::read(d.join("checkpoint.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));

    let table = Arc::new(load_embeddings(Some(&s.file("embeddings.txt")), 16).unwrap());
    let saved = load_checkpoint(&a.join("checkpoint.json"), table.clone()).unwrap();
    let init = CoverageModel::new(saved.dims, table, 4).unwrap();
    assert_eq!(saved, init);
    assert!(stdout(&run(&["--version"])).contains("evirank"));
}

#[test]
fn full_with_count_weights_matches_count() {
    let s = Synth::new(40, 20);
    let run_dir = s.train("m", &["--epochs", "2"]);
    let dev = s.file("dev.jsonl");
    let emb = s.file("embeddings.txt");
    let model = run_dir.join("checkpoint.json");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["input_hashes"].as_object().unwrap().len(), 3);

    let count = s.root.join("count.jsonl");
    let full = s.root.join("full.jsonl");
    let out = run(&[
        "rerank",
        "--data",
        p(&dev),
        "--method",
        "count",
        "--k",
        "5",
        "--out",
        p(&count),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(&[
        "rerank",
        "--data",
        p(&dev),
        "--method",
        "full",
        "--k",
        "5",
        "--strength-k",
        "5",
        "--model",
        p(&model),
        "--embeddings",
        p(&emb),
        "--weights",
        "1,0,0",
        "--out",
        p(&full),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let answers = |path: &Path| -> Vec<Value> {
        read_predictions(path)
            .into_iter()
            .map(|v| v["answer"].clone())
            .collect()
    };
    assert_eq!(answers(&count), answers(&full));
}
