use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn acsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acsa")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> (PathBuf, PathBuf) {
    let o = acsa(&["gen-synth", "--out", s(dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (dir.join("synth.jsonl"), dir.join("labels.txt"))
}

const SMALL: [&str; 8] = [
    "--set", "embed_dim=64", "--set", "lstm_hidden=32", "--set", "head_hidden=32", "--set", "dropout_p=0.2",
];

/// A run trained to fit the synthetic corpus, validated on the same texts.
struct Fitted {
    _dir: TempDir,
    data: PathBuf,
    labels: PathBuf,
    checkpoint: PathBuf,
}

fn fitted() -> &'static Fitted {
    static CELL: OnceLock<Fitted> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let (data, labels) = synth(dir.path());
        let out = dir.path().join("run");
        let mut args = vec![
            "train", "--data", s(&data), "--val", s(&data), "--labels", s(&labels), "--out", s(&out), "--runs", "1",
            "--set", "max_epochs=100", "--set", "patience=0", "--set", "learning_rate=0.01",
        ];
        args.extend(SMALL);
        let o = acsa(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let checkpoint = out.join("run1/checkpoint.acsa");
        Fitted { data, labels, checkpoint, _dir: dir }
    })
}

fn report_field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}` in report:\n{text}"))
        .parse()
        .unwrap()
}

fn checkpoint_body(path: &Path) -> Value {
    let text = fs::read_to_string(path).unwrap();
    let (_, body) = text.split_once('\n').unwrap();
    serde_json::from_str(body).unwrap()
}

#[test]
fn train_with_defaults_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, labels) = synth(dir.path());
    let out = dir.path().join("run");
    let o = acsa(&["train", "--data", s(&data), "--labels", s(&labels), "--out", s(&out), "--set", "max_epochs=2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("acsa_f1:"));
    for f in ["config.toml", "labels.txt", "census.txt", "census.json", "report.json", "report.txt", "split/train.jsonl", "split/val.jsonl"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    for r in 1..=3 {
        let run = out.join(format!("run{r}"));
        assert!(run.join("checkpoint.acsa").is_file());
        assert_eq!(fs::read_to_string(run.join("epochs.jsonl")).unwrap().lines().count(), 2);
    }
    assert_eq!(fs::read_to_string(out.join("split/val.jsonl")).unwrap().lines().count(), 5);
    let cfg = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(cfg.contains("max_epochs = 2") && cfg.contains("lambda_l2 = 0.01"), "{cfg}");
}

#[test]
fn training_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (data, labels) = synth(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--data", s(&data), "--labels", s(&labels), "--out", s(&out), "--runs", "2", "--set", "max_epochs=3"];
        args.extend(SMALL);
        assert!(acsa(&args).status.success());
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["run1/checkpoint.acsa", "run2/checkpoint.acsa", "run2/epochs.jsonl", "report.json", "census.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn missing_label_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = synth(dir.path());
    let missing = dir.path().join("nope/labels.txt");
    let o = acsa(&["train", "--data", s(&data), "--labels", s(&missing), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn without_share_census_lists_per_aspect_heads() {
    let dir = tempfile::tempdir().unwrap();
    let (data, labels) = synth(dir.path());
    let out = dir.path().join("run");
    let mut args = vec![
        "train", "--data", s(&data), "--labels", s(&labels), "--out", s(&out), "--runs", "1", "--set", "max_epochs=1",
        "--variant", "without_share",
    ];
    args.extend(SMALL);
    assert!(acsa(&args).status.success());
    let census = fs::read_to_string(out.join("census.txt")).unwrap();
    assert!(census.contains("variant: without_share"));
    for j in 0..5 {
        assert!(census.contains(&format!("aspect{j}.sc_head (sc_head)")), "{census}");
    }

    let full = acsa(&["census", "--json", "--aspects", "4"]);
    let ws = acsa(&["census", "--json", "--aspects", "4", "--variant", "without_share"]);
    let head = |o: &Output| serde_json::from_slice::<Value>(&o.stdout).unwrap()["by_role"]["sc_head"].as_u64().unwrap();
    assert_eq!(head(&ws), 4 * head(&full));
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nlearning_rat = 0.1\n").unwrap();
    let o = acsa(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));

    fs::write(&cfg, "[train]\nlambda_l2 = \"abc\"\n").unwrap();
    assert_eq!(acsa(&["train", "--config", s(&cfg)]).status.code(), Some(1));
    assert_eq!(acsa(&["train", "--set", "bogus=1"]).status.code(), Some(1));
    assert_eq!(acsa(&["train"]).status.code(), Some(1));
    assert_eq!(acsa(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(acsa(&["--help"]).status.code(), Some(0));
}

#[test]
fn evaluate_matches_training_and_fits_the_corpus() {
    let f = fitted();
    let o = acsa(&["evaluate", "--checkpoint", s(&f.checkpoint), "--data", s(&f.data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let f1 = report_field(&text, "acsa_f1");
    assert!(f1 >= 0.95, "training-set ACSA F1 {f1}");
    let stored = checkpoint_body(&f.checkpoint)["meta"]["val_f1"].as_f64().unwrap();
    assert!((f1 - stored).abs() < 5e-7, "evaluate {f1} vs stored {stored}");

    let again = acsa(&["evaluate", "--checkpoint", s(&f.checkpoint), "--data", s(&f.data)]);
    assert_eq!(stdout(&again), text);

    let strict = acsa(&["evaluate", "--checkpoint", s(&f.checkpoint), "--data", s(&f.data), "--tau", "0.9"]);
    assert!(report_field(&stdout(&strict), "acd_predicted") <= report_field(&text, "acd_predicted"));
    assert_eq!(report_field(&stdout(&strict), "tau"), 0.9);
}

#[test]
fn evaluate_writes_json_and_checks_labels() {
    let f = fitted();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = acsa(&["evaluate", "--checkpoint", s(&f.checkpoint), "--data", s(&f.data), "--labels", s(&f.labels), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["examples"], 50);

    let other = dir.path().join("labels.txt");
    fs::write(&other, "[aspects]\nFOOD#QUALITY\n[polarities]\npositive\nnegative\n").unwrap();
    let o = acsa(&["evaluate", "--checkpoint", s(&f.checkpoint), "--data", s(&f.data), "--labels", s(&other)]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("SERVICE#GENERAL") && msg.contains(s(&other)), "{msg}");
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let f = fitted();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.acsa");
    let mut bytes = fs::read(&f.checkpoint).unwrap();
    let n = bytes.len();
    bytes[n - 20] ^= 0x01;
    fs::write(&bad, &bytes).unwrap();
    let o = acsa(&["evaluate", "--checkpoint", s(&bad), "--data", s(&f.data)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    fs::write(&bad, &bytes[..n / 2]).unwrap();
    assert_eq!(acsa(&["predict", "--checkpoint", s(&bad), "--text", "x"]).status.code(), Some(2));
}

#[test]
fn predict_outputs_distributions_and_attention() {
    let f = fitted();
    let before = fs::read(&f.checkpoint).unwrap();
    let text = "the pasta was superb and the waiter was rude";
    let o = acsa(&["predict", "--checkpoint", s(&f.checkpoint), "--text", text, "--text", text, "--attention"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["predictions"], lines[1]["predictions"]);
    let n_tokens = lines[0]["tokens"].as_array().unwrap().len();
    let preds = lines[0]["predictions"].as_array().unwrap();
    assert!(!preds.is_empty());
    for p in preds {
        let total: f64 = p["distribution"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() <= 1e-9);
        let att = p["attention"].as_object().unwrap();
        assert_eq!(att.len(), 4);
        for w in att.values() {
            let w = w.as_array().unwrap();
            assert_eq!(w.len(), n_tokens);
            let sum: f64 = w.iter().map(|v| v.as_f64().unwrap()).sum();
            assert!((sum - 1.0).abs() <= 1e-9);
        }
    }
    assert_eq!(fs::read(&f.checkpoint).unwrap(), before);
}

#[test]
fn predict_reports_empty_texts_and_continues() {
    let f = fitted();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("texts.txt");
    fs::write(&input, "the food was great\n\nthe service was slow\n").unwrap();
    let o = acsa(&["predict", "--checkpoint", s(&f.checkpoint), "--data", s(&input)]);
    assert_eq!(o.status.code(), Some(2));
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1]["error"].is_string());
    assert!(lines[0]["predictions"].is_array() && lines[2]["predictions"].is_array());
    assert!(lines[0].get("tokens").is_none());
}
