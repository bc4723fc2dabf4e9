use std::path::{Path, PathBuf};

use gazeattn_cli::{run_with, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use gazeattn_core::AttentionTrace;
use serde_json::Value;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(args: &[&str]) -> Out {
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    let code = run_with(
        std::iter::once("gazeattn").chain(args.iter().copied()),
        &mut stdout,
        &mut stderr,
    );
    Out {
        code,
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

fn ok(args: &[&str]) -> Value {
    let out = cli(args);
    assert_eq!(out.code, EXIT_OK, "{args:?}: {}", out.stderr);
    assert_eq!(out.stdout.trim_end().lines().count(), 1, "{}", out.stdout);
    serde_json::from_str(&out.stdout).unwrap()
}

const SMALL: &str = "\
tsm.embed_dim=8
tsm.hidden_size=8
tsm.transformer_layers=1
tsm.attention_heads=2
tsm.feedforward_dim=16
tsm.pretrain_epochs=1
tsm.finetune_epochs=1
tsm.batch_size=8
paragen.embed_dim=8
paragen.hidden_size=8
paragen.epochs=2
sentcomp.embed_dim=8
sentcomp.hidden_size=8
sentcomp.epochs=1
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let w = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(w.path("small.cfg"), SMALL).unwrap();
        ok(&[
            "gen-synth",
            "--out",
            &w.s("data"),
            "--seed",
            "2",
            "--pairs",
            "16",
            "--compression",
            "16",
            "--gaze-sentences",
            "8",
            "--readers",
            "2",
            "--synthetic-sentences",
            "20",
            "--runs",
            "2",
        ]);
        ok(&[
            "--config",
            &w.s("small.cfg"),
            "train-tsm",
            "--out",
            &w.s("tsm"),
            "--synthetic",
            &w.s("data/synthetic_gaze.tsv"),
            "--human",
            &w.s("data/human_gaze.tsv"),
        ]);
        w
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn train(&self, task: &str, ablation: &str, tsm: &str, out: &str) -> Value {
        let train = if task == "paragen" {
            "data/pairs.tsv"
        } else {
            "data/compression.txt"
        };
        ok(&[
            "--config",
            &self.s("small.cfg"),
            "train-task",
            "--task",
            task,
            "--ablation",
            ablation,
            "--train",
            &self.s(train),
            "--tsm",
            &self.s(tsm),
            "--out",
            &self.s(out),
        ])
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = cli(&[]);
    assert_eq!(out.code, EXIT_USAGE);
    assert!(out.stderr.contains("Usage"), "{}", out.stderr);
    assert!(out.stdout.is_empty());
}

#[test]
fn unknown_flags_and_keys_are_usage_errors() {
    assert_eq!(cli(&["gen-synth", "--bogus"]).code, EXIT_USAGE);
    let out = cli(&["--set", "tsm.no_such_key=1", "gen-synth", "--out", "/nonexistent/x"]);
    assert_eq!(out.code, EXIT_USAGE, "{}", out.stderr);
    assert_eq!(cli(&["--help"]).code, EXIT_OK);
}

#[test]
fn missing_input_is_a_data_error() {
    let out = cli(&[
        "eval-tsm",
        "--gold",
        "/nonexistent/gold.tsv",
        "--pred",
        "/nonexistent/pred.tsv",
    ]);
    assert_eq!(out.code, EXIT_DATA);
    assert!(!out.stderr.is_empty());
}

#[test]
fn eval_tsm_scores_prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.tsv");
    let pred = dir.path().join("pred.tsv");
    std::fs::write(
        &gold,
        "s1\tr\t0\tthe\t100\ns1\tr\t1\tcat\t300\ns2\tr\t0\ta\t1\ns2\tr\t1\tdog\t1\n",
    )
    .unwrap();
    std::fs::write(
        &pred,
        "s1\tm\t0\tthe\t1\ns1\tm\t1\tcat\t3\ns2\tm\t0\ta\t1\ns2\tm\t1\tdog\t1\n",
    )
    .unwrap();
    let v = ok(&[
        "eval-tsm",
        "--gold",
        &gold.display().to_string(),
        "--pred",
        &pred.display().to_string(),
    ]);
    assert_eq!(v["records"], 2);
    assert!(v["mse"].as_f64().unwrap().abs() < 1e-12);
    assert!(v["jsd"].as_f64().unwrap().abs() < 1e-9);
    // Two tags only: too few for a rank correlation.
    assert!(v["spearman_rho"].is_null());
}

#[test]
fn pipeline_modes_and_maps() {
    let w = Workspace::new();
    let tsm_before = read(&w.path("tsm/tsm.ckpt"));

    let v = w.train("paragen", "frozen", "tsm/tsm.ckpt", "frozen");
    assert_eq!(v["ablation"], "frozen");
    assert_eq!(read(&w.path("frozen/tsm.ckpt")), tsm_before);

    w.train("paragen", "full", "tsm/tsm.ckpt", "full");
    assert_ne!(read(&w.path("full/tsm.ckpt")), tsm_before);
    let e = ok(&[
        "eval-task",
        "--task",
        "paragen",
        "--checkpoint",
        &w.s("full/task.ckpt"),
        "--tsm",
        &w.s("full/tsm.ckpt"),
        "--test",
        &w.s("data/pairs_test.tsv"),
    ]);
    let bleu = e["bleu4"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&bleu));

    // The paraphrase-trained TSM can be swapped into compression, but not back into paraphrase.
    w.train("sentcomp", "weight-swap", "full/tsm.ckpt", "swap");
    let refused = cli(&[
        "--config",
        &w.s("small.cfg"),
        "train-task",
        "--task",
        "paragen",
        "--ablation",
        "weight-swap",
        "--train",
        &w.s("data/pairs.tsv"),
        "--tsm",
        &w.s("full/tsm.ckpt"),
        "--out",
        &w.s("bad"),
    ]);
    assert_eq!(refused.code, EXIT_USAGE);

    w.train("sentcomp", "no-fixation", "tsm/tsm.ckpt", "nofix");
    let e = ok(&[
        "eval-task",
        "--task",
        "sentcomp",
        "--checkpoint",
        &w.s("nofix/task.ckpt"),
        "--test",
        &w.s("data/compression_test.txt"),
    ]);
    assert!((0.0..=1.0).contains(&e["f1"].as_f64().unwrap()));

    let m = ok(&[
        "emit-maps",
        "--task-checkpoint",
        &w.s("full/task.ckpt"),
        "--tsm-checkpoint",
        &w.s("full/tsm.ckpt"),
        "--out",
        &w.s("maps"),
    ]);
    let trace = AttentionTrace::load(&w.path("maps/trace.json")).unwrap();
    let json = std::fs::read_to_string(w.path("maps/trace.json")).unwrap();
    assert_eq!(AttentionTrace::from_json(&json, "trace").unwrap(), trace);
    assert_eq!(m["steps"].as_u64().unwrap() as usize, trace.attention.len());
    assert_eq!(trace.epoch_saliency.len(), 2);
    let grid = std::fs::read_to_string(w.path("maps/attention.svg")).unwrap();
    assert_eq!(
        grid.matches(r#"class="cell""#).count(),
        trace.attention.len() * trace.probe_tokens.len()
    );
    let strips = std::fs::read_to_string(w.path("maps/saliency.svg")).unwrap();
    assert_eq!(
        strips.matches(r#"class="cell""#).count(),
        trace.epoch_saliency.len() * trace.probe_tokens.len()
    );

    ok(&[
        "emit-maps",
        "--task-checkpoint",
        &w.s("full/task.ckpt"),
        "--tsm-checkpoint",
        &w.s("full/tsm.ckpt"),
        "--probe",
        "cat",
        "--out",
        &w.s("one"),
    ]);
    let one = AttentionTrace::load(&w.path("one/trace.json")).unwrap();
    assert_eq!(one.probe_tokens.len(), 1);
    assert!(one.attention.iter().all(|row| row == &vec![1.0]));

    let mismatch = cli(&[
        "eval-task",
        "--task",
        "sentcomp",
        "--checkpoint",
        &w.s("full/task.ckpt"),
        "--test",
        &w.s("data/compression_test.txt"),
    ]);
    assert_eq!(mismatch.code, EXIT_USAGE);
}
