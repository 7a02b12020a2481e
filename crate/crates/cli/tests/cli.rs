use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn nerkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerkit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn nerkit")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nerkit(dir, args);
    assert!(
        out.status.success(),
        "nerkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(
        dir,
        &[
            "synth",
            "--out",
            "data",
            "--train",
            "200",
            "--validation",
            "80",
            "--test",
            "80",
            "--seed",
            "5",
        ],
    );
}

fn train(dir: &Path, model: &str, out: &str, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--model",
        model,
        "--train",
        "data/train.jsonl",
        "--validation",
        "data/validation.jsonl",
        "--out",
        out,
        "--lr",
        "0.01",
        "--max-epochs",
        "4",
        "--dim",
        "16",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

fn summary_f1(run: &Path) -> f64 {
    let text = fs::read_to_string(run.join("summary.toml")).unwrap();
    let value: toml::Value = toml::from_str(&text).unwrap();
    value["validation"]["f1"].as_float().unwrap()
}

fn parse_f1(line: &str) -> f64 {
    line.split_whitespace()
        .find_map(|f| f.strip_prefix("F1="))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn predict_reproduces_best_epoch_validation_score() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir);
    for model in ["seq", "crf", "span"] {
        train(dir, model, model, &[]);
        let pred = format!("{model}.tsv");
        ok(
            dir,
            &[
                "predict",
                "--checkpoint",
                &format!("{model}/model.ckpt"),
                "--input",
                "data/validation.jsonl",
                "--out",
                &pred,
            ],
        );
        let report = ok(
            dir,
            &[
                "score",
                "--gold",
                "data/validation.gold.tsv",
                "--pred",
                &pred,
            ],
        );
        let f1 = parse_f1(report.lines().next().unwrap());
        assert!(
            (f1 - summary_f1(&dir.join(model))).abs() < 1e-4,
            "{model}: {report}"
        );

        let best: toml::Value =
            toml::from_str(&fs::read_to_string(dir.join(model).join("summary.toml")).unwrap())
                .unwrap();
        let epoch = best["best_epoch"].as_integer().unwrap();
        let saved =
            fs::read_to_string(dir.join(model).join(format!("epochs/epoch-{epoch:03}.tsv")))
                .unwrap();
        assert_eq!(saved, fs::read_to_string(dir.join(&pred)).unwrap());
    }
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir);
    train(dir, "crf", "a", &["--seed", "3"]);
    let out = nerkit(
        dir,
        &[
            "--jobs",
            "1",
            "train",
            "--model",
            "crf",
            "--train",
            "data/train.jsonl",
            "--validation",
            "data/validation.jsonl",
            "--out",
            "b",
            "--lr",
            "0.01",
            "--max-epochs",
            "4",
            "--dim",
            "16",
            "--seed",
            "3",
        ],
    );
    assert!(out.status.success());
    for file in ["model.ckpt", "metrics.tsv", "summary.toml"] {
        assert_eq!(
            fs::read(dir.join("a").join(file)).unwrap(),
            fs::read(dir.join("b").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn combine_modes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("a.tsv"), "s1\tgene\t0\t4\ns1\tdisease\t6\t9\n").unwrap();
    fs::write(dir.join("b.tsv"), "s1\tgene\t0\t4\ns2\tgene\t1\t3\n").unwrap();
    fs::write(dir.join("c.tsv"), "s2\tgene\t1\t3\ns3\tgene\t0\t2\n").unwrap();
    let vote = ok(
        dir,
        &["combine", "--mode", "majvote", "a.tsv", "b.tsv", "c.tsv"],
    );
    assert_eq!(vote, "s1\tgene\t0\t4\ns2\tgene\t1\t3\n");
    let all = ok(
        dir,
        &["combine", "--mode", "union", "a.tsv", "b.tsv", "c.tsv"],
    );
    assert_eq!(all.lines().count(), 4);
}

#[test]
fn score_reports_counts_and_per_type() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("gold.tsv"),
        "s1\tgene\t0\t4\ns1\tdisease\t6\t9\ns2\tgene\t1\t3\n",
    )
    .unwrap();
    fs::write(dir.join("pred.tsv"), "s1\tgene\t0\t4\ns1\tgene\t6\t9\n").unwrap();
    let report = ok(
        dir,
        &[
            "score",
            "--gold",
            "gold.tsv",
            "--pred",
            "pred.tsv",
            "--per-type",
        ],
    );
    let first = report.lines().next().unwrap();
    assert!(first.contains("TP=1 FP=1 FN=2"), "{first}");
    assert!((parse_f1(first) - 0.4).abs() < 1e-4);
    assert!(report.lines().any(|l| l.starts_with("disease\t")));
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir);
    fs::write(
        dir.join("bad.toml"),
        "model = \"crf\"\nlearning_rte = 0.1\n",
    )
    .unwrap();
    assert_eq!(
        nerkit(dir, &["train", "--config", "bad.toml"])
            .status
            .code(),
        Some(2)
    );

    fs::write(
        dir.join("zero.toml"),
        "model = \"seq\"\ntrain = \"data/train.jsonl\"\nvalidation = \"data/validation.jsonl\"\noutput = \"r\"\n[training]\nbatch_size = 0\n",
    )
    .unwrap();
    assert_eq!(
        nerkit(dir, &["train", "--config", "zero.toml"])
            .status
            .code(),
        Some(2)
    );

    let missing = nerkit(dir, &["score", "--gold", "nope.tsv", "--pred", "nope.tsv"]);
    assert_eq!(missing.status.code(), Some(2));

    fs::write(dir.join("broken.tsv"), "s1\tgene\tx\t4\n").unwrap();
    let malformed = nerkit(
        dir,
        &["score", "--gold", "broken.tsv", "--pred", "broken.tsv"],
    );
    assert_eq!(malformed.status.code(), Some(1));
}

#[test]
fn config_file_drives_training() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir);
    fs::write(
        dir.join("run.toml"),
        "model = \"seq\"\ntrain = \"data/train.jsonl\"\nvalidation = \"data/validation.jsonl\"\noutput = \"r\"\n\
         [training]\nlearning_rate = 0.01\nmax_epochs = 2\n[encoder]\ndim = 8\n",
    )
    .unwrap();
    ok(dir, &["train", "--config", "run.toml", "--max-epochs", "3"]);
    let resolved: toml::Value =
        toml::from_str(&fs::read_to_string(dir.join("r/resolved-config.toml")).unwrap()).unwrap();
    assert_eq!(resolved["training"]["max_epochs"].as_integer(), Some(3));
    assert_eq!(resolved["encoder"]["dim"].as_integer(), Some(8));
    assert_eq!(
        fs::read_to_string(dir.join("r/metrics.tsv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn meta_pipeline_filters_a_subset_of_the_union() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir);
    train(dir, "seq", "seq", &[]);
    train(dir, "span", "span", &[]);
    ok(
        dir,
        &[
            "meta-prepare",
            "--run",
            "seq",
            "--run",
            "spanpred=span",
            "--validation",
            "data/validation.jsonl",
            "--train",
            "data/train.jsonl",
            "--out",
            "meta",
        ],
    );
    let examples = fs::read_to_string(dir.join("meta/meta-train.jsonl")).unwrap();
    assert!(examples.contains("\"source\":\"spanpred\""));
    ok(
        dir,
        &[
            "meta-train",
            "--train",
            "meta/meta-train.jsonl",
            "--validation",
            "meta/meta-heldout.jsonl",
            "--out",
            "m",
            "--max-epochs",
            "3",
            "--dim",
            "16",
        ],
    );
    ok(
        dir,
        &[
            "meta-filter",
            "--checkpoint",
            "m/meta.ckpt",
            "--input",
            "data/validation.jsonl",
            "--pred",
            "seq/epochs/epoch-004.tsv",
            "--pred",
            "span/epochs/epoch-004.tsv",
            "--out",
            "kept.tsv",
        ],
    );
    let all = ok(
        dir,
        &[
            "combine",
            "--mode",
            "union",
            "seq/epochs/epoch-004.tsv",
            "span/epochs/epoch-004.tsv",
        ],
    );
    let kept = fs::read_to_string(dir.join("kept.tsv")).unwrap();
    for line in kept.lines() {
        assert!(all.lines().any(|l| l == line), "{line}");
    }
}
