use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng as _;
use serde_json::Value;

use elberto::corpus::{build_vocab, load_dataset, write_dataset, QType, QaExample};
use elberto::encoder::EncoderConfig;
use elberto::eval::{dataset_fingerprint, evaluate};
use elberto::model::Model;
use elberto::rng::SeedPath;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

fn toy_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy.jsonl")
}

fn elberto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elberto"))
        .args(args)
        .current_dir(repo_root())
        .output()
        .unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

#[test]
fn untrained_model_is_near_chance() {
    let examples = elberto::toy::generate(3000, 99, "chance");
    let vocab = build_vocab(&examples, 2).unwrap();
    let mc = EncoderConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        ..EncoderConfig::toy(vocab.len())
    };
    let model = Model::init(&mc, &mut SeedPath::new(8).rng()).unwrap();
    let r = evaluate(&model, &vocab, &examples).unwrap();
    assert!((0.28..=0.39).contains(&r.accuracy), "accuracy {}", r.accuracy);
    let counted: usize = r.per_qtype.values().map(|t| t.count).sum();
    assert_eq!(counted, 3000);
}

#[test]
fn evaluation_is_idempotent() {
    let examples = elberto::toy::generate(60, 3, "idem");
    let vocab = build_vocab(&examples, 1).unwrap();
    let mc = EncoderConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        ..EncoderConfig::toy(vocab.len())
    };
    let model = Model::init(&mc, &mut SeedPath::new(1).rng()).unwrap();
    let a = evaluate(&model, &vocab, &examples).unwrap();
    let b = evaluate(&model, &vocab, &examples).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.predictions_csv(), b.predictions_csv());
    assert_eq!(a.dataset_fingerprint, dataset_fingerprint(&examples));
}

fn gibberish(n: usize, seed: u64) -> Vec<QaExample> {
    let mut rng = SeedPath::new(seed).rng();
    let mut word = || -> String { (0..6).map(|_| rng.gen_range(b'a'..=b'z') as char).collect() };
    (0..n)
        .map(|i| QaExample {
            id: format!("g-{i:04}"),
            context: format!("{} {} {}. {} {}.", word(), word(), word(), word(), word()),
            question: format!("{} {}?", word(), word()),
            options: vec![word(), word(), word()],
            gold: i % 3,
            qtype: QType::Unlabeled,
            entities: None,
        })
        .collect()
}

#[test]
fn cli_pipeline_eval_and_transfer() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    let toy = toy_path();
    let toy = toy.to_str().unwrap();

    let out = elberto(&[
        "gen-tasks",
        "--data",
        toy,
        "--tasks",
        "bsop,jp",
        "--seed",
        "3",
        "--out",
        &p("tasks"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("tasks/bsop.jsonl").exists());
    assert!(!tmp.path().join("tasks/crl.jsonl").exists());
    let stats: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("tasks/stats.json")).unwrap()).unwrap();
    assert!(stats["tasks"]["bsop"]["emitted"].as_u64().unwrap() <= 200);

    let cfg = tmp.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "seed = 2\n[model]\nd_model = 16\nn_heads = 2\nd_ff = 32\n[train]\nepochs = 1\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = elberto(&[
        "train",
        "--config",
        cfg,
        "--data",
        toy,
        "--tasks-dir",
        &p("tasks"),
        "--quiet",
        "--out",
        &p("run"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(tmp.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"type\":\"step\"")).count(), 50);

    let ckpt = p("run/final");
    let out = elberto(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--data",
        toy,
        "--out",
        &p("e1.json"),
        "--csv",
        &p("e1.csv"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = elberto(&["eval", "--checkpoint", &ckpt, "--data", toy, "--out", &p("e2.json")]);
    assert!(out.status.success());
    let e1 = fs::read(tmp.path().join("e1.json")).unwrap();
    assert_eq!(e1, fs::read(tmp.path().join("e2.json")).unwrap());
    let csv = fs::read_to_string(tmp.path().join("e1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);

    // transfer to the same corpus reproduces the plain evaluation
    let out = elberto(&[
        "transfer-eval",
        "--checkpoint",
        &ckpt,
        "--data",
        toy,
        "--out",
        &p("t.json"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let e: Value = serde_json::from_slice(&e1).unwrap();
    let t: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("t.json")).unwrap()).unwrap();
    for key in [
        "accuracy",
        "per_qtype",
        "predictions",
        "dataset_fingerprint",
        "config_fingerprint",
    ] {
        assert_eq!(e[key], t[key], "{key}");
    }
    assert!(t["source_fingerprint"].is_string());

    // an unrelated vocabulary still evaluates, mostly through UNK
    let far = tmp.path().join("far.jsonl");
    write_dataset(&far, &gibberish(300, 5)).unwrap();
    let out = elberto(&[
        "transfer-eval",
        "--checkpoint",
        &ckpt,
        "--data",
        far.to_str().unwrap(),
        "--out",
        &p("far.json"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let far_report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("far.json")).unwrap()).unwrap();
    let acc = far_report["accuracy"].as_f64().unwrap();
    assert!((0.25..=0.42).contains(&acc), "accuracy {acc}");
    assert_eq!(load_dataset(&far).unwrap().len(), 300);
}

#[test]
fn cli_gradcheck_with_shipped_config() {
    let out = elberto(&["gradcheck", "--config", "configs/toy.cfg"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("max relative error") && text.contains("PASS"), "{text}");
}

#[test]
fn cli_ablate_two_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "[model]\nd_model = 16\nn_heads = 2\nd_ff = 32\n[train]\nepochs = 1\n",
    )
    .unwrap();
    let toy = toy_path();
    let out_dir = tmp.path().join("abl");
    let out = elberto(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        toy.to_str().unwrap(),
        "--rows",
        "none;mlm",
        "--quiet",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["tasks"], "none");
    assert_eq!(rows[1]["tasks"], "mlm");
    assert!(fs::read_to_string(out_dir.join("ablation.txt"))
        .unwrap()
        .contains("mlm"));
}

#[test]
fn cli_errors_are_structured() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\n[model]\nd_modle = 16\n").unwrap();
    let out = elberto(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains(":3:"), "{err}");

    let out = elberto(&["train", "--out", tmp.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("--data"));

    let out = elberto(&["eval", "--checkpoint", "/nonexistent", "--data", "/nonexistent.jsonl"]);
    assert!(!out.status.success());
    stderr_json(&out);

    let out = elberto(&["frobnicate"]);
    assert!(!out.status.success());

    let out = Command::new(env!("CARGO_BIN_EXE_elberto"))
        .args(["gradcheck", "--samples", "5"])
        .env("ELBERTO_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
