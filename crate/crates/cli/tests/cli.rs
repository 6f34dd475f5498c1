use std::path::Path;
use std::process::{Command, Output};

fn cascadenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascadenet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = cascadenet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(&stdout).unwrap_or(serde_json::Value::Null)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SYNTH: &str = "n_cascades = 300\nn_communities = 6\nusers_per_community = 15\n";

fn config(dir: &Path, corpus: &Path, text: &Path, lr: f64) -> String {
    format!(
        r#"output_dir = "{}"
architectures = ["SI-TEXT", "MI-SPARSE"]

[corpus]
kind = "file"
path = "{}"

[text]
kind = "file"
path = "{}"

[train]
runs = 2
max_epochs = 3
patience = 2
lr = {lr:e}

[bootstrap]
resamples = 50
"#,
        dir.join("run").display(),
        corpus.display(),
        text.display()
    )
}

#[test]
fn stages_chain_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("synth.toml"), SYNTH).unwrap();
    let (corpus, text) = (d.join("corpus.jsonl"), d.join("text.cem1"));
    let summary = ok(&[
        "synth", "--seed", "4", "--params", s(&d.join("synth.toml")), "--out", s(&corpus),
        "--text-out", s(&text), "--text-dim", "32",
    ]);
    assert_eq!(summary["cascades"], 300);

    let again = ok(&["ingest", "--input", s(&corpus), "--out", s(&d.join("canon.jsonl"))]);
    assert_eq!(again, summary);
    assert_eq!(std::fs::read(&corpus).unwrap(), std::fs::read(d.join("canon.jsonl")).unwrap());

    let vocab = ok(&["vocab", "--corpus", s(&corpus), "--threshold", "2", "--out", s(&d.join("vocab.json"))]);
    assert!(vocab["users"].as_u64().unwrap() > 0);
    ok(&["vectorize", "--corpus", s(&corpus), "--vocab", s(&d.join("vocab.json")), "--out", s(&d.join("sparse.jsonl"))]);
    let lines = std::fs::read_to_string(d.join("sparse.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 300);

    std::fs::write(d.join("m2v.toml"), "dim = 8\nepochs = 3\n").unwrap();
    let m2v = ok(&["m2v-train", "--corpus", s(&corpus), "--params", s(&d.join("m2v.toml")), "--out", s(&d.join("m2v.cem1"))]);
    assert_eq!(m2v["epoch_losses"].as_array().unwrap().len(), 3);

    let retro = ok(&["retrofit", "--corpus", s(&corpus), "--text", s(&text), "--out", s(&d.join("retro.cem1"))]);
    assert!(retro["sweeps"].as_u64().unwrap() >= 1);

    let cluster = ok(&["cluster", "--corpus", s(&corpus), "--svg", s(&d.join("fig.svg"))]);
    assert!(cluster["points"].as_u64().unwrap() > 0);
    assert!(std::fs::read_to_string(d.join("fig.svg")).unwrap().starts_with("<svg"));
    assert!(d.join("fig.json").exists());
}

#[test]
fn run_then_score_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("synth.toml"), SYNTH).unwrap();
    let (corpus, text) = (d.join("corpus.jsonl"), d.join("text.cem1"));
    ok(&[
        "synth", "--params", s(&d.join("synth.toml")), "--out", s(&corpus), "--text-out", s(&text), "--text-dim", "16",
    ]);
    let cfg = d.join("exp.toml");
    std::fs::write(&cfg, config(d, &corpus, &text, 1e-3)).unwrap();

    let out = cascadenet(&["run", "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("Overall performance"));
    let run = d.join("run");
    let report = std::fs::read(run.join("report.json")).unwrap();

    let rerun = d.join("rerun");
    let out = cascadenet(&["run", "--manifest", s(&run.join("manifest.json")), "--output-dir", s(&rerun)]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(rerun.join("report.json")).unwrap(), report);

    let preds = |name: &str| run.join("predictions").join(format!("{name}-seed1.jsonl"));
    let scores = ok(&["eval", "--corpus", s(&corpus), "--predictions", s(&preds("MI-SPARSE"))]);
    assert!(scores["accuracy"].as_f64().unwrap() > 0.0);

    let same = ok(&[
        "significance", "--corpus", s(&corpus), "--model", s(&preds("SI-TEXT")), "--baseline", s(&preds("SI-TEXT")),
        "--resamples", "100",
    ]);
    assert_eq!(same["macro_f1_delta"], 0.0);
    assert_eq!(same["macro_f1_stars"], "");

    let single = ok(&["train", "--config", s(&cfg), "--arch", "MI-SPARSE", "--seed", "9"]);
    assert_eq!(single["seed"], 9);
    assert!(run.join("checkpoints/MI-SPARSE-seed9.ckpt").exists());
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let missing = d.join("nope.jsonl");
    assert_eq!(cascadenet(&["ingest", "--input", s(&missing)]).status.code(), Some(2));

    std::fs::write(d.join("bad.toml"), "output_dir = 3\n").unwrap();
    assert_eq!(cascadenet(&["run", "--config", s(&d.join("bad.toml"))]).status.code(), Some(2));

    std::fs::write(d.join("synth.toml"), SYNTH).unwrap();
    let (corpus, text) = (d.join("corpus.jsonl"), d.join("text.cem1"));
    ok(&["synth", "--params", s(&d.join("synth.toml")), "--out", s(&corpus), "--text-out", s(&text), "--text-dim", "8"]);
    let out = cascadenet(&["retrofit", "--corpus", s(&corpus), "--text", s(&d.join("none.cem1")), "--out", s(&d.join("r.cem1"))]);
    assert_eq!(out.status.code(), Some(2));
    // Rows are matched by position, so a reordered corpus is misaligned.
    let mut shuffled = std::fs::read_to_string(&corpus).unwrap().lines().map(String::from).collect::<Vec<_>>();
    shuffled.reverse();
    std::fs::write(d.join("reversed.jsonl"), shuffled.join("\n") + "\n").unwrap();
    let out = cascadenet(&["retrofit", "--corpus", s(&d.join("reversed.jsonl")), "--text", s(&text), "--out", s(&d.join("r.cem1"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = d.join("exp.toml");
    std::fs::write(&cfg, config(d, &corpus, &text, 1e300)).unwrap();
    let out = cascadenet(&["train", "--config", s(&cfg), "--arch", "SI-TEXT", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
