use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
arch.layers = 1
arch.embed_dim = 16
arch.heads = 2
arch.mlp_hidden = 32
steps = 12
batch_size = 4
eval_interval = 6
eval_max_len = 20
kl_max_len = 20
max_len = 20
n_candidates = 4
";

fn mpo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpo"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mpo(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs every subcommand in order and returns the primary artifacts.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fs::write(dir.join("small.cfg"), SMALL).unwrap();
    ok(dir, &["make-world", "--seed", "1", "--out", "world.json"]);
    ok(dir, &["make-corpus", "--world", "world.json", "--n", "10", "--seed", "2", "--out", "held.jsonl"]);
    #[rustfmt::skip]
    ok(dir, &["make-corpus", "--world", "world.json", "--n", "30", "--seed", "3", "--style", "found",
        "--exclude", "held.jsonl", "--out", "train.jsonl"]);
    #[rustfmt::skip]
    ok(dir, &["make-corpus", "--world", "world.json", "--n", "8", "--seed", "4",
        "--exclude", "held.jsonl", "--exclude", "train.jsonl", "--out", "po.jsonl"]);
    #[rustfmt::skip]
    ok(dir, &["sft", "--config", "small.cfg", "--seed", "5", "--world", "world.json", "--train", "train.jsonl",
        "--heldout", "held.jsonl", "--out", "sft.ckpt", "--set", "lr=0.003"]);
    #[rustfmt::skip]
    ok(dir, &["gen-candidates", "--config", "small.cfg", "--seed", "11", "--world", "world.json",
        "--model", "sft.ckpt", "--corpus", "po.jsonl", "--out", "cands.jsonl"]);
    #[rustfmt::skip]
    let summary = ok(dir, &["build-prefset", "--config", "small.cfg", "--candidates", "cands.jsonl",
        "--out", "prefs.jsonl", "--set", "zero_cer_preferred=false"]);
    assert!(summary.starts_with("8 items"), "{summary}");
    for mode in ["dpo-only", "mpo", "combined-rankings"] {
        let out = format!("{mode}.ckpt");
        #[rustfmt::skip]
        ok(dir, &["train", "--mode", mode, "--config", "small.cfg", "--seed", "9", "--world", "world.json",
            "--sft", "sft.ckpt", "--prefset", "prefs.jsonl", "--heldout", "held.jsonl", "--out", &out]);
    }
    let mut reports = Vec::new();
    for name in ["sft", "dpo-only", "mpo", "combined-rankings"] {
        let (model, report) = (format!("{name}.ckpt"), format!("{name}.eval.json"));
        #[rustfmt::skip]
        ok(dir, &["eval", "--world", "world.json", "--model", &model, "--heldout", "held.jsonl",
            "--name", name, "--max-len", "20", "--out", &report]);
        reports.push(report);
    }
    let mut args = vec!["compare", "--out", "table.csv"];
    args.extend(reports.iter().map(|s| s.as_str()));
    let table = ok(dir, &args);
    assert!(table.lines().any(|l| l.starts_with("mpo ")), "{table}");
    assert_eq!(table.lines().count(), 5);

    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .into_iter()
        .filter(|p| !p.to_string_lossy().ends_with(".manifest.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn full_pipeline_runs_and_reruns_identically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["mpo.ckpt", "mpo.ckpt.steps.csv", "mpo.ckpt.evals.csv", "prefs.jsonl", "table.csv"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    assert_eq!(first, pipeline(b.path()));

    // One manifest per command, each listing the digests of its outputs.
    let manifests: Vec<PathBuf> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".manifest.json"))
        .collect();
    assert_eq!(manifests.len(), 15);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join("mpo.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 5);
    let steps = fs::read_to_string(a.path().join("mpo.ckpt.steps.csv")).unwrap();
    let hash = m["config_hash"].as_str().unwrap();
    assert!(steps.lines().skip(1).all(|l| l.ends_with(hash)));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.cfg"), SMALL).unwrap();
    ok(d, &["make-world", "--seed", "1", "--out", "world.json"]);
    ok(d, &["make-corpus", "--world", "world.json", "--n", "6", "--seed", "2", "--out", "c.jsonl"]);

    let missing = mpo(d, &["make-corpus", "--world", "nope.json", "--n", "3", "--out", "x.jsonl"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));

    fs::write(d.join("garbled.jsonl"), "{not json\n").unwrap();
    #[rustfmt::skip]
    let garbled = mpo(d, &["sft", "--config", "small.cfg", "--world", "world.json", "--train", "garbled.jsonl",
        "--heldout", "c.jsonl", "--out", "m.ckpt"]);
    assert_eq!(garbled.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&garbled.stderr).contains("garbled.jsonl"));

    #[rustfmt::skip]
    let bad = mpo(d, &["sft", "--config", "small.cfg", "--world", "world.json", "--train", "c.jsonl",
        "--heldout", "c.jsonl", "--out", "m.ckpt", "--set", "batch_size=0"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("batch_size"));

    #[rustfmt::skip]
    let diverged = mpo(d, &["sft", "--config", "small.cfg", "--world", "world.json", "--train", "c.jsonl",
        "--heldout", "c.jsonl", "--out", "m.ckpt", "--lr", "1e300", "--set", "warmup_steps=0"]);
    assert_eq!(diverged.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&diverged.stderr).contains("m.ckpt.last-good"));
    assert!(d.join("m.ckpt.last-good").exists());

    // Tampering with a produced file is caught through its manifest.
    fs::write(d.join("c.jsonl"), fs::read_to_string(d.join("c.jsonl")).unwrap().replace("\"id\":0", "\"id\":9")).unwrap();
    let tampered = mpo(d, &["make-corpus", "--world", "world.json", "--n", "3", "--exclude", "c.jsonl", "--out", "y.jsonl"]);
    assert_eq!(tampered.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&tampered.stderr).contains("digest"));
}

#[test]
fn version_lists_format_versions() {
    let out = mpo(Path::new("."), &["--version"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(env!("CARGO_PKG_VERSION")) && text.contains("checkpoint format 1"), "{text}");
}

#[test]
fn compare_refuses_reports_from_different_heldout_sets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let report = |digest: &str| {
        format!(
            r#"{{"name":"r","heldout_digest":"{digest}","mean":{{"cer":0.0,"spk_sim":0.0,"prosody_rmse":0.0}},"heldout_ce":1.0,"per_item":[]}}"#
        )
    };
    fs::write(d.join("a.json"), report("aa")).unwrap();
    fs::write(d.join("b.json"), report("bb")).unwrap();
    let out = mpo(d, &["compare", "a.json", "b.json", "--out", "t.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("different held-out set"));
}
