use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn kgcorrect(work: &Path, args: &[&str]) -> Output {
    let f = fixtures();
    Command::new(env!("CARGO_BIN_EXE_kgcorrect"))
        .arg("--config")
        .arg(f.join("tiny.toml"))
        .arg("--work-dir")
        .arg(work)
        .arg("--set")
        .arg(format!("paths.entities=\"{}\"", f.join("kg/entities.tsv").display()))
        .arg("--set")
        .arg(format!("paths.triples=\"{}\"", f.join("kg/triples.tsv").display()))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(work: &Path, args: &[&str]) -> String {
    let out = kgcorrect(work, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn rewrite_before_build_index() {
    let dir = tempfile::tempdir().unwrap();
    let out = kgcorrect(dir.path(), &["rewrite", "play bad boy dance"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run build-index first"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kgcorrect(dir.path(), &["--set", "l1.train.momentum=0.9", "ingest"]);
    assert_eq!(out.status.code(), Some(1));
    let out = kgcorrect(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    let out = kgcorrect(dir.path(), &["--variant", "half", "ingest"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "not\ta\tvalid\textra\n").unwrap();
    let out = kgcorrect(dir.path(), &["ingest", "--entities", bad.to_str().unwrap(), "--triples", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_kg_writes_ingestable_files() {
    let dir = tempfile::tempdir().unwrap();
    let e = dir.path().join("in/e.tsv");
    let t = dir.path().join("in/t.tsv");
    let set_e = format!("paths.entities=\"{}\"", e.display());
    let set_t = format!("paths.triples=\"{}\"", t.display());
    ok(dir.path(), &["--set", &set_e, "--set", &set_t, "synth-kg"]);
    let out = ok(dir.path(), &["ingest", "--entities", e.to_str().unwrap(), "--triples", t.to_str().unwrap()]);
    assert!(out.contains("ingested"));
    assert!(dir.path().join("kg/entities.tsv").exists());
}

#[test]
fn desk_pipeline_on_shipped_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    for stage in ["ingest", "pretrain-kg", "gen-data"] {
        ok(w, &[stage]);
    }
    ok(w, &["train-l1", "--miner"]);
    ok(w, &["mine-negatives"]);
    for stage in ["train-l1", "build-index", "train-l2"] {
        ok(w, &[stage]);
    }
    let sweep = ok(w, &["sweep-theta"]);
    assert!(sweep.contains("chosen theta"));
    let report = ok(w, &["evaluate"]);
    assert!(report.contains("full/always/kg_relation"), "{report}");
    for f in ["reports/full/sweep.json", "reports/full/report.txt", "reports/full/report.kv", "reports/full/report.json"] {
        assert!(w.join(f).exists(), "{f}");
    }
    for m in ["ingest", "gen-data", "mine-negatives", "train-l2.full", "evaluate.full"] {
        let text = std::fs::read_to_string(w.join(format!("manifests/{m}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
        assert!(v["outputs"].as_object().unwrap().len() >= 1);
    }

    let r = ok(w, &["rewrite", "--always", "--hypothesis", "Music | PlayMusicIntent | SongName: bad boy dance", "play bad boy dance by lady gaga"]);
    assert!(r.starts_with("triggered\ttrue"), "{r}");
    assert_eq!(r.lines().filter(|l| l.starts_with("candidate\t")).count(), 10);
    let r = ok(w, &["rewrite", "--theta", "1e9", "play bad boy dance by lady gaga"]);
    assert!(r.contains("span\tnull") && r.contains("output\tplay bad boy dance by lady gaga"), "{r}");

    let batch = w.join("batch.jsonl");
    std::fs::write(&batch, "{\"utterance\": \"weather in carson city\"}\n\n{\"utterance\": \"play bad romance\", \"hypothesis\": \"Music | PlayMusicIntent | SongName: bad romance\"}\n").unwrap();
    let lines = ok(w, &["rewrite", "--batch", batch.to_str().unwrap()]);
    let recs: Vec<serde_json::Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0]["input"], "weather in carson city");
    assert!(recs[1]["triggered"].is_boolean());

    let q = ok(w, &["query", "--k", "3", "weather in carson city"]);
    assert_eq!(q.lines().count(), 3);
    let s = ok(w, &["score-pair", "play bad boy dance", "bad romance"]);
    assert!(s.contains("rank_score"));
    let rep = w.join("reports/full/report.json");
    let d = ok(w, &["compare", rep.to_str().unwrap(), rep.to_str().unwrap()]);
    assert!(d.contains("dtr=+0.0000"));

    // A retrained L1 with a different seed no longer matches the index.
    ok(w, &["--seed", "5", "train-l1"]);
    let out = kgcorrect(w, &["rewrite", "play bad romance"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rerun build-index"));
}
