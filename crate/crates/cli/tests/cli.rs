use std::path::Path;
use std::process::{Command, Output};

fn skillbank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skillbank"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_world(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let path = dir.join(name);
    let mut args = vec!["gen-world", "--out", s(&path)];
    args.extend_from_slice(extra);
    let out = skillbank(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn write_config(dir: &Path, world: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.json");
    std::fs::write(
        &path,
        format!(r#"{{"world": {:?}, "rounds": 3{extra}}}"#, s(world)),
    )
    .unwrap();
    path
}

#[test]
fn gen_world_is_reproducible_with_disjoint_splits() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_world(dir.path(), "a.json", &["--seed", "4"]);
    let b = gen_world(dir.path(), "b.json", &["--seed", "4"]);
    let c = gen_world(dir.path(), "c.json", &["--seed", "5"]);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));

    let v: serde_json::Value = serde_json::from_slice(&read(&a)).unwrap();
    let mut ids = std::collections::HashSet::new();
    for t in v["tasks"].as_array().unwrap() {
        assert!(ids.insert(t["task_id"].as_str().unwrap().to_string()));
    }
    assert_eq!(ids.len(), 3 * 24);
}

#[test]
fn gen_world_rejects_bad_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let out = skillbank(&[
        "gen-world",
        "--solvable-fraction",
        "1.5",
        "--out",
        s(&dir.path().join("w.json")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn curate_then_report_and_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let world = gen_world(dir.path(), "w.json", &["--seed", "2"]);
    let cfg = write_config(dir.path(), &world, "");
    let run = dir.path().join("run");
    let out = skillbank(&["curate", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "bank.json",
        "rounds.jsonl",
        "timings.jsonl",
        "cache_stats.json",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    let csv_path = dir.path().join("series.csv");
    let out = skillbank(&[
        "report",
        "--rounds",
        s(&run.join("rounds.jsonl")),
        "--out",
        s(&csv_path),
    ]);
    assert_eq!(code(&out), 0);
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        vec![
            "round",
            "bank_size",
            "util",
            "div",
            "cov",
            "winner_is_null",
            "cache_hit_rate"
        ]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    let rounds_text = std::fs::read_to_string(run.join("rounds.jsonl")).unwrap();
    let last: serde_json::Value =
        serde_json::from_str(rounds_text.lines().last().unwrap()).unwrap();
    let last_row = rows.last().unwrap();
    assert_eq!(last_row[0], *"3");
    assert_eq!(last_row[1], last["bank_size"].to_string());
    assert_eq!(last_row[2], last["profile"]["util"].to_string());

    let eval_path = dir.path().join("eval.json");
    let out = skillbank(&[
        "eval",
        "--bank",
        s(&run.join("bank.json")),
        "--world",
        s(&world),
        "--config",
        s(&cfg),
        "--out",
        s(&eval_path),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&eval_path).unwrap()).unwrap();
    for k in ["util", "div", "cov"] {
        assert_eq!(eval[k], last["profile"][k], "{k}");
    }
}

#[test]
fn curate_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let world = gen_world(dir.path(), "w.json", &["--seed", "3"]);
    let cfg = write_config(dir.path(), &world, "");
    let run = dir.path().join("run");
    let out = skillbank(&[
        "curate",
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "--rounds",
        "2",
        "--objectives",
        "util,div",
        "--edit-ops",
        "add",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(run.join("rounds.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);
    for line in text.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["pools"]["remove"], 0);
        assert_eq!(r["pools"]["rewrite"], 0);
    }
}

#[test]
fn all_solvable_world_gives_empty_bank() {
    let dir = tempfile::tempdir().unwrap();
    let world = gen_world(dir.path(), "w.json", &["--solvable-fraction", "1.0"]);
    let cfg = write_config(dir.path(), &world, "");
    let run = dir.path().join("run");
    assert_eq!(
        code(&skillbank(&[
            "curate",
            "--config",
            s(&cfg),
            "--out",
            s(&run),
            "--rounds",
            "0"
        ])),
        0
    );
    let bank: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("bank.json")).unwrap()).unwrap();
    assert_eq!(bank["skills"].as_array().unwrap().len(), 0);

    let out = skillbank(&[
        "eval",
        "--bank",
        s(&run.join("bank.json")),
        "--world",
        s(&world),
    ]);
    assert_eq!(code(&out), 0);
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["util", "div", "cov"] {
        assert_eq!(eval[k], 0.0, "{k}");
    }
}

#[test]
fn bad_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing_world = write_config(dir.path(), &dir.path().join("nope.json"), "");
    let out = skillbank(&[
        "curate",
        "--config",
        s(&missing_world),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 2);

    let world = gen_world(dir.path(), "w.json", &[]);
    let bad_cfg = write_config(dir.path(), &world, r#", "candidates": 0"#);
    let out = skillbank(&[
        "curate",
        "--config",
        s(&bad_cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&out), 2);

    let cfg = write_config(dir.path(), &world, "");
    let out = skillbank(&[
        "curate",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
        "--objectives",
        "div",
    ]);
    assert_eq!(code(&out), 2);

    let out = skillbank(&[
        "eval",
        "--bank",
        s(&dir.path().join("none.json")),
        "--world",
        s(&world),
    ]);
    assert_eq!(code(&out), 2);

    let out = skillbank(&[
        "report",
        "--rounds",
        s(&dir.path().join("none.jsonl")),
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    assert_eq!(code(&out), 2);

    let out = skillbank(&[
        "inspect-cache",
        "--cache-dir",
        s(&dir.path().join("nocache")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn runtime_failure_exits_with_one() {
    // The output path is a regular file, so artifacts cannot be written.
    let dir = tempfile::tempdir().unwrap();
    let world = gen_world(dir.path(), "w.json", &[]);
    let cfg = write_config(dir.path(), &world, "");
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "x").unwrap();
    let out = skillbank(&["curate", "--config", s(&cfg), "--out", s(&blocker)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn report_on_empty_rounds_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("rounds.jsonl");
    std::fs::write(&empty, "").unwrap();
    let csv_path = dir.path().join("out.csv");
    assert_eq!(
        code(&skillbank(&[
            "report",
            "--rounds",
            s(&empty),
            "--out",
            s(&csv_path)
        ])),
        0
    );
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn persistent_cache_can_be_inspected_and_purged() {
    let dir = tempfile::tempdir().unwrap();
    let world = gen_world(dir.path(), "w.json", &[]);
    let cfg = write_config(dir.path(), &world, "");
    let cache = dir.path().join("cache");
    let out = skillbank(&[
        "curate",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("run")),
        "--cache-dir",
        s(&cache),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let out = skillbank(&["inspect-cache", "--cache-dir", s(&cache)]);
    assert_eq!(code(&out), 0);
    let inv: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(inv.to_string().contains("synthetic-v1"));

    let out = skillbank(&[
        "purge-cache",
        "--cache-dir",
        s(&cache),
        "--worker-version",
        "other",
    ]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let removed: usize = stdout.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(removed > 0);

    let out = skillbank(&[
        "purge-cache",
        "--cache-dir",
        s(&cache),
        "--worker-version",
        "other",
    ]);
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "removed 0 stale entries"
    );
}
