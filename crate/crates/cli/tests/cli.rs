mod common;

use std::collections::BTreeMap;
use std::fs;

use common::{run, stdout, write_long_tail};
use replaykit::allocation::allocate_budget;
use replaykit::provider::caption_key;
use replaykit::{
    io, validate_inventory, AllocationPlan, AssetRecord, EmbeddingTable, MetricReport, Split,
};
use serde_json::Value;

fn code(out: &std::process::Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &std::path::Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let out = run(&[]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["replay", "--help"])), 0);
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(code(&run(&["replay", "--bogus"])), 1);
    assert_eq!(
        code(&run(&[
            "allocate",
            "--metadata",
            "x",
            "--budget",
            "5",
            "--p-max",
            "250"
        ])),
        1
    );
}

#[test]
fn forgetting_prints_two_decimals() {
    let out = run(&[
        "eval",
        "forgetting",
        "--before",
        "29.60",
        "--after",
        "24.46",
        "--direction",
        "higher",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).trim(), "17.36");
    let out = run(&[
        "eval",
        "forgetting",
        "--before",
        "75.22",
        "--after",
        "72.01",
        "--direction",
        "lower",
    ]);
    assert_eq!(stdout(&out).trim(), "-4.27");
}

#[test]
fn forgetting_with_zero_before_is_data_error() {
    let out = run(&[
        "eval",
        "forgetting",
        "--before",
        "0",
        "--after",
        "1",
        "--direction",
        "higher",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn replay_budget_248_and_seed_echo() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_long_tail(dir.path());
    let manifest = dir.path().join("manifest.json");
    let out = run(&[
        "replay",
        "--metadata",
        p(&data.metadata),
        "--embeddings",
        p(&data.embeddings),
        "--novel-size",
        "1243",
        "--out",
        p(&manifest),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("seed 0"));
    let m = io::load_manifest(&manifest).unwrap();
    assert_eq!(m.allocation.budget, 248);
    assert_eq!(m.len(), 248);
    assert_eq!(m.params.seed, 0);
    assert!(m.metadata.input_digests.contains_key("metadata"));
    assert!(m.metadata.input_digests.contains_key("embeddings"));
}

#[test]
fn p_max_percent_and_fraction_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_long_tail(dir.path());
    let mut outputs = Vec::new();
    for (i, p_max) in ["30", "0.30"].iter().enumerate() {
        let path = dir.path().join(format!("m{i}.json"));
        let out = run(&[
            "replay",
            "--metadata",
            p(&data.metadata),
            "--embeddings",
            p(&data.embeddings),
            "--novel-size",
            "1243",
            "--p-max",
            p_max,
            "--out",
            p(&path),
        ]);
        assert_eq!(code(&out), 0);
        outputs.push(fs::read(&path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn kcenter_without_embedding_source_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_long_tail(dir.path());
    let out = run(&[
        "replay",
        "--metadata",
        p(&data.metadata),
        "--novel-size",
        "1243",
        "--out",
        p(&dir.path().join("m.json")),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_metadata_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "replay",
        "--metadata",
        p(&dir.path().join("absent.jsonl")),
        "--novel-size",
        "10",
        "--strategy",
        "random",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.jsonl"));
}

#[test]
fn malformed_metadata_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    fs::write(
        &path,
        "{\"asset_id\":\"a\",\"class_label\":\"x\",\"captions\":[\"c\"]}\n{oops\n",
    )
    .unwrap();
    let out = run(&["stats", "--metadata", p(&path)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn unreachable_service_from_env_is_service_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_long_tail(dir.path());
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let out = common::bin()
        .args([
            "replay",
            "--metadata",
            p(&data.metadata),
            "--novel-size",
            "1243",
            "--out",
        ])
        .arg(dir.path().join("m.json"))
        .env("REPLAYKIT_ENDPOINT", &url)
        .output()
        .unwrap();
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn random_strategy_needs_no_embeddings_and_follows_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_long_tail(dir.path());
    let mut picks = Vec::new();
    for seed in ["0", "0", "1"] {
        let path = dir.path().join("r.json");
        let out = run(&[
            "replay",
            "--metadata",
            p(&data.metadata),
            "--novel-size",
            "1243",
            "--strategy",
            "random",
            "--seed",
            seed,
            "--out",
            p(&path),
        ]);
        assert_eq!(code(&out), 0);
        assert!(stdout(&out).contains(&format!("seed {seed}")));
        picks.push(io::load_manifest(&path).unwrap().selections);
    }
    assert_eq!(picks[0], picks[1]);
    assert_ne!(picks[0], picks[2]);
}

#[test]
fn allocate_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_long_tail(dir.path());
    let out = run(&[
        "allocate",
        "--metadata",
        p(&data.metadata),
        "--replay-pct",
        "40",
        "--novel-size",
        "1243",
    ]);
    assert_eq!(code(&out), 0);
    let plan: AllocationPlan = serde_json::from_str(&stdout(&out)).unwrap();
    let inv = validate_inventory(io::load_metadata(&data.metadata).unwrap()).unwrap();
    assert_eq!(plan, allocate_budget(&inv, 497, 3, 20, 0.30).unwrap());

    let out = run(&[
        "allocate",
        "--metadata",
        p(&data.metadata),
        "--budget",
        "20",
    ]);
    assert_eq!(code(&out), 2, "20 slots across 45 classes is infeasible");
}

#[test]
fn allocate_then_select_equals_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_long_tail(dir.path());
    let plan = dir.path().join("plan.json");
    let manifest = dir.path().join("manifest.json");
    let sel = dir.path().join("sel.json");
    assert_eq!(
        code(&run(&[
            "allocate",
            "--metadata",
            p(&data.metadata),
            "--budget",
            "248",
            "--out",
            p(&plan)
        ])),
        0
    );
    let out = run(&[
        "select",
        "--metadata",
        p(&data.metadata),
        "--plan",
        p(&plan),
        "--embeddings",
        p(&data.embeddings),
        "--out",
        p(&sel),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "replay",
        "--metadata",
        p(&data.metadata),
        "--embeddings",
        p(&data.embeddings),
        "--novel-size",
        "1243",
        "--out",
        p(&manifest),
    ]);
    assert_eq!(code(&out), 0);
    let selected: Value = serde_json::from_slice(&fs::read(&sel).unwrap()).unwrap();
    let selections: BTreeMap<String, Vec<String>> =
        serde_json::from_value(selected["selections"].clone()).unwrap();
    assert_eq!(selections, io::load_manifest(&manifest).unwrap().selections);
    assert_eq!(selected["seed"], 0);
}

#[test]
fn replay_excludes_test_records_and_mixes() {
    let dir = tempfile::tempdir().unwrap();
    let (mut base, table) = common::synthetic("b", &[20, 12, 8], 3);
    for r in base.iter_mut().filter(|r| r.asset_id.ends_with("-0000")) {
        r.split = Split::Test;
    }
    let (mut novel, _) = common::synthetic("n", &[10, 10], 4);
    novel[0].split = Split::Test;
    let base_path = dir.path().join("base.jsonl");
    let novel_path = dir.path().join("novel.jsonl");
    let emb = dir.path().join("e.emb");
    io::save_metadata(&base_path, &base).unwrap();
    io::save_metadata(&novel_path, &novel).unwrap();
    io::save_embeddings(&emb, &table).unwrap();
    let manifest = dir.path().join("m.json");
    let mix = dir.path().join("mix.jsonl");
    let out = run(&[
        "replay",
        "--metadata",
        p(&base_path),
        "--novel-metadata",
        p(&novel_path),
        "--embeddings",
        p(&emb),
        "--replay-pct",
        "50",
        "--out",
        p(&manifest),
        "--mix-out",
        p(&mix),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = io::load_manifest(&manifest).unwrap();
    assert_eq!(m.metadata.novel_size, 19);
    assert_eq!(m.allocation.budget, 9);
    assert!(m.selected_ids().all(|id| !id.ends_with("-0000")));
    let mixed = io::load_metadata(&mix).unwrap();
    assert_eq!(mixed.len(), m.len() + 19);
    assert!(mixed.iter().all(|r| r.split != Split::Test));
    assert!(mixed.windows(2).all(|w| w[0].asset_id < w[1].asset_id));
}

fn class_file(dir: &std::path::Path, name: &str, labels: &[&str]) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("# {name}\n{}\n", labels.join("\n"))).unwrap();
    path
}

#[test]
fn split_writes_stage_files_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let (records, _) = common::synthetic("k", &[30, 25, 20, 16, 14, 40], 9);
    let meta = dir.path().join("all.jsonl");
    io::save_metadata(&meta, &records).unwrap();
    let base = class_file(dir.path(), "base.txt", &["k00", "k01", "k02"]);
    let novel = class_file(dir.path(), "novel.txt", &["k03", "k05"]);
    let out_dir = dir.path().join("splits");
    let out = run(&[
        "split",
        "--metadata",
        p(&meta),
        "--base-classes",
        p(&base),
        "--novel-classes",
        p(&novel),
        "--max-classes",
        "5",
        "--seed",
        "3",
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let base_records = io::load_metadata(out_dir.join("base.jsonl")).unwrap();
    let novel_records = io::load_metadata(out_dir.join("novel.jsonl")).unwrap();
    assert_eq!(base_records.len(), 75);
    assert_eq!(
        base_records
            .iter()
            .filter(|r| r.split == Split::Test)
            .count(),
        15
    );
    assert_eq!(novel_records.len(), 56);
    let stats: Value =
        serde_json::from_slice(&fs::read(out_dir.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["base"]["train"], 60);
    assert_eq!(stats["novel"]["test"], 10);
    assert_eq!(stats["seed"], 3);

    // k04 (14 assets) falls under the size filter
    let bad = class_file(dir.path(), "bad.txt", &["k04"]);
    let out = run(&[
        "split",
        "--metadata",
        p(&meta),
        "--base-classes",
        p(&base),
        "--novel-classes",
        p(&bad),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn split_from_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let (records, _) = common::synthetic("k", &[20, 20], 1);
    let meta = dir.path().join("all.jsonl");
    io::save_metadata(&meta, &records).unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"base_classes":["k00"],"novel_classes":["k01"],"test_per_class":2}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("s");
    let out = run(&[
        "split",
        "--metadata",
        p(&meta),
        "--spec",
        p(&spec),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stats: Value =
        serde_json::from_slice(&fs::read(out_dir.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["base"]["test"], 2);
}

#[test]
fn embed_file_mode_rekeys_by_caption_hash() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![
        AssetRecord::new("a", "x", ["red cube", "  ", "red cube"]),
        AssetRecord::new("b", "x", ["blue ball"]),
    ];
    let meta = dir.path().join("m.jsonl");
    io::save_metadata(&meta, &records).unwrap();
    let mut raw = EmbeddingTable::new(2);
    raw.insert("red cube", &[1.0, 0.0]).unwrap();
    raw.insert("blue ball", &[0.0, 1.0]).unwrap();
    let src = dir.path().join("raw.emb");
    io::save_embeddings(&src, &raw).unwrap();
    let dst = dir.path().join("keyed.emb");
    let out = run(&[
        "embed",
        "--metadata",
        p(&meta),
        "--provider",
        "file",
        "--table",
        p(&src),
        "--out",
        p(&dst),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let keyed = io::load_embeddings(&dst).unwrap();
    assert_eq!(keyed.len(), 2);
    assert_eq!(
        keyed.get(&caption_key("blue ball")),
        Some(&[0.0f32, 1.0][..])
    );

    let out = run(&[
        "embed",
        "--metadata",
        p(&meta),
        "--provider",
        "file",
        "--out",
        p(&dst),
    ]);
    assert_eq!(code(&out), 1, "file mode needs --table");
}

#[test]
fn eval_clip_groups_by_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = EmbeddingTable::new(2);
    text.insert("a", &[1.0, 0.0]).unwrap();
    text.insert("b", &[0.0, 1.0]).unwrap();
    let mut renders = EmbeddingTable::new(2);
    renders.insert("a/0", &[1.0, 0.0]).unwrap();
    renders.insert("a/1", &[0.0, 1.0]).unwrap();
    renders.insert("b/0", &[0.0, 2.0]).unwrap();
    let (tp, rp) = (dir.path().join("t.emb"), dir.path().join("r.emb"));
    io::save_embeddings(&tp, &text).unwrap();
    io::save_embeddings(&rp, &renders).unwrap();
    let out = run(&["eval", "clip", "--text", p(&tp), "--renders", p(&rp)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // a: (1 + 0) / 2, b: 1, mean 0.75
    assert_eq!(stdout(&out).trim(), "75.00");
}

fn features(path: &std::path::Path, rows: &[[f32; 2]]) {
    let mut t = EmbeddingTable::new(2);
    for (i, r) in rows.iter().enumerate() {
        t.insert(format!("r{i}"), r).unwrap();
    }
    io::save_embeddings(path, &t).unwrap();
}

#[test]
fn eval_fd_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let a = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let b = [[2.0, 0.0], [3.0, 0.0], [2.0, 1.0], [3.0, 1.0]];
    features(&dir.path().join("a.emb"), &a);
    features(&dir.path().join("b.emb"), &b);
    let out = run(&[
        "eval",
        "fd",
        "--generated",
        p(&dir.path().join("a.emb")),
        "--reference",
        p(&dir.path().join("b.emb")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).trim(), "4.0000");

    let config = dir.path().join("report.json");
    fs::write(
        &config,
        r#"{"metrics": [
            {"name": "CLIP", "direction": "higher_better", "base_before": 29.60,
             "base_scores": [24.46, 24.46], "novel_scores": [29.79, 29.79]},
            {"name": "FD", "direction": "lower_better",
             "base_generated": "a.emb", "base_reference": "a.emb",
             "novel_generated": "a.emb", "novel_reference": "b.emb"}
        ]}"#,
    )
    .unwrap();
    let json = dir.path().join("rows.json");
    let out = run(&["eval", "report", "--config", p(&config), "--out", p(&json)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("CLIP"));
    let rows: Vec<MetricReport> = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert!((rows[0].all - 27.125).abs() < 1e-9);
    assert!((rows[0].forgetting_pct.unwrap() - 17.3648).abs() < 1e-3);
    assert!(rows[1].base.abs() < 1e-9);
    assert!((rows[1].novel - 4.0).abs() < 1e-9);

    fs::write(
        &config,
        r#"{"metrics": [{"name": "X", "direction": "higher_better", "base_scores": [1.0]}]}"#,
    )
    .unwrap();
    assert_eq!(code(&run(&["eval", "report", "--config", p(&config)])), 1);
}

#[test]
fn stats_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (records, _) = common::synthetic("s", &[3, 5], 2);
    let meta = dir.path().join("m.jsonl");
    io::save_metadata(&meta, &records).unwrap();
    let out = run(&["stats", "--metadata", p(&meta)]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["total"], 8);
    assert_eq!(v["classes"], 2);
}
