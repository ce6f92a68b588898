//! End-to-end checks of the `poplab` binary: exit codes, JSON output
//! shapes, the documented flag surface, and worker-count independence of
//! printed results.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_poplab"));
    // Tests control the worker count explicitly where it matters.
    cmd.env_remove("POP_THREADS");
    cmd
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "command failed with status {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON: {e}\nstdout: {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

/// Tiny architecture used by the pipeline smoke tests.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        r#"{
            "num_layers": 3, "hidden": 32, "num_heads": 2, "num_kv_heads": 2,
            "head_dim": 16, "ffn_dim": 64, "vocab": 259, "max_seq": 256,
            "rope_theta": 10000.0
        }"#,
    )
    .unwrap();
    path
}

fn write_calib(dir: &Path) -> PathBuf {
    let path = dir.join("calib.jsonl");
    let lines = [
        r#"{"prompt": "the cache records", "response": " the next position"}"#,
        r#"{"prompt": "a deep layer", "response": " does less work"}"#,
        r#"{"prompt": "skip during prefill"}"#,
    ];
    std::fs::write(&path, lines.join("\n")).unwrap();
    path
}

/// Initializes a checkpoint in `dir` and returns its path.
fn init_checkpoint(dir: &Path, config: &Path) -> PathBuf {
    let ckpt = dir.join("model.ckpt");
    let out = bin()
        .args(["init", "--config"])
        .arg(config)
        .args(["--seed", "7", "--out"])
        .arg(&ckpt)
        .output()
        .unwrap();
    let json = stdout_json(&out);
    assert!(json["weights_hash"].is_string(), "init reports the weights hash");
    ckpt
}

#[test]
fn no_arguments_prints_usage_to_stderr_and_exits_1() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(1), "bare invocation is a usage error");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "usage text goes to stderr: {stderr}");
    assert!(out.stdout.is_empty(), "nothing on stdout for a usage error");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "help text on stderr: {stderr}");
}

#[test]
fn help_documents_every_subcommand_and_exits_0() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "--help succeeds");
    let stdout = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "init", "train", "generate", "importance", "plan", "pop-generate",
        "flops", "bench", "diagnose", "ablate", "figures",
    ] {
        assert!(stdout.contains(sub), "--help lists {sub}: {stdout}");
    }
}

#[test]
fn subcommand_help_documents_the_stable_flags() {
    let expect: HashMap<&str, Vec<&str>> = HashMap::from([
        ("plan", vec!["--ratio", "--strategy", "--no-indep-kv", "--no-boundary"]),
        ("flops", vec!["--config", "--ratio", "--seq-len"]),
        ("bench", vec!["--checkpoint", "--seq-len", "--batch", "--reps", "--seed"]),
        ("importance", vec!["--samples", "--stage-aware", "--temperature"]),
        ("pop-generate", vec!["--max-new", "--temperature", "--checkpoint"]),
        ("diagnose", vec!["--out", "--svg"]),
    ]);
    for (sub, flags) in expect {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{sub} --help succeeds");
        let stdout = String::from_utf8_lossy(&out.stdout);
        for flag in flags {
            assert!(stdout.contains(flag), "{sub} --help documents {flag}: {stdout}");
        }
    }
}

#[test]
fn plan_deep_third_of_36_layers_skips_25_through_36() {
    let out = bin()
        .args(["plan", "--layers", "36", "--ratio", "0.3333", "--strategy", "deep"])
        .output()
        .unwrap();
    let json = stdout_json(&out);
    let skip: Vec<u64> = json["skip_set"]
        .as_array()
        .expect("plan prints a skip_set array")
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(skip, (25..=36).collect::<Vec<u64>>(), "deep third of 36 layers");
    assert_eq!(json["indep_kv"], serde_json::json!(true));
    assert_eq!(json["boundary_handling"], serde_json::json!(true));
}

#[test]
fn flops_on_the_8b_config_prints_the_analytic_report() {
    let out = bin()
        .args(["flops", "--config"])
        .arg(repo_file("configs/llama3-8b.json"))
        .args(["--ratio", "0.3333"])
        .output()
        .unwrap();
    let json = stdout_json(&out);
    assert_eq!(json["seq_len"], serde_json::json!(2048), "default sequence length");
    let kv_fraction = json["kv_fraction"].as_f64().unwrap();
    assert!(
        (kv_fraction - 16_777_216.0 / 436_207_616.0).abs() < 1e-9,
        "kv_fraction {kv_fraction} matches the closed form"
    );
    let speedup = json["theoretical_speedup"].as_f64().unwrap();
    assert!(
        (1.3..=1.6).contains(&speedup),
        "deep-third speedup {speedup} in the expected band"
    );
}

#[test]
fn bad_flag_values_are_usage_errors() {
    let out = bin()
        .args(["plan", "--layers", "12", "--ratio", "banana"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "unparseable ratio is a usage error");

    let out = bin()
        .args(["plan", "--layers", "12", "--strategy", "sideways"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown strategy is a usage error");

    let out = bin()
        .args(["plan", "--layers", "12", "--ratio", "1.5"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "out-of-range ratio maps to exit 1");
}

#[test]
fn missing_and_malformed_input_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["generate", "--checkpoint"])
        .arg(dir.path().join("absent.ckpt"))
        .args(["--prompt", "hi"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "missing checkpoint is a file error");

    let config = write_tiny_config(dir.path());
    let ckpt = init_checkpoint(dir.path(), &config);
    let bad_calib = dir.path().join("bad.jsonl");
    std::fs::write(&bad_calib, "this is not json\n").unwrap();
    let out = bin()
        .args(["importance", "--checkpoint"])
        .arg(&ckpt)
        .arg("--calib")
        .arg(&bad_calib)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "malformed calibration is a format error");
}

#[test]
fn invalid_pop_threads_value_exits_1() {
    let out = bin()
        .env("POP_THREADS", "banana")
        .args(["plan", "--layers", "12"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "bad POP_THREADS is a config error");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("POP_THREADS"), "error names the variable: {stderr}");
}

#[test]
fn full_pipeline_init_train_generate_prune_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let ckpt = dir.path().join("trained.ckpt");
    let loss_csv = dir.path().join("loss.csv");

    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--corpus")
        .arg(repo_file("data/corpus.txt"))
        .args(["--steps", "30", "--batch", "2", "--seq-len", "32", "--warmup-steps", "5"])
        .args(["--seed", "1", "--out"])
        .arg(&ckpt)
        .arg("--loss-csv")
        .arg(&loss_csv)
        .output()
        .unwrap();
    let json = stdout_json(&out);
    assert!(json["heldout_loss"].as_f64().unwrap().is_finite());
    assert!(loss_csv.exists(), "per-step loss CSV lands on disk");

    let gen = bin()
        .args(["generate", "--checkpoint"])
        .arg(&ckpt)
        .args(["--prompt", "the cache", "--max-new", "12", "--temperature", "0"])
        .output()
        .unwrap();
    let gen_json = stdout_json(&gen);
    let full_tokens = gen_json["tokens"].as_array().unwrap().clone();
    assert!(!full_tokens.is_empty(), "greedy generation produces tokens");

    // Ratio 0 plan: the pruned pipeline must reproduce the full model.
    let pop = bin()
        .args(["pop-generate", "--checkpoint"])
        .arg(&ckpt)
        .args(["--prompt", "the cache", "--max-new", "12", "--temperature", "0"])
        .args(["--ratio", "0"])
        .output()
        .unwrap();
    let pop_json = stdout_json(&pop);
    assert_eq!(
        pop_json["tokens"].as_array().unwrap(),
        &full_tokens,
        "ratio-0 pruned generation is token-for-token identical"
    );

    // A real plan reports its skip set and still generates.
    let pruned = bin()
        .args(["pop-generate", "--checkpoint"])
        .arg(&ckpt)
        .args(["--prompt", "the cache records the next", "--max-new", "8"])
        .args(["--ratio", "1/3", "--strategy", "deep"])
        .output()
        .unwrap();
    let pruned_json = stdout_json(&pruned);
    assert_eq!(
        pruned_json["skipped_layers"],
        serde_json::json!([3]),
        "deep third of 3 layers skips the last one"
    );
}

#[test]
fn importance_diagnose_and_ablate_agree_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let ckpt = init_checkpoint(dir.path(), &config);
    let calib = write_calib(dir.path());

    let run = |threads: &str, extra: &[&str]| {
        let mut cmd = bin();
        cmd.env("POP_THREADS", threads);
        cmd.args(extra).arg("--checkpoint").arg(&ckpt);
        cmd.output().unwrap()
    };

    let importance = |threads: &str, dir_tag: &str| {
        let out_path = dir.path().join(format!("profile-{dir_tag}.json"));
        let out = bin()
            .env("POP_THREADS", threads)
            .args(["importance", "--stage-aware", "--seed", "3", "--checkpoint"])
            .arg(&ckpt)
            .arg("--calib")
            .arg(&calib)
            .arg("--out")
            .arg(&out_path)
            .output()
            .unwrap();
        stdout_json(&out);
        std::fs::read(out_path).unwrap()
    };
    assert_eq!(
        importance("1", "a"),
        importance("2", "b"),
        "importance profile bytes are identical for 1 and 2 workers"
    );

    let diag_one = run("1", &["diagnose", "--samples", "3", "--seq-len", "24", "--seed", "5"]);
    let diag_two = run("2", &["diagnose", "--samples", "3", "--seq-len", "24", "--seed", "5"]);
    assert_eq!(
        stdout_json(&diag_one),
        stdout_json(&diag_two),
        "drift output is worker-count independent"
    );

    let ablate = bin()
        .env("POP_THREADS", "2")
        .args(["ablate", "--seed", "9", "--checkpoint"])
        .arg(&ckpt)
        .arg("--calib")
        .arg(&calib)
        .output()
        .unwrap();
    let rows = stdout_json(&ablate);
    let variants: Vec<&str> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["variant"].as_str().unwrap())
        .collect();
    assert_eq!(
        variants,
        vec!["pop", "shallow", "interleaved", "no_indep_kv", "no_boundary", "full"],
        "ablation covers every variant in order"
    );
}

#[test]
fn diagnose_writes_csv_and_svg_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let ckpt = init_checkpoint(dir.path(), &config);
    let csv = dir.path().join("drift.csv");
    let svg = dir.path().join("drift.svg");
    let out = bin()
        .args(["diagnose", "--samples", "2", "--seq-len", "16", "--checkpoint"])
        .arg(&ckpt)
        .arg("--out")
        .arg(&csv)
        .arg("--svg")
        .arg(&svg)
        .output()
        .unwrap();
    let json = stdout_json(&out);
    assert_eq!(json["num_prompts"], serde_json::json!(2));
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(
        csv_text.starts_with("layer,skipped,hidden,k,v,attn_out"),
        "drift CSV schema: {csv_text}"
    );
    let svg_text = std::fs::read_to_string(&svg).unwrap();
    assert!(svg_text.starts_with("<svg"), "SVG artifact written");
}
