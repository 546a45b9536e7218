//! End-to-end behavior of the `tessera` binary: exit codes, echoed configs,
//! and the artifacts each subcommand leaves behind.

use std::path::{Path, PathBuf};
use std::process::Output;
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tessera")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    std::process::Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn tessera")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small corpus (24 tiles of 64 px) plus a 2-step checkpoint, built once and
/// shared by the read-only tests.
struct Fixture {
    dir: TempDir,
    manifest: PathBuf,
    run: PathBuf,
}

const TINY_ENCODER: &str = r#"{
    "dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 2, "channels": 3,
    "tile_side": 64, "registers": 1, "patch_sizes": [16, 32],
    "rope": true, "rope_base": 100.0, "resize_mode": "pseudo_inverse"
}"#;

fn tiny_train_config(manifest: &Path, steps: usize) -> String {
    format!(
        r#"{{
        "train": {{
            "encoder": {TINY_ENCODER},
            "head_hidden": 16, "head_out": 32,
            "global_crop": 64, "local_crop": 32, "n_local": 1,
            "batch_tiles": 2, "steps": {steps},
            "lr": {{ "base": 0.001, "floor": 0.00001, "warmup_steps": 1, "total_steps": {steps} }},
            "seed": 3
        }},
        "manifest": {}
    }}"#,
        serde_json::to_string(manifest).unwrap()
    )
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let out = run_in(
            dir.path(),
            &[
                "make-corpus",
                "--out",
                "corpus-run",
                "--slides-per-class",
                "1",
                "--tiles-per-slide",
                "4",
                "--extent",
                "512",
                "--mpps",
                "0.25",
                "--tile-sizes",
                "64",
                "--seed",
                "5",
            ],
        );
        assert_eq!(code(&out), 0, "fixture corpus: {}", stderr(&out));
        let manifest = dir.path().join("corpus-run/corpus/manifest.jsonl");

        std::fs::write(dir.path().join("tiny-train.json"), tiny_train_config(&manifest, 2)).unwrap();
        let out = run_in(
            dir.path(),
            &["train", "--config", "tiny-train.json", "--out", "train-run"],
        );
        assert_eq!(code(&out), 0, "fixture train: {}", stderr(&out));
        Fixture {
            manifest,
            run: dir.path().join("train-run"),
            dir,
        }
    })
}

#[test]
fn make_corpus_reports_every_requested_stratum() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "make-corpus",
            "--out",
            "r",
            "--slides-per-class",
            "1",
            "--tiles-per-slide",
            "1",
            "--extent",
            "1024",
            "--mpps",
            "0.25,0.5,1.0,2.0",
            "--tile-sizes",
            "32,64",
            "--seed",
            "2",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let strata = text.lines().filter(|l| l.starts_with("mpp ")).count();
    assert_eq!(strata, 8, "{text}");
    assert!(text.contains("across 8 strata"), "{text}");
    assert!(dir.path().join("r/make-corpus-config.json").is_file());
}

#[test]
fn same_seed_corpora_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    for name in ["a", "b"] {
        let out = run_in(
            dir.path(),
            &[
                "make-corpus", "--out", name, "--slides-per-class", "1", "--tiles-per-slide", "2",
                "--extent", "512", "--mpps", "0.5", "--tile-sizes", "64", "--seed", "9",
            ],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = std::fs::read(dir.path().join("a/corpus/manifest.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/corpus/manifest.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_tiles_is_a_valid_empty_corpus() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "make-corpus", "--out", "r", "--slides-per-class", "1", "--tiles-per-slide", "0",
            "--extent", "512", "--mpps", "0.25", "--tile-sizes", "64",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("0 tiles"));
    let manifest = std::fs::read_to_string(dir.path().join("r/corpus/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1, "header only");
}

#[test]
fn unwritable_output_root_exits_two() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("blocker"), b"file").unwrap();
    let out = run_in(
        dir.path(),
        &["make-corpus", "--out", "blocker/nested", "--tiles-per-slide", "0"],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("output dir"), "{}", stderr(&out));
}

#[test]
fn corpus_respects_the_output_env_var() {
    let dir = TempDir::new().unwrap();
    let out = std::process::Command::new(bin())
        .args([
            "make-corpus", "--slides-per-class", "1", "--tiles-per-slide", "0", "--extent", "512",
            "--mpps", "0.25", "--tile-sizes", "64",
        ])
        .current_dir(dir.path())
        .env("TESSERA_OUT", dir.path().join("from-env"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("from-env/corpus/manifest.jsonl").is_file());
}

#[test]
fn train_without_a_manifest_exits_two() {
    let dir = TempDir::new().unwrap();
    let out = run_in(dir.path(), &["train", "--out", "r"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("manifest"), "{}", stderr(&out));

    let out = run_in(dir.path(), &["train", "--out", "r", "--manifest", "nope.jsonl"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("not found"), "{}", stderr(&out));
}

#[test]
fn zero_steps_still_checkpoints_the_initial_weights() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("t.json");
    std::fs::write(&cfg, tiny_train_config(&fx.manifest, 2)).unwrap();
    let out = run_in(
        dir.path(),
        &["train", "--config", "t.json", "--out", "r", "--steps", "0"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(dir.path().join("r/metrics.jsonl")).unwrap(), "");
    assert!(dir.path().join("r/teacher_encoder.ckpt").is_file());
    assert!(dir.path().join("r/student_encoder.ckpt").is_file());
}

#[test]
fn train_writes_one_metrics_line_per_step() {
    let fx = fixture();
    let text = std::fs::read_to_string(fx.run.join("metrics.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("loss_total").unwrap().as_f64().unwrap().is_finite());
    }
    assert!(fx.run.join("train-config.json").is_file());
}

#[test]
fn fp16_overflow_storm_exits_three_with_a_report() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("t.json");
    std::fs::write(&cfg, tiny_train_config(&fx.manifest, 6)).unwrap();
    let out = run_in(
        dir.path(),
        &[
            "train", "--config", "t.json", "--out", "r", "--precision", "fp16_range",
            "--head-init-scale", "1e8", "--overflow-threshold", "2",
        ],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("overflow"), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/overflow-report.json")).unwrap()).unwrap();
    assert_eq!(report["consecutive_aborts"], 3);
    let metrics = std::fs::read_to_string(dir.path().join("r/metrics.jsonl")).unwrap();
    assert!(metrics.lines().all(|l| l.contains("\"event\":\"overflow\"")), "{metrics}");
    assert!(metrics.contains("dino_head.logits"), "{metrics}");
}

#[test]
fn the_same_scenario_survives_bf16_range() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("t.json");
    std::fs::write(&cfg, tiny_train_config(&fx.manifest, 4)).unwrap();
    let out = run_in(
        dir.path(),
        &[
            "train", "--config", "t.json", "--out", "r", "--precision", "bf16_range",
            "--head-init-scale", "1e8",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = std::fs::read_to_string(dir.path().join("r/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("event").is_none());
        assert!(v["loss_total"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn embed_concat_mode_doubles_the_columns() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("e.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{ "encoder": {TINY_ENCODER}, "manifest": {}, "patch_size": 16 }}"#,
            serde_json::to_string(&fx.manifest).unwrap()
        ),
    )
    .unwrap();
    let mut widths = Vec::new();
    for (mode, name) in [("cls", "a"), ("cls_plus_mean_patch", "b")] {
        let out = run_in(
            dir.path(),
            &["embed", "--config", "e.json", "--out", name, "--mode", mode],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let csv = std::fs::read_to_string(dir.path().join(name).join("embeddings.csv")).unwrap();
        let header = csv.lines().next().unwrap().to_string();
        widths.push(header.split(',').filter(|c| c.starts_with('e')).count());
        assert_eq!(csv.lines().count(), 25, "24 tiles + header");
    }
    assert_eq!(widths[1], 2 * widths[0]);
}

#[test]
fn probe_without_a_checkpoint_exits_two() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &["probe", "--out", "r", "--manifest", fx.manifest.to_str().unwrap()],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("checkpoint"), "{}", stderr(&out));

    let out = run_in(
        dir.path(),
        &[
            "probe", "--out", "r", "--manifest", fx.manifest.to_str().unwrap(),
            "--checkpoint", "missing.ckpt",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("not found"), "{}", stderr(&out));
}

#[test]
fn single_run_probe_reports_zero_std_and_both_modes() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("p.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{
                "encoder": {TINY_ENCODER},
                "manifest": {},
                "checkpoint": {},
                "patch_size": 16, "mode": "both", "n_runs": 1,
                "compare_random": false, "seed": 4
            }}"#,
            serde_json::to_string(&fx.manifest).unwrap(),
            serde_json::to_string(&fx.run).unwrap()
        ),
    )
    .unwrap();
    let out = run_in(dir.path(), &["probe", "--config", "p.json", "--out", "r"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("r/probe-metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("trained,cls,"));
    assert!(rows[1].starts_with("trained,cls_plus_mean_patch,"));
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[5].parse::<f64>().unwrap(), 0.0, "ba_std in {row}");
        assert_eq!(cells[7].parse::<f64>().unwrap(), 0.0, "f1_std in {row}");
    }
}

#[test]
fn simulate_presets_leave_plot_ready_tables() {
    let dir = TempDir::new().unwrap();
    for preset in ["fig2", "fig3", "compare"] {
        let out = run_in(dir.path(), &["simulate", "--preset", preset, "--out", "r"]);
        assert_eq!(code(&out), 0, "{preset}: {}", stderr(&out));
    }
    for file in [
        "fig2_vit_b.csv",
        "fig2_vit_g_untuned.csv",
        "fig3_untuned.csv",
        "fig3_tuned.csv",
        "compare.json",
        "simulate-config.json",
    ] {
        assert!(dir.path().join("r").join(file).is_file(), "{file}");
    }
    let csv = std::fs::read_to_string(dir.path().join("r/fig2_vit_b.csv")).unwrap();
    assert!(csv.starts_with("nodes,throughput,efficiency,comm_fraction\n"));
    assert_eq!(csv.trim_end().lines().count(), 5);
}

#[test]
fn single_node_sweep_has_unit_efficiency() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("s.json"),
        r#"{
            "cluster": {
                "name": "one", "nodes": 1, "gpus_per_node": 8,
                "intra_node_bw": 4e11, "inter_node_bw": 1e11,
                "intra_hop_latency": 1e-6, "inter_hop_latency": 5e-5,
                "rdma": true, "rdma_bw_multiplier": 1.5, "rdma_hop_latency": 6e-6,
                "congestion_without_rdma": true,
                "collective_launch_overhead": 3e-4,
                "gpu_memory_bytes": 1.41e11,
                "hierarchical_allreduce": false
            },
            "model": "vit_b",
            "strategy": { "kind": "ddp", "bucket_cap_bytes": 26214400,
                          "gradient_as_bucket_view": false, "copy_bandwidth": 4e10 },
            "node_counts": [1]
        }"#,
    )
    .unwrap();
    let out = run_in(dir.path(), &["simulate", "--config", "s.json", "--out", "r"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("r/scaling.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn malformed_simulate_spec_names_the_field() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("s.json"),
        r#"{ "cluster": { "name": "broken" }, "model": "vit_b",
             "strategy": { "kind": "ddp", "bucket_cap_bytes": 1e6,
                           "gradient_as_bucket_view": false, "copy_bandwidth": 4e10 } }"#,
    )
    .unwrap();
    let out = run_in(dir.path(), &["simulate", "--config", "s.json", "--out", "r"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing field"), "{}", stderr(&out));
    assert!(stderr(&out).contains("nodes"), "{}", stderr(&out));

    std::fs::write(
        dir.path().join("m.json"),
        r#"{
            "cluster": {
                "name": "one", "nodes": 1, "gpus_per_node": 8,
                "intra_node_bw": 4e11, "inter_node_bw": 1e11,
                "intra_hop_latency": 1e-6, "inter_hop_latency": 5e-5,
                "rdma": true, "rdma_bw_multiplier": 1.5, "rdma_hop_latency": 6e-6,
                "congestion_without_rdma": true,
                "collective_launch_overhead": 3e-4,
                "gpu_memory_bytes": 1.41e11,
                "hierarchical_allreduce": false
            },
            "model": "vit_z",
            "strategy": { "kind": "ddp", "bucket_cap_bytes": 26214400,
                          "gradient_as_bucket_view": false, "copy_bandwidth": 4e10 }
        }"#,
    )
    .unwrap();
    let out = run_in(dir.path(), &["simulate", "--config", "m.json", "--out", "r"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("vit_z"), "{}", stderr(&out));
}

#[test]
fn report_digests_a_training_run() {
    let fx = fixture();
    let out = run_in(fx.run.parent().unwrap(), &["report", "--run", fx.run.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("train: 2 steps"), "{}", stdout(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["train"]["steps_completed"], 2);
    assert_eq!(report["train"]["overflow_events"], 0);

    let out = run_in(fx.dir.path(), &["report", "--run", "no-such-dir"]);
    assert_eq!(code(&out), 2);
}

