//! `tessera train`: drive the student/teacher loop over a corpus manifest,
//! streaming JSON-lines metrics and writing both encoder checkpoints.
//!
//! Overflow-aborted steps are logged as events rather than killing the run;
//! only a storm — more consecutive aborts than the configured threshold —
//! ends it, with exit code 3 and an overflow report on disk.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use tessera_core::corpus::{load_entry_pixels, read_manifest};
use tessera_core::encoder::save_checkpoint;
use tessera_core::precision::NumericFormat;
use tessera_core::ssl::{TrainConfig, Trainer};
use tessera_core::tensor::Tensor;
use tessera_core::{rng, Error, Result};

use crate::config;

fn default_overflow_threshold() -> usize {
    8
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct TrainCmdConfig {
    #[serde(default)]
    pub train: TrainConfig,
    /// Corpus manifest the batches are drawn from.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Consecutive overflow-aborted steps tolerated before giving up.
    #[serde(default = "default_overflow_threshold")]
    pub overflow_threshold: usize,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        TrainCmdConfig {
            train: TrainConfig::default(),
            manifest: None,
            overflow_threshold: default_overflow_threshold(),
        }
    }
}

#[derive(clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Step count override; also sets the LR schedule length.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// fp32, fp16_range, or bf16_range.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    head_init_scale: Option<f64>,
    #[arg(long)]
    overflow_threshold: Option<usize>,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainCmdConfig = config::load_config(args.config.as_deref())?;
    if let Some(v) = args.manifest {
        cfg.manifest = Some(v);
    }
    if let Some(v) = args.steps {
        cfg.train.steps = v;
        cfg.train.lr.total_steps = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = &args.precision {
        cfg.train.precision = config::parse_enum::<NumericFormat>(v, "precision")?;
    }
    if let Some(v) = args.head_init_scale {
        cfg.train.head_init_scale = v;
    }
    if let Some(v) = args.overflow_threshold {
        cfg.overflow_threshold = v;
    }
    // Zero steps is a valid request: echo the config, write an empty metrics
    // file, and checkpoint the initial weights. The trainer itself insists on
    // a positive schedule, so validate against a one-step stand-in.
    let run_steps = cfg.train.steps;
    if run_steps == 0 {
        cfg.train.steps = 1;
        cfg.train.lr.total_steps = cfg.train.lr.total_steps.max(1);
    }
    cfg.train.validate()?;
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("train needs a corpus manifest (--manifest or config)".to_string()))?;
    config::require_file(&manifest, "manifest")?;

    let out = config::out_dir(args.out);
    config::echo_config(&out, "train-config.json", &cfg)?;
    for w in cfg.train.warnings() {
        eprintln!("warning: {w}");
    }

    // The smoke corpus is small; hold every usable tile in memory.
    let (header, entries) = read_manifest(&manifest)?;
    let root = manifest.parent().unwrap_or(std::path::Path::new("."));
    let mut tiles: Vec<Tensor<f32>> = Vec::new();
    for e in &entries {
        if e.tile_size >= cfg.train.global_crop {
            tiles.push(load_entry_pixels(root, &header, e)?);
        }
    }
    if tiles.is_empty() {
        return Err(Error::Config(format!(
            "manifest has no tiles of at least the global crop ({} px)",
            cfg.train.global_crop
        )));
    }

    let mut trainer = Trainer::<f32>::new(cfg.train.clone())?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path)
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", metrics_path.display())))?,
    );

    let mut ok_steps = 0usize;
    let mut consecutive_aborts = 0usize;
    let mut overflow_sites: BTreeMap<String, usize> = BTreeMap::new();
    let mut overflow_events = 0usize;
    let mut last_losses: Vec<f64> = Vec::new();

    for step in 0..run_steps {
        let mut batch_rng = rng::stream(cfg.train.seed, "batch", step as u64);
        let batch: Vec<Tensor<f32>> = if tiles.len() >= cfg.train.batch_tiles {
            rand::seq::index::sample(&mut batch_rng, tiles.len(), cfg.train.batch_tiles)
                .iter()
                .map(|i| tiles[i].clone())
                .collect()
        } else {
            (0..cfg.train.batch_tiles)
                .map(|_| tiles[batch_rng.gen_range(0..tiles.len())].clone())
                .collect()
        };

        match trainer.train_step(&batch) {
            Ok(m) => {
                consecutive_aborts = 0;
                ok_steps += 1;
                last_losses.push(m.loss_dino);
                if last_losses.len() > 50 {
                    last_losses.remove(0);
                }
                if (step + 1) % 100 == 0 || step + 1 == run_steps {
                    eprintln!(
                        "step {}/{} p{} loss {:.4} grad {:.3}",
                        step + 1,
                        run_steps,
                        m.patch_size,
                        m.loss_total,
                        m.grad_norm
                    );
                }
                let line = serde_json::to_string(&m).map_err(|e| Error::Serde(e.to_string()))?;
                writeln!(metrics, "{line}")?;
            }
            Err(Error::Overflow { site, count, max_abs }) => {
                overflow_events += 1;
                consecutive_aborts += 1;
                *overflow_sites.entry(site.clone()).or_insert(0) += 1;
                let event = serde_json::json!({
                    "step": step,
                    "event": "overflow",
                    "site": site,
                    "count": count,
                    "max_abs": max_abs,
                });
                writeln!(metrics, "{event}")?;
                eprintln!("step {step}: overflow at {site} ({count} values, max |x| {max_abs:.3e})");
                if consecutive_aborts > cfg.overflow_threshold {
                    metrics.flush()?;
                    let report = serde_json::json!({
                        "threshold": cfg.overflow_threshold,
                        "consecutive_aborts": consecutive_aborts,
                        "total_overflow_events": overflow_events,
                        "sites": overflow_sites,
                    });
                    std::fs::write(
                        out.join("overflow-report.json"),
                        serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?,
                    )?;
                    return Err(Error::Overflow {
                        site: format!(
                            "{site} ({consecutive_aborts} consecutive aborted steps; report at {})",
                            out.join("overflow-report.json").display()
                        ),
                        count,
                        max_abs,
                    });
                }
            }
            Err(other) => return Err(other),
        }
    }
    metrics.flush()?;

    let teacher_path = out.join("teacher_encoder.ckpt");
    let student_path = out.join("student_encoder.ckpt");
    save_checkpoint(&trainer.teacher.encoder, &teacher_path)?;
    save_checkpoint(&trainer.student.encoder, &student_path)?;

    let (mean_last, _) = config::mean_std(&last_losses);
    println!(
        "{ok_steps}/{} steps completed, {overflow_events} overflowed; dino loss over last {}: {:.4}",
        run_steps,
        last_losses.len(),
        mean_last
    );
    println!("metrics: {}", metrics_path.display());
    println!("checkpoints: {} {}", teacher_path.display(), student_path.display());
    Ok(())
}
