//! `tessera report`: one summary over whatever a run directory holds —
//! training metrics, probe tables, scaling curves, the DDP/FSDP comparison.

use std::collections::BTreeMap;
use std::path::PathBuf;

use tessera_core::{Error, Result};

use crate::config;

#[derive(clap::Args)]
pub struct ReportArgs {
    /// Run directory to summarize (default: the output root).
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, serde::Serialize)]
struct TrainSummary {
    steps_completed: usize,
    overflow_events: usize,
    overflow_sites: BTreeMap<String, usize>,
    mean_dino_loss_last_50: Option<f64>,
    mean_total_loss_last_50: Option<f64>,
    max_post_clip_grad_norm: Option<f64>,
    final_step: Option<serde_json::Value>,
}

#[derive(serde::Serialize)]
struct CurveSummary {
    points: usize,
    final_nodes: u64,
    final_throughput: f64,
    final_efficiency: f64,
}

#[derive(Default, serde::Serialize)]
struct Report {
    train: Option<TrainSummary>,
    probe_rows: Option<Vec<String>>,
    curves: BTreeMap<String, CurveSummary>,
    compare_throughput_ratio: Option<f64>,
}

fn summarize_metrics(path: &std::path::Path) -> Result<TrainSummary> {
    let text = std::fs::read_to_string(path)?;
    let mut s = TrainSummary::default();
    let mut dino = Vec::new();
    let mut total = Vec::new();
    let mut max_post_clip: Option<f64> = None;
    let mut last: Option<serde_json::Value> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Integrity(format!("{} line {}: {e}", path.display(), lineno + 1)))?;
        if v.get("event").is_some() {
            s.overflow_events += 1;
            if let Some(site) = v.get("site").and_then(|x| x.as_str()) {
                *s.overflow_sites.entry(site.to_string()).or_insert(0) += 1;
            }
            continue;
        }
        s.steps_completed += 1;
        if let (Some(d), Some(t)) = (
            v.get("loss_dino").and_then(|x| x.as_f64()),
            v.get("loss_total").and_then(|x| x.as_f64()),
        ) {
            dino.push(d);
            total.push(t);
        }
        if let (Some(g), Some(c)) = (
            v.get("grad_norm").and_then(|x| x.as_f64()),
            v.get("clip_scale").and_then(|x| x.as_f64()),
        ) {
            let post = g * c;
            max_post_clip = Some(max_post_clip.map_or(post, |m: f64| m.max(post)));
        }
        last = Some(v);
    }
    let tail = dino.len().saturating_sub(50);
    if !dino.is_empty() {
        s.mean_dino_loss_last_50 = Some(config::mean_std(&dino[tail..]).0);
        s.mean_total_loss_last_50 = Some(config::mean_std(&total[tail..]).0);
    }
    s.max_post_clip_grad_norm = max_post_clip;
    s.final_step = last;
    Ok(s)
}

fn summarize_curve(path: &std::path::Path) -> Result<Option<CurveSummary>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("nodes,throughput,efficiency,comm_fraction") {
        return Ok(None);
    }
    let mut points = 0usize;
    let mut last: Option<CurveSummary> = None;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            continue;
        }
        points += 1;
        last = Some(CurveSummary {
            points: 0,
            final_nodes: cells[0].parse().unwrap_or(0),
            final_throughput: cells[1].parse().unwrap_or(f64::NAN),
            final_efficiency: cells[2].parse().unwrap_or(f64::NAN),
        });
    }
    Ok(last.map(|mut c| {
        c.points = points;
        c
    }))
}

pub fn run(args: ReportArgs) -> Result<()> {
    let out = config::out_dir(args.out);
    let run_dir = args.run.clone().unwrap_or_else(|| out.clone());
    if !run_dir.is_dir() {
        return Err(Error::Config(format!("run directory not found at {}", run_dir.display())));
    }

    let mut report = Report::default();

    let metrics = run_dir.join("metrics.jsonl");
    if metrics.is_file() {
        let s = summarize_metrics(&metrics)?;
        println!(
            "train: {} steps, {} overflow events{}",
            s.steps_completed,
            s.overflow_events,
            s.mean_dino_loss_last_50
                .map(|m| format!(", dino loss (last 50) {m:.4}"))
                .unwrap_or_default()
        );
        for (site, n) in &s.overflow_sites {
            println!("  overflow at {site}: {n}");
        }
        report.train = Some(s);
    }

    let probe = run_dir.join("probe-metrics.csv");
    if probe.is_file() {
        let text = std::fs::read_to_string(&probe)?;
        let rows: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        for row in rows.iter().skip(1) {
            println!("probe: {row}");
        }
        report.probe_rows = Some(rows);
    }

    let mut names: Vec<_> = std::fs::read_dir(&run_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") && n != "probe-metrics.csv" && n != "embeddings.csv")
        .collect();
    names.sort();
    for name in names {
        if let Some(c) = summarize_curve(&run_dir.join(&name))? {
            println!(
                "curve {name}: {} points, {} nodes -> efficiency {:.3}",
                c.points, c.final_nodes, c.final_efficiency
            );
            report.curves.insert(name, c);
        }
    }

    let compare = run_dir.join("compare.json");
    if compare.is_file() {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&compare)?)
            .map_err(|e| Error::Integrity(format!("{}: {e}", compare.display())))?;
        if let Some(r) = v.get("throughput_ratio").and_then(|x| x.as_f64()) {
            println!("compare: tuned DDP / FSDP throughput ratio {r:.2}");
            report.compare_throughput_ratio = Some(r);
        }
    }

    if report.train.is_none()
        && report.probe_rows.is_none()
        && report.curves.is_empty()
        && report.compare_throughput_ratio.is_none()
    {
        println!("nothing to report in {}", run_dir.display());
    }

    let path = run_dir.join("report.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    println!("report: {}", path.display());
    Ok(())
}
