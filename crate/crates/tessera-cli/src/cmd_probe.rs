//! `tessera probe`: linear probes over frozen embeddings, classed by the
//! slide each tile came from. Reports mean/std across independently split
//! runs, optionally pairing the checkpoint against a random-init encoder.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use tessera_core::corpus::{read_slide_sidecar, SlideClass, TileEntry};
use tessera_core::encoder::{Encoder, EncoderConfig};
use tessera_core::probe::{extract_embeddings, linear_probe, EmbedMode, LinearProbeConfig};
use tessera_core::tensor::Tensor;
use tessera_core::{rng, Error, Result};

use crate::cmd_embed;
use crate::config;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    Cls,
    ClsPlusMeanPatch,
    Both,
}

impl ProbeMode {
    fn embed_modes(self) -> Vec<EmbedMode> {
        match self {
            ProbeMode::Cls => vec![EmbedMode::Cls],
            ProbeMode::ClsPlusMeanPatch => vec![EmbedMode::ClsPlusMeanPatch],
            ProbeMode::Both => vec![EmbedMode::Cls, EmbedMode::ClsPlusMeanPatch],
        }
    }
}

fn default_encoder() -> EncoderConfig {
    EncoderConfig::preset_4s_like()
}

fn default_patch() -> usize {
    16
}

fn default_mode() -> ProbeMode {
    ProbeMode::Both
}

fn default_n_runs() -> usize {
    3
}

fn default_train_fraction() -> f64 {
    0.7
}

fn default_compare_random() -> bool {
    true
}

fn default_random_seed() -> u64 {
    99
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct ProbeCmdConfig {
    #[serde(default = "default_encoder")]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Trained checkpoint (file, or a train run directory for its teacher).
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_mode")]
    pub mode: ProbeMode,
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Also probe a randomly initialized encoder for the paired baseline.
    #[serde(default = "default_compare_random")]
    pub compare_random: bool,
    #[serde(default = "default_random_seed")]
    pub random_seed: u64,
    #[serde(default)]
    pub probe: LinearProbeConfig,
}

impl Default for ProbeCmdConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(clap::Args)]
pub struct ProbeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// cls, cls_plus_mean_patch, or both.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    n_runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    compare_random: Option<bool>,
}

#[derive(serde::Serialize)]
pub struct ProbeRow {
    pub encoder: String,
    pub mode: String,
    pub embed_dim: usize,
    pub n_runs: usize,
    pub ba_mean: f64,
    pub ba_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub ba_runs: Vec<f64>,
    pub f1_runs: Vec<f64>,
}

/// Class labels for each tile, joined through the sidecar written next to
/// the manifest.
pub fn tile_labels(manifest: &std::path::Path, entries: &[TileEntry]) -> Result<Vec<usize>> {
    let sidecar = manifest
        .parent()
        .unwrap_or(std::path::Path::new("."))
        .join("slides.jsonl");
    config::require_file(&sidecar, "slide sidecar")?;
    let slides = read_slide_sidecar(&sidecar)?;
    let by_id: BTreeMap<&str, SlideClass> = slides.iter().map(|s| (s.slide_id.as_str(), s.class)).collect();
    entries
        .iter()
        .map(|e| {
            by_id
                .get(e.slide_id.as_str())
                .map(|c| c.index())
                .ok_or_else(|| Error::Integrity(format!("slide '{}' missing from sidecar", e.slide_id)))
        })
        .collect()
}

/// Class-proportional split; singleton classes go to the train side.
fn stratified_split(labels: &[usize], fraction: f64, rng: &mut impl rand::Rng) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut idx) in by_class {
        idx.shuffle(rng);
        let n_train = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len().max(2) - 1);
        let n_train = n_train.min(idx.len());
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    (train, test)
}

fn gather(emb: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let d = emb.cols();
    let mut out = Tensor::zeros(&[idx.len(), d]);
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(emb.row(i));
    }
    out
}

pub fn probe_encoder(
    encoder: &Encoder<f32>,
    name: &str,
    cfg: &ProbeCmdConfig,
    tiles: &[Tensor<f32>],
    labels: &[usize],
) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::new();
    for mode in cfg.mode.embed_modes() {
        let emb = extract_embeddings(encoder, cfg.patch_size, tiles, mode)?;
        let mut ba_runs = Vec::with_capacity(cfg.n_runs);
        let mut f1_runs = Vec::with_capacity(cfg.n_runs);
        for run in 0..cfg.n_runs {
            let mut split_rng = rng::stream(cfg.seed, "probe-split", run as u64);
            let (tr, te) = stratified_split(labels, cfg.train_fraction, &mut split_rng);
            let probe_cfg = LinearProbeConfig {
                seed: cfg.probe.seed.wrapping_add(run as u64),
                ..cfg.probe.clone()
            };
            let tr_y: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
            let te_y: Vec<usize> = te.iter().map(|&i| labels[i]).collect();
            let report = linear_probe(&gather(&emb, &tr), &tr_y, &gather(&emb, &te), &te_y, &probe_cfg)?;
            ba_runs.push(report.balanced_accuracy);
            f1_runs.push(report.macro_f1);
        }
        let (ba_mean, ba_std) = config::mean_std(&ba_runs);
        let (f1_mean, f1_std) = config::mean_std(&f1_runs);
        rows.push(ProbeRow {
            encoder: name.to_string(),
            mode: mode.label().to_string(),
            embed_dim: emb.cols(),
            n_runs: cfg.n_runs,
            ba_mean,
            ba_std,
            f1_mean,
            f1_std,
            ba_runs,
            f1_runs,
        });
    }
    Ok(rows)
}

pub fn run(args: ProbeArgs) -> Result<()> {
    let mut cfg: ProbeCmdConfig = config::load_config(args.config.as_deref())?;
    if let Some(v) = args.manifest {
        cfg.manifest = Some(v);
    }
    if let Some(v) = args.checkpoint {
        cfg.checkpoint = Some(v);
    }
    if let Some(v) = args.patch_size {
        cfg.patch_size = v;
    }
    if let Some(v) = &args.mode {
        cfg.mode = config::parse_enum::<ProbeMode>(v, "probe mode")?;
    }
    if let Some(v) = args.n_runs {
        cfg.n_runs = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.compare_random {
        cfg.compare_random = v;
    }
    cfg.encoder.validate()?;
    if cfg.n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".to_string()));
    }
    if !(0.0..1.0).contains(&cfg.train_fraction) || cfg.train_fraction <= 0.0 {
        return Err(Error::Config("train_fraction must lie in (0, 1)".to_string()));
    }
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("probe needs a corpus manifest (--manifest or config)".to_string()))?;
    let checkpoint = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("probe needs a checkpoint (--checkpoint or config)".to_string()))?;

    let out = config::out_dir(args.out);
    config::echo_config(&out, "probe-config.json", &cfg)?;

    let (entries, tiles) = cmd_embed::load_tiles(&manifest, cfg.patch_size)?;
    let labels = tile_labels(&manifest, &entries)?;

    let trained = cmd_embed::load_encoder(&cfg.encoder, cfg.seed, Some(&checkpoint))?;
    let mut rows = probe_encoder(&trained, "trained", &cfg, &tiles, &labels)?;
    if cfg.compare_random {
        let random = cmd_embed::load_encoder(&cfg.encoder, cfg.random_seed, None)?;
        rows.extend(probe_encoder(&random, "random", &cfg, &tiles, &labels)?);
    }

    let csv_path = out.join("probe-metrics.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(f, "encoder,mode,embed_dim,n_runs,ba_mean,ba_std,f1_mean,f1_std")?;
    for r in &rows {
        writeln!(
            f,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.encoder, r.mode, r.embed_dim, r.n_runs, r.ba_mean, r.ba_std, r.f1_mean, r.f1_std
        )?;
        println!(
            "{} {} (dim {}): BA {:.3} ± {:.3}, F1 {:.3} ± {:.3} over {} runs",
            r.encoder, r.mode, r.embed_dim, r.ba_mean, r.ba_std, r.f1_mean, r.f1_std, r.n_runs
        );
    }
    f.flush()?;
    std::fs::write(
        out.join("probe-metrics.json"),
        serde_json::to_string_pretty(&rows).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    println!("tables: {}", csv_path.display());
    Ok(())
}
