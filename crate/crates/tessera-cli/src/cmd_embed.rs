//! `tessera embed`: frozen embeddings from a checkpoint over a manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use tessera_core::corpus::{load_entry_pixels, read_manifest, TileEntry};
use tessera_core::encoder::{load_checkpoint, Encoder, EncoderConfig};
use tessera_core::probe::{extract_embeddings, EmbedMode};
use tessera_core::tensor::Tensor;
use tessera_core::{Error, Result};

use crate::config;

fn default_encoder() -> EncoderConfig {
    EncoderConfig::preset_4s_like()
}

fn default_patch() -> usize {
    16
}

fn default_mode() -> EmbedMode {
    EmbedMode::Cls
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct EmbedCmdConfig {
    #[serde(default = "default_encoder")]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint file, or a train run directory (uses the teacher encoder).
    /// Absent means a randomly initialized encoder.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_mode")]
    pub mode: EmbedMode,
    /// Init seed when no checkpoint is given.
    #[serde(default)]
    pub seed: u64,
}

impl Default for EmbedCmdConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(clap::Args)]
pub struct EmbedArgs {
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
    /// cls or cls_plus_mean_patch.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

/// A directory checkpoint path means "the teacher from that run".
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("teacher_encoder.ckpt")
    } else {
        path.to_path_buf()
    }
}

pub fn load_encoder(cfg: &EncoderConfig, seed: u64, checkpoint: Option<&Path>) -> Result<Encoder<f32>> {
    match checkpoint {
        None => Encoder::init(cfg.clone(), seed),
        Some(p) => {
            let path = resolve_checkpoint(p);
            config::require_file(&path, "checkpoint")?;
            load_checkpoint(cfg.clone(), seed, &path)
        }
    }
}

/// Manifest tiles the encoder can consume at this patch size, with their
/// entries kept alongside for identity columns.
pub fn load_tiles(
    manifest: &Path,
    patch_size: usize,
) -> Result<(Vec<TileEntry>, Vec<Tensor<f32>>)> {
    config::require_file(manifest, "manifest")?;
    let (header, entries) = read_manifest(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut kept = Vec::new();
    let mut tiles = Vec::new();
    for e in entries {
        if e.tile_size % patch_size == 0 {
            tiles.push(load_entry_pixels(root, &header, &e)?);
            kept.push(e);
        }
    }
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "manifest has no tiles divisible by patch size {patch_size}"
        )));
    }
    Ok((kept, tiles))
}

pub fn run(args: EmbedArgs) -> Result<()> {
    let mut cfg: EmbedCmdConfig = config::load_config(args.config.as_deref())?;
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
        cfg.mode = config::parse_enum::<EmbedMode>(v, "embed mode")?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.encoder.validate()?;
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("embed needs a corpus manifest (--manifest or config)".to_string()))?;

    let out = config::out_dir(args.out);
    config::echo_config(&out, "embed-config.json", &cfg)?;

    let encoder = load_encoder(&cfg.encoder, cfg.seed, cfg.checkpoint.as_deref())?;
    let (entries, tiles) = load_tiles(&manifest, cfg.patch_size)?;
    let emb = extract_embeddings(&encoder, cfg.patch_size, &tiles, cfg.mode)?;

    let csv_path = out.join("embeddings.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    write!(f, "slide_id,mpp,tile_size,origin_x,origin_y")?;
    for d in 0..emb.cols() {
        write!(f, ",e{d}")?;
    }
    writeln!(f)?;
    for (i, e) in entries.iter().enumerate() {
        write!(f, "{},{},{},{},{}", e.slide_id, e.mpp, e.tile_size, e.origin_x, e.origin_y)?;
        for v in emb.row(i) {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    println!(
        "{} embeddings of dim {} ({}) -> {}",
        emb.rows(),
        emb.cols(),
        cfg.mode.label(),
        csv_path.display()
    );
    Ok(())
}
