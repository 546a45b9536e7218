//! `tessera make-corpus`: synthesize slides, sample tiles, write the corpus.

use std::path::PathBuf;

use tessera_core::corpus::{build_corpus, CorpusConfig, PixelFormat};
use tessera_core::Result;

use crate::config;

#[derive(clap::Args)]
pub struct MakeCorpusArgs {
    /// JSON config file; flags override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root (default $TESSERA_OUT, else ./tessera-out).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    slides_per_class: Option<usize>,
    #[arg(long)]
    tiles_per_slide: Option<usize>,
    /// Slide side length in base-resolution pixels.
    #[arg(long)]
    extent: Option<usize>,
    /// Comma-separated µm/px levels, e.g. 0.25,0.5.
    #[arg(long, value_delimiter = ',')]
    mpps: Option<Vec<f64>>,
    /// Comma-separated tile sides in pixels.
    #[arg(long, value_delimiter = ',')]
    tile_sizes: Option<Vec<usize>>,
    /// Pixel encoding: png_rgb8 or raw_f32.
    #[arg(long)]
    format: Option<String>,
}

pub fn run(args: MakeCorpusArgs) -> Result<()> {
    let mut cfg: CorpusConfig = config::load_config(args.config.as_deref())?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.slides_per_class {
        cfg.slides_per_class = v;
    }
    if let Some(v) = args.tiles_per_slide {
        cfg.tiles_per_slide = v;
    }
    if let Some(v) = args.extent {
        cfg.extent = v;
    }
    if let Some(v) = args.mpps {
        cfg.mpps = v;
    }
    if let Some(v) = args.tile_sizes {
        cfg.tile_sizes = v;
    }
    if let Some(v) = &args.format {
        cfg.format = config::parse_enum::<PixelFormat>(v, "pixel format")?;
    }
    cfg.validate()?;

    let out = config::out_dir(args.out);
    config::echo_config(&out, "make-corpus-config.json", &cfg)?;
    let summary = build_corpus(&out.join("corpus"), &cfg)?;

    for (&(mpp_hundredths, size), count) in &summary.per_stratum {
        println!(
            "mpp {:.2} size {size}: {count} tiles",
            mpp_hundredths as f64 / 100.0
        );
    }
    println!(
        "{} tiles across {} strata -> {}",
        summary.tiles_total,
        summary.per_stratum.len(),
        summary.manifest_path.display()
    );
    for d in &summary.diagnostics {
        eprintln!("note: {d}");
    }
    Ok(())
}
