//! Synthetic slide corpus: procedurally generated RGB "slides" with tissue
//! and artifact masks, multi-resolution tile sampling, and a JSON-lines
//! manifest format for the extracted tiles.
//!
//! A slide is a u8 RGB image at the base resolution of 0.25 um/px. Tiles are
//! requested at a microns-per-pixel value from a declared menu; coarser mpp
//! values read a proportionally larger footprint of base pixels and box-filter
//! it down. A central core square is always tissue, which guarantees every
//! legal footprint has at least one valid origin; the remainder is thresholded
//! value noise tuned so the whole slide hits a target tissue fraction.
//! Artifact rectangles only ever land outside the core.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Base resolution of every synthetic slide, in microns per pixel.
pub const BASE_MPP: f64 = 0.25;

/// The mpp menu tiles may be requested at. All are integer multiples of the
/// base so footprints divide evenly.
pub const MPP_MENU: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

/// Fraction of the slide edge covered by the always-tissue core square.
const CORE_EDGE_FRACTION: f64 = 0.55;

// ---------------------------------------------------------------------------
// Bit-packed masks
// ---------------------------------------------------------------------------

/// Row-major bit mask with per-row word padding so row scans stay aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct BitGrid {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl BitGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        BitGrid {
            rows,
            cols,
            words_per_row,
            bits: vec![0; rows * words_per_row],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        let w = self.bits[r * self.words_per_row + c / 64];
        (w >> (c % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        debug_assert!(r < self.rows && c < self.cols);
        let word = &mut self.bits[r * self.words_per_row + c / 64];
        let bit = 1u64 << (c % 64);
        if v {
            *word |= bit;
        } else {
            *word &= !bit;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Word-level mask for columns `[c0, c1)` within one 64-bit word index.
    #[inline]
    fn word_mask(c0: usize, c1: usize, word_idx: usize) -> u64 {
        let lo = (word_idx * 64).max(c0);
        let hi = ((word_idx + 1) * 64).min(c1);
        if lo >= hi {
            return 0;
        }
        let span = hi - lo;
        let shifted = if span == 64 { u64::MAX } else { (1u64 << span) - 1 };
        shifted << (lo % 64)
    }

    /// True when every bit in the rectangle `[r0, r0+h) x [c0, c0+w)` is set.
    pub fn all_in_rect(&self, r0: usize, c0: usize, h: usize, w: usize) -> bool {
        debug_assert!(r0 + h <= self.rows && c0 + w <= self.cols);
        let (c1, w0, w1) = (c0 + w, c0 / 64, (c0 + w - 1) / 64);
        for r in r0..r0 + h {
            let row = &self.bits[r * self.words_per_row..(r + 1) * self.words_per_row];
            for wi in w0..=w1 {
                let m = Self::word_mask(c0, c1, wi);
                if row[wi] & m != m {
                    return false;
                }
            }
        }
        true
    }

    /// True when any bit in the rectangle is set.
    pub fn any_in_rect(&self, r0: usize, c0: usize, h: usize, w: usize) -> bool {
        debug_assert!(r0 + h <= self.rows && c0 + w <= self.cols);
        let (c1, w0, w1) = (c0 + w, c0 / 64, (c0 + w - 1) / 64);
        for r in r0..r0 + h {
            let row = &self.bits[r * self.words_per_row..(r + 1) * self.words_per_row];
            for wi in w0..=w1 {
                if row[wi] & Self::word_mask(c0, c1, wi) != 0 {
                    return true;
                }
            }
        }
        false
    }
}

// ---------------------------------------------------------------------------
// Value noise
// ---------------------------------------------------------------------------

fn hash2(seed: u64, ix: i64, iy: i64) -> u64 {
    let mut z = seed ^ (ix as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (iy as u64).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    (hash2(seed, ix, iy) >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise in [0, 1); `scale` is the lattice cell size in pixels.
fn value_noise(x: f64, y: f64, scale: f64, seed: u64) -> f64 {
    let (gx, gy) = (x / scale, y / scale);
    let (ix, iy) = (gx.floor() as i64, gy.floor() as i64);
    let (fx, fy) = (smoothstep(gx - ix as f64), smoothstep(gy - iy as f64));
    let v00 = lattice(seed, ix, iy);
    let v10 = lattice(seed, ix + 1, iy);
    let v01 = lattice(seed, ix, iy + 1);
    let v11 = lattice(seed, ix + 1, iy + 1);
    let top = v00 + (v10 - v00) * fx;
    let bot = v01 + (v11 - v01) * fx;
    top + (bot - top) * fy
}

// ---------------------------------------------------------------------------
// Slide classes
// ---------------------------------------------------------------------------

/// Six slide appearance classes: three stain palettes crossed with two
/// texture scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlideClass {
    HeFine,
    HeCoarse,
    IhcFine,
    IhcCoarse,
    SpecialFine,
    SpecialCoarse,
}

impl SlideClass {
    pub const ALL: [SlideClass; 6] = [
        SlideClass::HeFine,
        SlideClass::HeCoarse,
        SlideClass::IhcFine,
        SlideClass::IhcCoarse,
        SlideClass::SpecialFine,
        SlideClass::SpecialCoarse,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn label(self) -> &'static str {
        match self {
            SlideClass::HeFine => "he_fine",
            SlideClass::HeCoarse => "he_coarse",
            SlideClass::IhcFine => "ihc_fine",
            SlideClass::IhcCoarse => "ihc_coarse",
            SlideClass::SpecialFine => "special_fine",
            SlideClass::SpecialCoarse => "special_coarse",
        }
    }

    /// Two-tone stain palette, dark and light endpoints.
    fn palette(self) -> ([u8; 3], [u8; 3]) {
        match self {
            SlideClass::HeFine | SlideClass::HeCoarse => ([120, 60, 160], [235, 170, 205]),
            SlideClass::IhcFine | SlideClass::IhcCoarse => ([130, 85, 40], [95, 115, 200]),
            SlideClass::SpecialFine | SlideClass::SpecialCoarse => ([55, 145, 145], [235, 228, 170]),
        }
    }

    /// Texture lattice cell size in base pixels.
    fn texture_scale(self) -> f64 {
        match self {
            SlideClass::HeFine | SlideClass::IhcFine | SlideClass::SpecialFine => 4.0,
            _ => 24.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Slide synthesis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SlideParams {
    pub slide_id: String,
    pub class: SlideClass,
    /// Edge length of the square slide in base pixels.
    pub extent: usize,
    pub seed: u64,
    /// Target fraction of slide pixels that are tissue.
    pub tissue_target: f64,
    /// Target fraction of slide area covered by artifact rectangles.
    pub artifact_fraction: f64,
    /// Largest base-pixel footprint any tile request may have; the extent
    /// must leave room for two of them.
    pub max_footprint: usize,
}

impl SlideParams {
    pub fn validate(&self) -> Result<()> {
        if self.extent < 2 * self.max_footprint {
            return Err(Error::Config(format!(
                "extent {} cannot host footprints of {} (needs at least {})",
                self.extent,
                self.max_footprint,
                2 * self.max_footprint
            )));
        }
        let core_frac = CORE_EDGE_FRACTION * CORE_EDGE_FRACTION;
        if self.tissue_target < core_frac + 0.02 || self.tissue_target > 0.95 {
            return Err(Error::Config(format!(
                "tissue target {} outside [{:.3}, 0.95]; the core square alone covers {:.3}",
                self.tissue_target,
                core_frac + 0.02,
                core_frac
            )));
        }
        if !(0.0..=0.2).contains(&self.artifact_fraction) {
            return Err(Error::Config(format!(
                "artifact fraction {} outside [0, 0.2]",
                self.artifact_fraction
            )));
        }
        Ok(())
    }

    /// First/last base pixel of the always-tissue core square.
    fn core_bounds(&self) -> (usize, usize) {
        let side = (self.extent as f64 * CORE_EDGE_FRACTION).round() as usize;
        let start = (self.extent - side) / 2;
        (start, start + side)
    }
}

/// A synthesized slide: interleaved RGB bytes plus the two masks used to
/// police tile sampling.
pub struct Slide {
    pub params: SlideParams,
    /// `extent * extent * 3` interleaved RGB at the base resolution.
    pub pixels: Vec<u8>,
    pub tissue: BitGrid,
    pub artifact: BitGrid,
}

impl Slide {
    pub fn tissue_fraction(&self) -> f64 {
        self.tissue.count_ones() as f64 / (self.params.extent * self.params.extent) as f64
    }
}

/// Octave blend of the tissue field noise.
fn tissue_field(x: usize, y: usize, extent: usize, s1: u64, s2: u64) -> f64 {
    let cell = (extent as f64 / 8.0).max(16.0);
    0.65 * value_noise(x as f64, y as f64, cell, s1) + 0.35 * value_noise(x as f64, y as f64, cell / 4.0, s2)
}

/// Build one slide. Two passes: the first histograms the tissue field outside
/// the core to find the threshold that hits the target fraction, the second
/// paints pixels and masks.
pub fn synth_slide(params: &SlideParams) -> Result<Slide> {
    params.validate()?;
    let extent = params.extent;
    let (core_lo, core_hi) = params.core_bounds();
    let s1 = rng::derive_seed(params.seed, "tissue-noise", 0);
    let s2 = rng::derive_seed(params.seed, "tissue-noise", 1);
    let s_tex = rng::derive_seed(params.seed, "texture", 0);
    let s_jit = rng::derive_seed(params.seed, "jitter", 0);

    // Pass 1: histogram the field outside the core.
    const BINS: usize = 1024;
    let mut hist = [0u64; BINS];
    let mut outside = 0u64;
    for y in 0..extent {
        let y_in_core = (core_lo..core_hi).contains(&y);
        for x in 0..extent {
            if y_in_core && (core_lo..core_hi).contains(&x) {
                continue;
            }
            let v = tissue_field(x, y, extent, s1, s2);
            hist[((v * BINS as f64) as usize).min(BINS - 1)] += 1;
            outside += 1;
        }
    }
    let core_frac = ((core_hi - core_lo) * (core_hi - core_lo)) as f64 / (extent * extent) as f64;
    // Fraction of *outside* pixels that must read as tissue.
    let q = ((params.tissue_target - core_frac) / (1.0 - core_frac)).clamp(0.0, 1.0);
    let keep = (q * outside as f64).round() as u64;
    let mut acc = 0u64;
    let mut threshold_bin = BINS; // nothing passes if q == 0
    for b in (0..BINS).rev() {
        acc += hist[b];
        if acc >= keep {
            threshold_bin = b;
            break;
        }
    }

    // Pass 2: paint.
    let (dark, light) = params.class.palette();
    let tex_scale = params.class.texture_scale();
    let mut pixels = vec![0u8; extent * extent * 3];
    let mut tissue = BitGrid::new(extent, extent);
    for y in 0..extent {
        let y_in_core = (core_lo..core_hi).contains(&y);
        for x in 0..extent {
            let in_core = y_in_core && (core_lo..core_hi).contains(&x);
            let is_tissue = if in_core {
                true
            } else {
                let v = tissue_field(x, y, extent, s1, s2);
                ((v * BINS as f64) as usize).min(BINS - 1) >= threshold_bin
            };
            let o = (y * extent + x) * 3;
            let jitter = (hash2(s_jit, x as i64, y as i64) % 7) as i32 - 3;
            if is_tissue {
                tissue.set(y, x, true);
                let t = value_noise(x as f64, y as f64, tex_scale, s_tex);
                for c in 0..3 {
                    let v = dark[c] as f64 + t * (light[c] as f64 - dark[c] as f64);
                    pixels[o + c] = (v as i32 + jitter).clamp(0, 255) as u8;
                }
            } else {
                for c in 0..3 {
                    pixels[o + c] = (250 + jitter).clamp(235, 255) as u8;
                }
            }
        }
    }

    // Artifacts: rectangles that never touch the core, accepted until their
    // summed area reaches the requested fraction of the slide.
    let mut artifact = BitGrid::new(extent, extent);
    if params.artifact_fraction > 0.0 {
        let margin = core_lo; // band width between slide edge and core
        let max_side = 400.min(margin.saturating_sub(1)).max(2);
        let min_side = (200).min(max_side / 2).max(1);
        let want_area = params.artifact_fraction * (extent * extent) as f64;
        let mut area = 0.0;
        let mut r = rng::stream(params.seed, "artifacts", 0);
        let mut attempts = 0usize;
        while area < want_area && attempts < 100_000 {
            attempts += 1;
            let w = r.gen_range(min_side..=max_side);
            let h = r.gen_range(min_side..=max_side);
            let x0 = r.gen_range(0..=extent - w);
            let y0 = r.gen_range(0..=extent - h);
            // Reject anything overlapping the core square.
            if x0 < core_hi && x0 + w > core_lo && y0 < core_hi && y0 + h > core_lo {
                continue;
            }
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    artifact.set(y, x, true);
                    let o = (y * extent + x) * 3;
                    let shade = 30 + (hash2(s_jit, x as i64, -(y as i64) - 1) % 25) as u8;
                    pixels[o] = shade;
                    pixels[o + 1] = shade;
                    pixels[o + 2] = shade.saturating_add(10);
                }
            }
            area += (w * h) as f64;
        }
    }

    Ok(Slide {
        params: params.clone(),
        pixels,
        tissue,
        artifact,
    })
}

// ---------------------------------------------------------------------------
// Tile sampling and extraction
// ---------------------------------------------------------------------------

/// One accepted tile placement, in base-pixel coordinates.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TileSpec {
    pub mpp: f64,
    pub size: usize,
    pub origin_x: usize,
    pub origin_y: usize,
}

impl TileSpec {
    /// Edge length of the base-pixel region this tile reads.
    pub fn footprint(&self) -> usize {
        (self.size as f64 * (self.mpp / BASE_MPP)).round() as usize
    }
}

#[derive(Debug)]
pub struct SampleOutcome {
    pub tiles: Vec<TileSpec>,
    /// Set when sampling gave up; `tiles` is empty in that case.
    pub diagnostic: Option<String>,
}

const SAMPLE_ATTEMPT_CAP: usize = 1000;

/// Draw `count` tiles with uniformly random origins, mpp and size picked
/// uniformly from the menus. A tile is accepted only if its footprint is
/// entirely tissue and touches no artifact. Exhausting the attempt cap is not
/// an error: the caller gets an empty outcome with a diagnostic instead.
pub fn sample_tiles(
    slide: &Slide,
    mpps: &[f64],
    sizes: &[usize],
    count: usize,
    seed: u64,
) -> Result<SampleOutcome> {
    if mpps.is_empty() || sizes.is_empty() {
        return Err(Error::argument("sample_tiles", "empty mpp or size menu".to_string()));
    }
    for &m in mpps {
        if !MPP_MENU.iter().any(|&x| (x - m).abs() < 1e-9) {
            return Err(Error::argument(
                "sample_tiles",
                format!("mpp {m} not in the declared menu {MPP_MENU:?}"),
            ));
        }
    }
    let extent = slide.params.extent;
    for &s in sizes {
        let worst = (s as f64 * (mpps.iter().cloned().fold(0.0, f64::max) / BASE_MPP)).round() as usize;
        if worst > slide.params.max_footprint || worst > extent {
            return Err(Error::argument(
                "sample_tiles",
                format!("size {s} needs footprint {worst}, beyond the slide's max {}", slide.params.max_footprint),
            ));
        }
    }
    let mut r = rng::stream(seed, "tile-sample", 0);
    let mut tiles = Vec::with_capacity(count);
    for i in 0..count {
        let mpp = mpps[r.gen_range(0..mpps.len())];
        let size = sizes[r.gen_range(0..sizes.len())];
        let spec_fp = TileSpec {
            mpp,
            size,
            origin_x: 0,
            origin_y: 0,
        }
        .footprint();
        let mut placed = false;
        for _ in 0..SAMPLE_ATTEMPT_CAP {
            let x = r.gen_range(0..=extent - spec_fp);
            let y = r.gen_range(0..=extent - spec_fp);
            if slide.tissue.all_in_rect(y, x, spec_fp, spec_fp) && !slide.artifact.any_in_rect(y, x, spec_fp, spec_fp) {
                tiles.push(TileSpec {
                    mpp,
                    size,
                    origin_x: x,
                    origin_y: y,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Ok(SampleOutcome {
                tiles: Vec::new(),
                diagnostic: Some(format!(
                    "gave up after {SAMPLE_ATTEMPT_CAP} attempts on tile {i} \
                     (mpp {mpp}, size {size}, footprint {spec_fp}) of slide '{}'",
                    slide.params.slide_id
                )),
            });
        }
    }
    Ok(SampleOutcome {
        tiles,
        diagnostic: None,
    })
}

/// Read a tile out of the slide: box-filter the footprint down to
/// `size x size` and scale to [0, 1]. Accumulation runs in f64 so the tile
/// mean matches the source region mean to well under 1e-6.
pub fn extract_tile(slide: &Slide, spec: &TileSpec) -> Result<Tensor<f32>> {
    let fp = spec.footprint();
    let extent = slide.params.extent;
    if spec.origin_x + fp > extent || spec.origin_y + fp > extent {
        return Err(Error::argument(
            "extract_tile",
            format!(
                "footprint {fp} at ({}, {}) leaves the {extent} px slide",
                spec.origin_x, spec.origin_y
            ),
        ));
    }
    if fp % spec.size != 0 {
        return Err(Error::argument(
            "extract_tile",
            format!("footprint {fp} not an integer multiple of size {}", spec.size),
        ));
    }
    let ratio = fp / spec.size;
    let inv = 1.0 / (ratio * ratio) as f64 / 255.0;
    let mut out = Tensor::<f32>::zeros(&[spec.size, spec.size, 3]);
    for ty in 0..spec.size {
        for tx in 0..spec.size {
            let mut acc = [0.0f64; 3];
            for sy in 0..ratio {
                let row = (spec.origin_y + ty * ratio + sy) * extent;
                for sx in 0..ratio {
                    let o = (row + spec.origin_x + tx * ratio + sx) * 3;
                    acc[0] += slide.pixels[o] as f64;
                    acc[1] += slide.pixels[o + 1] as f64;
                    acc[2] += slide.pixels[o + 2] as f64;
                }
            }
            let dst = (ty * spec.size + tx) * 3;
            for c in 0..3 {
                out.data_mut()[dst + c] = (acc[c] * inv) as f32;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Manifest format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelFormat {
    PngRgb8,
    RawF32,
}

impl PixelFormat {
    pub fn extension(self) -> &'static str {
        match self {
            PixelFormat::PngRgb8 => "png",
            PixelFormat::RawF32 => "raw",
        }
    }
}

/// First line of a manifest: the pixel format, the field names every entry
/// carries, and the menus the corpus was sampled from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestHeader {
    pub format: PixelFormat,
    pub fields: Vec<String>,
    pub mpps: Vec<f64>,
    pub tile_sizes: Vec<usize>,
}

impl ManifestHeader {
    pub fn new(format: PixelFormat, mpps: &[f64], tile_sizes: &[usize]) -> Self {
        ManifestHeader {
            format,
            fields: ENTRY_FIELDS.iter().map(|s| s.to_string()).collect(),
            mpps: mpps.to_vec(),
            tile_sizes: tile_sizes.to_vec(),
        }
    }
}

pub const ENTRY_FIELDS: [&str; 7] = [
    "slide_id",
    "mpp",
    "tile_size",
    "origin_x",
    "origin_y",
    "pixel_path",
    "seed",
];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TileEntry {
    pub slide_id: String,
    pub mpp: f64,
    pub tile_size: usize,
    pub origin_x: usize,
    pub origin_y: usize,
    /// Relative to the manifest's directory.
    pub pixel_path: String,
    pub seed: u64,
}

/// Streaming manifest writer: header first, then one JSON entry per line.
pub struct ManifestWriter {
    out: BufWriter<File>,
    entries: usize,
}

impl ManifestWriter {
    pub fn create(path: &Path, header: &ManifestHeader) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        Ok(ManifestWriter { out, entries: 0 })
    }

    pub fn write_entry(&mut self, entry: &TileEntry) -> Result<()> {
        serde_json::to_writer(&mut self.out, entry)?;
        self.out.write_all(b"\n")?;
        self.entries += 1;
        Ok(())
    }

    pub fn entries_written(&self) -> usize {
        self.entries
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush()?;
        Ok(self.entries)
    }
}

pub fn read_manifest(path: &Path) -> Result<(ManifestHeader, Vec<TileEntry>)> {
    let file = File::open(path).map_err(|e| Error::Integrity(format!("manifest {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = match lines.next() {
        Some(l) => l?,
        None => return Err(Error::Integrity(format!("manifest {} is empty", path.display()))),
    };
    let header: ManifestHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Integrity(format!("manifest header of {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: TileEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Integrity(format!("manifest entry {} of {}: {e}", i + 1, path.display())))?;
        entries.push(entry);
    }
    Ok((header, entries))
}

/// Write one tile's pixels next to the manifest in the declared format.
pub fn save_entry_pixels(root: &Path, entry: &TileEntry, tile: &Tensor<f32>, format: PixelFormat) -> Result<()> {
    let path = root.join(&entry.pixel_path);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let side = entry.tile_size;
    match format {
        PixelFormat::PngRgb8 => {
            let bytes: Vec<u8> = tile
                .data()
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            let img = image::RgbImage::from_raw(side as u32, side as u32, bytes)
                .ok_or_else(|| Error::argument("save_entry_pixels", "tile bytes do not fill the image".to_string()))?;
            img.save(&path)
                .map_err(|e| Error::Integrity(format!("writing {}: {e}", path.display())))?;
        }
        PixelFormat::RawF32 => {
            // Planar layout: all of channel 0, then 1, then 2, f32 LE.
            let mut out = BufWriter::new(File::create(&path)?);
            for c in 0..3 {
                for px in 0..side * side {
                    out.write_all(&tile.data()[px * 3 + c].to_le_bytes())?;
                }
            }
            out.flush()?;
        }
    }
    Ok(())
}

/// Load a tile's pixels as `[size, size, 3]` f32 in [0, 1]. A missing or
/// malformed pixel file is an integrity error naming the record.
pub fn load_entry_pixels(root: &Path, header: &ManifestHeader, entry: &TileEntry) -> Result<Tensor<f32>> {
    let path = root.join(&entry.pixel_path);
    let side = entry.tile_size;
    let describe = || {
        format!(
            "tile of slide '{}' at ({}, {}) mpp {} (pixel file {})",
            entry.slide_id, entry.origin_x, entry.origin_y, entry.mpp, entry.pixel_path
        )
    };
    match header.format {
        PixelFormat::PngRgb8 => {
            let img = image::open(&path).map_err(|e| Error::Integrity(format!("{}: {e}", describe())))?;
            let rgb = img.to_rgb8();
            if rgb.width() as usize != side || rgb.height() as usize != side {
                return Err(Error::Integrity(format!(
                    "{}: image is {}x{}, expected {side}x{side}",
                    describe(),
                    rgb.width(),
                    rgb.height()
                )));
            }
            Ok(Tensor::from_vec(
                &[side, side, 3],
                rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
            ))
        }
        PixelFormat::RawF32 => {
            let mut bytes = Vec::new();
            File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::Integrity(format!("{}: {e}", describe())))?;
            if bytes.len() != side * side * 3 * 4 {
                return Err(Error::Integrity(format!(
                    "{}: raw file holds {} bytes, expected {}",
                    describe(),
                    bytes.len(),
                    side * side * 3 * 4
                )));
            }
            let mut out = Tensor::<f32>::zeros(&[side, side, 3]);
            let plane = side * side;
            for c in 0..3 {
                for px in 0..plane {
                    let o = (c * plane + px) * 4;
                    let v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
                    out.data_mut()[px * 3 + c] = v;
                }
            }
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Slide sidecar
// ---------------------------------------------------------------------------

/// One line of `slides.jsonl`: identity and labels for a generated slide.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SlideInfo {
    pub slide_id: String,
    pub class: SlideClass,
    pub seed: u64,
    pub extent: usize,
    pub tissue_fraction: f64,
}

pub fn write_slide_sidecar(path: &Path, slides: &[SlideInfo]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in slides {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_slide_sidecar(path: &Path) -> Result<Vec<SlideInfo>> {
    let file = File::open(path).map_err(|e| Error::Integrity(format!("sidecar {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Integrity(format!("sidecar line {} of {}: {e}", i + 1, path.display())))?,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Corpus build
// ---------------------------------------------------------------------------

mod corpus_defaults {
    use super::PixelFormat;
    pub fn slides_per_class() -> usize {
        2
    }
    pub fn tiles_per_slide() -> usize {
        8
    }
    pub fn extent() -> usize {
        1024
    }
    pub fn mpps() -> Vec<f64> {
        vec![0.25, 0.5]
    }
    pub fn tile_sizes() -> Vec<usize> {
        vec![96]
    }
    pub fn tissue_target() -> f64 {
        0.45
    }
    pub fn artifact_fraction() -> f64 {
        0.02
    }
    pub fn format() -> PixelFormat {
        PixelFormat::PngRgb8
    }
    pub fn seed() -> u64 {
        1
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CorpusConfig {
    #[serde(default = "corpus_defaults::slides_per_class")]
    pub slides_per_class: usize,
    #[serde(default = "corpus_defaults::tiles_per_slide")]
    pub tiles_per_slide: usize,
    #[serde(default = "corpus_defaults::extent")]
    pub extent: usize,
    #[serde(default = "corpus_defaults::mpps")]
    pub mpps: Vec<f64>,
    #[serde(default = "corpus_defaults::tile_sizes")]
    pub tile_sizes: Vec<usize>,
    #[serde(default = "corpus_defaults::tissue_target")]
    pub tissue_target: f64,
    #[serde(default = "corpus_defaults::artifact_fraction")]
    pub artifact_fraction: f64,
    #[serde(default = "corpus_defaults::format")]
    pub format: PixelFormat,
    #[serde(default = "corpus_defaults::seed")]
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults fill every field")
    }
}

impl CorpusConfig {
    pub fn max_footprint(&self) -> usize {
        let max_mpp = self.mpps.iter().cloned().fold(0.0, f64::max);
        let max_size = self.tile_sizes.iter().cloned().max().unwrap_or(0);
        (max_size as f64 * (max_mpp / BASE_MPP)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.mpps.is_empty() || self.tile_sizes.is_empty() {
            return Err(Error::Config("mpp and tile size menus must be non-empty".to_string()));
        }
        for &m in &self.mpps {
            if !MPP_MENU.iter().any(|&x| (x - m).abs() < 1e-9) {
                return Err(Error::Config(format!("mpp {m} not in the declared menu {MPP_MENU:?}")));
            }
        }
        if self.extent < 2 * self.max_footprint() {
            return Err(Error::Config(format!(
                "extent {} too small for footprint {} (needs at least {})",
                self.extent,
                self.max_footprint(),
                2 * self.max_footprint()
            )));
        }
        Ok(())
    }
}

/// Per-(mpp, size) tile counts. Keyed by (mpp in hundredths, size) so the map
/// stays ordered.
pub type StratumCounts = BTreeMap<(u32, usize), usize>;

#[derive(Debug)]
pub struct CorpusSummary {
    pub manifest_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub tiles_total: usize,
    pub per_stratum: StratumCounts,
    /// Sampling diagnostics from slides that could not be fully tiled.
    pub diagnostics: Vec<String>,
}

pub fn stratum_key(mpp: f64, size: usize) -> (u32, usize) {
    ((mpp * 100.0).round() as u32, size)
}

/// Generate the full corpus under `root`: slides are synthesized one at a
/// time (never all held in memory), tiles extracted and written, and the
/// manifest + sidecar streamed out.
pub fn build_corpus(root: &Path, cfg: &CorpusConfig) -> Result<CorpusSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(root)?;
    let manifest_path = root.join("manifest.jsonl");
    let sidecar_path = root.join("slides.jsonl");
    let header = ManifestHeader::new(cfg.format, &cfg.mpps, &cfg.tile_sizes);
    let mut writer = ManifestWriter::create(&manifest_path, &header)?;
    // Every requested stratum is reported, including ones no tile landed in.
    let mut per_stratum = StratumCounts::new();
    for &mpp in &cfg.mpps {
        for &size in &cfg.tile_sizes {
            per_stratum.insert(stratum_key(mpp, size), 0);
        }
    }
    let mut slides_info = Vec::new();
    let mut diagnostics = Vec::new();

    let mut slide_index = 0u64;
    for class in SlideClass::ALL {
        for s in 0..cfg.slides_per_class {
            let slide_id = format!("{}_{s:02}", class.label());
            let params = SlideParams {
                slide_id: slide_id.clone(),
                class,
                extent: cfg.extent,
                seed: rng::derive_seed(cfg.seed, "slide", slide_index),
                tissue_target: cfg.tissue_target,
                artifact_fraction: cfg.artifact_fraction,
                max_footprint: cfg.max_footprint(),
            };
            let slide = synth_slide(&params)?;
            let sample_seed = rng::derive_seed(cfg.seed, "sample", slide_index);
            let outcome = sample_tiles(&slide, &cfg.mpps, &cfg.tile_sizes, cfg.tiles_per_slide, sample_seed)?;
            if let Some(d) = outcome.diagnostic {
                diagnostics.push(d);
            }
            for (i, spec) in outcome.tiles.iter().enumerate() {
                let entry = TileEntry {
                    slide_id: slide_id.clone(),
                    mpp: spec.mpp,
                    tile_size: spec.size,
                    origin_x: spec.origin_x,
                    origin_y: spec.origin_y,
                    pixel_path: format!("tiles/{slide_id}_{i:05}.{}", cfg.format.extension()),
                    seed: sample_seed,
                };
                let tile = extract_tile(&slide, spec)?;
                save_entry_pixels(root, &entry, &tile, cfg.format)?;
                *per_stratum.entry(stratum_key(spec.mpp, spec.size)).or_insert(0) += 1;
                writer.write_entry(&entry)?;
            }
            slides_info.push(SlideInfo {
                slide_id,
                class,
                seed: params.seed,
                extent: params.extent,
                tissue_fraction: slide.tissue_fraction(),
            });
            slide_index += 1;
        }
    }
    let tiles_total = writer.finish()?;
    write_slide_sidecar(&sidecar_path, &slides_info)?;
    Ok(CorpusSummary {
        manifest_path,
        sidecar_path,
        tiles_total,
        per_stratum,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params(seed: u64) -> SlideParams {
        SlideParams {
            slide_id: format!("test_{seed}"),
            class: SlideClass::HeFine,
            extent: 256,
            seed,
            tissue_target: 0.45,
            artifact_fraction: 0.02,
            max_footprint: 128,
        }
    }

    #[test]
    fn bitgrid_rect_scans_agree_with_bit_loops() {
        let mut g = BitGrid::new(9, 150); // crosses word boundaries
        for (r, c) in [(0usize, 0usize), (3, 63), (3, 64), (3, 65), (5, 100), (8, 149)] {
            g.set(r, c, true);
        }
        assert_eq!(g.count_ones(), 6);
        for r0 in 0..9 {
            for c0 in (0..150).step_by(13) {
                let h = (9 - r0).min(4);
                let w = (150 - c0).min(70);
                let mut all = true;
                let mut any = false;
                for r in r0..r0 + h {
                    for c in c0..c0 + w {
                        all &= g.get(r, c);
                        any |= g.get(r, c);
                    }
                }
                assert_eq!(g.all_in_rect(r0, c0, h, w), all, "all at ({r0},{c0})");
                assert_eq!(g.any_in_rect(r0, c0, h, w), any, "any at ({r0},{c0})");
            }
        }
        g.set(3, 64, false);
        assert!(!g.get(3, 64));
        assert_eq!(g.count_ones(), 5);

        // A fully set rectangle passes all_in_rect across a word seam.
        let mut full = BitGrid::new(4, 130);
        for r in 1..3 {
            for c in 60..70 {
                full.set(r, c, true);
            }
        }
        assert!(full.all_in_rect(1, 60, 2, 10));
        assert!(!full.all_in_rect(1, 59, 2, 10));
        assert!(full.any_in_rect(0, 0, 4, 130));
    }

    #[test]
    fn slides_hit_the_tissue_target_across_seeds() {
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let slide = synth_slide(&small_params(seed)).unwrap();
            let frac = slide.tissue_fraction();
            worst = worst.max((frac - 0.45).abs());
            assert!(
                (frac - 0.45).abs() <= 0.05,
                "seed {seed}: tissue fraction {frac} off target"
            );
        }
        // The quantile threshold should do much better than the allowance.
        assert!(worst < 0.05, "worst deviation {worst}");
    }

    #[test]
    fn slide_synthesis_is_deterministic() {
        let a = synth_slide(&small_params(7)).unwrap();
        let b = synth_slide(&small_params(7)).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.tissue, b.tissue);
        assert_eq!(a.artifact, b.artifact);
        let c = synth_slide(&small_params(8)).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn artifacts_stay_outside_the_core_and_scale_with_the_fraction() {
        let mut p = small_params(3);
        p.artifact_fraction = 0.0;
        let clean = synth_slide(&p).unwrap();
        assert_eq!(clean.artifact.count_ones(), 0);

        p.artifact_fraction = 0.05;
        let marked = synth_slide(&p).unwrap();
        let bits = marked.artifact.count_ones();
        let total = (p.extent * p.extent) as f64;
        assert!(bits as f64 >= 0.025 * total, "only {bits} artifact px");
        let (lo, hi) = p.core_bounds();
        for y in lo..hi {
            for x in lo..hi {
                assert!(!marked.artifact.get(y, x), "artifact inside core at ({y},{x})");
            }
        }
    }

    #[test]
    fn classes_are_visually_distinct_in_the_mean() {
        // Mean tissue color should separate the three palettes.
        let mut means = Vec::new();
        for class in [SlideClass::HeFine, SlideClass::IhcFine, SlideClass::SpecialFine] {
            let mut p = small_params(11);
            p.class = class;
            let slide = synth_slide(&p).unwrap();
            let mut acc = [0.0f64; 3];
            let mut n = 0.0;
            for y in 0..p.extent {
                for x in 0..p.extent {
                    if slide.tissue.get(y, x) && !slide.artifact.get(y, x) {
                        let o = (y * p.extent + x) * 3;
                        for c in 0..3 {
                            acc[c] += slide.pixels[o + c] as f64;
                        }
                        n += 1.0;
                    }
                }
            }
            means.push([acc[0] / n, acc[1] / n, acc[2] / n]);
        }
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d: f64 = (0..3).map(|c| (means[i][c] - means[j][c]).powi(2)).sum::<f64>().sqrt();
                assert!(d > 20.0, "palettes {i} and {j} too close: {d}");
            }
        }
    }

    #[test]
    fn sampled_tiles_sit_on_clean_tissue() {
        let slide = synth_slide(&small_params(5)).unwrap();
        let out = sample_tiles(&slide, &[0.25, 0.5], &[64], 40, 9).unwrap();
        assert!(out.diagnostic.is_none());
        assert_eq!(out.tiles.len(), 40);
        for t in &out.tiles {
            let fp = t.footprint();
            assert!(slide.tissue.all_in_rect(t.origin_y, t.origin_x, fp, fp));
            assert!(!slide.artifact.any_in_rect(t.origin_y, t.origin_x, fp, fp));
            assert!([64usize].contains(&t.size));
            assert!([0.25, 0.5].iter().any(|&m| (m - t.mpp).abs() < 1e-9));
        }
        let again = sample_tiles(&slide, &[0.25, 0.5], &[64], 40, 9).unwrap();
        assert_eq!(out.tiles, again.tiles);
    }

    #[test]
    fn impossible_sampling_returns_a_diagnostic_not_an_error() {
        let mut slide = synth_slide(&small_params(6)).unwrap();
        slide.tissue = BitGrid::new(slide.params.extent, slide.params.extent); // no tissue anywhere
        let out = sample_tiles(&slide, &[0.25], &[64], 3, 1).unwrap();
        assert!(out.tiles.is_empty());
        let d = out.diagnostic.expect("diagnostic expected");
        assert!(d.contains("gave up"), "{d}");
    }

    #[test]
    fn extraction_preserves_the_region_mean() {
        let slide = synth_slide(&small_params(12)).unwrap();
        for &(mpp, size) in &[(0.5, 64usize), (1.0, 32)] {
            let out = sample_tiles(&slide, &[mpp], &[size], 1, 2).unwrap();
            let spec = &out.tiles[0];
            let tile = extract_tile(&slide, spec).unwrap();
            let fp = spec.footprint();
            let mut src_mean = 0.0f64;
            for y in 0..fp {
                for x in 0..fp {
                    let o = ((spec.origin_y + y) * slide.params.extent + spec.origin_x + x) * 3;
                    src_mean += (slide.pixels[o] as f64 + slide.pixels[o + 1] as f64 + slide.pixels[o + 2] as f64)
                        / 255.0;
                }
            }
            src_mean /= (fp * fp * 3) as f64;
            let tile_mean = tile.data().iter().map(|&v| v as f64).sum::<f64>() / tile.len() as f64;
            assert!(
                (src_mean - tile_mean).abs() < 1e-6,
                "mpp {mpp}: {src_mean} vs {tile_mean}"
            );
        }
    }

    #[test]
    fn manifest_round_trips_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let slide = synth_slide(&small_params(20)).unwrap();
        let out = sample_tiles(&slide, &[0.25], &[32], 3, 4).unwrap();
        for format in [PixelFormat::PngRgb8, PixelFormat::RawF32] {
            let root = dir.path().join(format!("{format:?}"));
            std::fs::create_dir_all(&root).unwrap();
            let header = ManifestHeader::new(format, &[0.25], &[32]);
            let manifest = root.join("manifest.jsonl");
            let mut w = ManifestWriter::create(&manifest, &header).unwrap();
            let mut tiles = Vec::new();
            for (i, spec) in out.tiles.iter().enumerate() {
                let entry = TileEntry {
                    slide_id: slide.params.slide_id.clone(),
                    mpp: spec.mpp,
                    tile_size: spec.size,
                    origin_x: spec.origin_x,
                    origin_y: spec.origin_y,
                    pixel_path: format!("tiles/t_{i:05}.{}", format.extension()),
                    seed: 4,
                };
                let tile = extract_tile(&slide, spec).unwrap();
                save_entry_pixels(&root, &entry, &tile, format).unwrap();
                w.write_entry(&entry).unwrap();
                tiles.push((entry, tile));
            }
            assert_eq!(w.finish().unwrap(), 3);

            let (h, entries) = read_manifest(&manifest).unwrap();
            assert_eq!(h, header);
            assert_eq!(entries.len(), 3);
            for ((want_entry, want_tile), got_entry) in tiles.iter().zip(&entries) {
                assert_eq!(want_entry, got_entry);
                let got = load_entry_pixels(&root, &h, got_entry).unwrap();
                assert_eq!(got.shape(), want_tile.shape());
                // mpp 0.25 is a 1:1 read of u8 pixels, so png survives exactly
                // and raw_f32 is exact by construction.
                for (a, b) in got.data().iter().zip(want_tile.data()) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn missing_pixel_file_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let header = ManifestHeader::new(PixelFormat::PngRgb8, &[0.25], &[32]);
        let entry = TileEntry {
            slide_id: "ghost_00".to_string(),
            mpp: 0.25,
            tile_size: 32,
            origin_x: 0,
            origin_y: 0,
            pixel_path: "tiles/ghost_00_00000.png".to_string(),
            seed: 0,
        };
        match load_entry_pixels(dir.path(), &header, &entry) {
            Err(Error::Integrity(msg)) => {
                assert!(msg.contains("ghost_00"), "{msg}");
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn corpus_build_is_reproducible_and_counts_strata() {
        let cfg = CorpusConfig {
            slides_per_class: 1,
            tiles_per_slide: 3,
            extent: 256,
            mpps: vec![0.25, 0.5],
            tile_sizes: vec![48],
            tissue_target: 0.45,
            artifact_fraction: 0.02,
            format: PixelFormat::PngRgb8,
            seed: 33,
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = build_corpus(dir_a.path(), &cfg).unwrap();
        let b = build_corpus(dir_b.path(), &cfg).unwrap();
        assert_eq!(a.tiles_total, 18);
        assert_eq!(a.per_stratum, b.per_stratum);
        assert_eq!(a.per_stratum.values().sum::<usize>(), 18);
        assert!(a.diagnostics.is_empty());

        let ma = std::fs::read(&a.manifest_path).unwrap();
        let mb = std::fs::read(&b.manifest_path).unwrap();
        assert_eq!(ma, mb, "manifest bytes must reproduce");
        let sa = std::fs::read(&a.sidecar_path).unwrap();
        let sb = std::fs::read(&b.sidecar_path).unwrap();
        assert_eq!(sa, sb);

        let (_, entries) = read_manifest(&a.manifest_path).unwrap();
        for e in &entries {
            let pa = std::fs::read(dir_a.path().join(&e.pixel_path)).unwrap();
            let pb = std::fs::read(dir_b.path().join(&e.pixel_path)).unwrap();
            assert_eq!(pa, pb, "pixel bytes for {}", e.pixel_path);
        }
        let slides = read_slide_sidecar(&a.sidecar_path).unwrap();
        assert_eq!(slides.len(), 6);
        assert!(slides.iter().all(|s| (s.tissue_fraction - 0.45).abs() <= 0.05));
    }

    #[test]
    fn zero_tiles_still_yields_a_valid_manifest() {
        let cfg = CorpusConfig {
            slides_per_class: 1,
            tiles_per_slide: 0,
            extent: 256,
            mpps: vec![0.25],
            tile_sizes: vec![32],
            tissue_target: 0.45,
            artifact_fraction: 0.0,
            format: PixelFormat::PngRgb8,
            seed: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let summary = build_corpus(dir.path(), &cfg).unwrap();
        assert_eq!(summary.tiles_total, 0);
        let (h, entries) = read_manifest(&summary.manifest_path).unwrap();
        assert!(entries.is_empty());
        assert_eq!(h.format, PixelFormat::PngRgb8);
    }

    #[test]
    fn config_validation_rejects_off_menu_settings() {
        let mut cfg = CorpusConfig::default();
        cfg.mpps = vec![0.3];
        assert!(cfg.validate().is_err());
        let mut cfg = CorpusConfig::default();
        cfg.extent = 100; // too small for the default menu
        cfg.mpps = vec![2.0];
        cfg.tile_sizes = vec![96];
        assert!(cfg.validate().is_err());
        let mut p = small_params(0);
        p.tissue_target = 0.2; // below what the core alone guarantees
        assert!(p.validate().is_err());
    }
}
