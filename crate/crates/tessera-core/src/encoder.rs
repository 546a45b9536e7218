//! Pre-norm ViT encoder over tile pixels: flexible patch embedding, CLS +
//! register tokens, axial 2D RoPE on patch rows, and a documented
//! checkpoint format. Forward returns full activations so training can run
//! the hand-rolled backward chain; evaluation paths just drop them.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::flexi::{EmbedKernel, PatchEmbed, PatchSizeSchedule, ResizeMode};
use crate::nn::{Block, BlockCache, LayerNorm, LnCache, Parameter, ParamsMut, ParamsRef};
use crate::rng;
use crate::rope::RopeTable;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub channels: usize,
    /// Expected tile side in pixels; every configured patch size must divide it.
    pub tile_side: usize,
    /// Register token count (excluded from probes and from RoPE).
    pub registers: usize,
    /// Candidate patch sizes; a single entry means fixed-size tokenization.
    pub patch_sizes: Vec<usize>,
    pub rope: bool,
    pub rope_base: f64,
    pub resize_mode: ResizeMode,
}

impl EncoderConfig {
    /// Small flexible-patch encoder: dim 64, depth 4, 4 heads, patch sizes
    /// {8, 16, 32} over 96 px tiles, no registers.
    pub fn preset_4s_like() -> Self {
        EncoderConfig {
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            channels: 3,
            tile_side: 96,
            registers: 0,
            patch_sizes: vec![8, 16, 32],
            rope: true,
            rope_base: crate::rope::DEFAULT_ROPE_BASE,
            resize_mode: ResizeMode::PseudoInverse,
        }
    }

    /// Wider fixed-patch encoder with 4 register tokens: dim 128, depth 6,
    /// 8 heads, patch size 8 over 96 px tiles.
    pub fn preset_4g_like() -> Self {
        EncoderConfig {
            dim: 128,
            depth: 6,
            heads: 8,
            mlp_ratio: 4,
            channels: 3,
            tile_side: 96,
            registers: 4,
            patch_sizes: vec![8],
            rope: true,
            rope_base: crate::rope::DEFAULT_ROPE_BASE,
            resize_mode: ResizeMode::PseudoInverse,
        }
    }

    /// Shape-check preset: 224 px tiles, patch 14, 4 registers
    /// -> 1 + 4 + 256 = 261 tokens.
    pub fn preset_shape_224_p14() -> Self {
        EncoderConfig {
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            channels: 3,
            tile_side: 224,
            registers: 4,
            patch_sizes: vec![14],
            rope: true,
            rope_base: crate::rope::DEFAULT_ROPE_BASE,
            resize_mode: ResizeMode::PseudoInverse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // depth 0 is legal: the encoder degenerates to embed + final norm.
        if self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder dims must be positive".to_string()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.rope && (self.dim / self.heads) % 4 != 0 {
            return Err(Error::Config(format!(
                "rope requires head_dim divisible by 4, got {}",
                self.dim / self.heads
            )));
        }
        if self.patch_sizes.is_empty() {
            return Err(Error::Config("no patch sizes configured".to_string()));
        }
        for &p in &self.patch_sizes {
            if p == 0 || self.tile_side % p != 0 {
                return Err(Error::Config(format!(
                    "patch size {p} must divide tile side {}",
                    self.tile_side
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// CLS + registers: token rows that sit in front of the patch grid.
    pub fn prefix_tokens(&self) -> usize {
        1 + self.registers
    }

    pub fn schedule(&self) -> Result<PatchSizeSchedule> {
        PatchSizeSchedule::new(self.patch_sizes.clone())
    }

    /// Largest configured patch size — the native resolution weights are
    /// stored at.
    pub fn native_patch(&self) -> usize {
        *self.patch_sizes.iter().max().unwrap()
    }

    pub fn tokens_for(&self, tile_side: usize, p: usize) -> usize {
        self.prefix_tokens() + (tile_side / p) * (tile_side / p)
    }
}

// ---------------------------------------------------------------------------
// Compute cost model
// ---------------------------------------------------------------------------

/// Closed-form MAC counts for one tile forward. Token count uses the patch
/// grid only — CLS/register overhead is deliberately ignored so the terms
/// scale exactly with (tile/p)².
#[derive(Debug, Clone, Copy)]
pub struct FlopProfile {
    pub embed: f64,
    pub attn_linear: f64,
    pub attn_quadratic: f64,
    pub mlp: f64,
}

impl FlopProfile {
    pub fn total(&self) -> f64 {
        self.embed + self.attn_linear + self.attn_quadratic + self.mlp
    }
}

pub fn count_flops(
    dim: usize,
    depth: usize,
    mlp_ratio: usize,
    channels: usize,
    tile_side: usize,
    patch: usize,
) -> FlopProfile {
    let n = ((tile_side / patch) * (tile_side / patch)) as f64;
    let d = dim as f64;
    let l = depth as f64;
    FlopProfile {
        embed: n * (patch * patch * channels) as f64 * d,
        attn_linear: l * 4.0 * n * d * d,
        attn_quadratic: l * 2.0 * n * n * d,
        mlp: l * 2.0 * mlp_ratio as f64 * n * d * d,
    }
}

impl EncoderConfig {
    pub fn count_flops(&self, patch: usize) -> FlopProfile {
        count_flops(
            self.dim,
            self.depth,
            self.mlp_ratio,
            self.channels,
            self.tile_side,
            patch,
        )
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub embed: PatchEmbed<T>,
    pub cls: Parameter<T>,
    pub registers: Parameter<T>,
    /// Learned token substituted at masked patch positions.
    pub mask_token: Parameter<T>,
    pub blocks: Vec<Block<T>>,
    pub final_ln: LayerNorm<T>,
}

/// Final-layer tokens split by role.
#[derive(Debug, Clone)]
pub struct TokenSequence<T> {
    pub cls: Tensor<T>,
    pub registers: Tensor<T>,
    pub patches: Tensor<T>,
    pub grid: (usize, usize),
    pub patch_size: usize,
}

/// Everything backward needs, in forward order.
#[derive(Debug)]
pub struct EncoderActivations<T> {
    pub patch_matrix: Tensor<T>,
    pub block_inputs: Vec<Tensor<T>>,
    pub block_caches: Vec<BlockCache<T>>,
    pub final_ln_cache: LnCache<T>,
    pub masked: Vec<usize>,
    pub grid: (usize, usize),
    pub rope: Option<RopeTable>,
}

impl<T: Scalar> Encoder<T> {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "encoder-init", 0);
        let embed = PatchEmbed::init(
            config.native_patch(),
            config.channels,
            config.dim,
            &config.patch_sizes,
            config.resize_mode,
            &mut r,
        )?;
        let cls = Parameter::new(rng::trunc_normal(&[1, config.dim], crate::nn::INIT_STD, &mut r));
        let registers = Parameter::new(rng::trunc_normal(
            &[config.registers, config.dim],
            crate::nn::INIT_STD,
            &mut r,
        ));
        let mask_token = Parameter::new(rng::trunc_normal(
            &[1, config.dim],
            crate::nn::INIT_STD,
            &mut r,
        ));
        let blocks = (0..config.depth)
            .map(|_| Block::init(config.dim, config.heads, config.mlp_ratio, &mut r))
            .collect();
        let final_ln = LayerNorm::new(config.dim);
        Ok(Encoder {
            config,
            embed,
            cls,
            registers,
            mask_token,
            blocks,
            final_ln,
        })
    }

    pub fn kernel(&self, patch_size: usize) -> Result<EmbedKernel<T>> {
        self.embed.kernel(patch_size)
    }

    /// Forward over one tile `[side, side, channels]`. `mask` lists patch
    /// indices (row-major grid order) whose embeddings are replaced by the
    /// mask token. Returns the post-LN token matrix `[1+R+N, dim]`.
    pub fn forward(
        &self,
        kernel: &EmbedKernel<T>,
        tile: &Tensor<T>,
        mask: Option<&[usize]>,
    ) -> Result<(Tensor<T>, EncoderActivations<T>)> {
        let side = tile.shape()[0];
        if tile.shape()[1] != side {
            return Err(Error::shape(
                "encoder",
                format!("tiles must be square, got {:?}", tile.shape()),
            ));
        }
        if side % kernel.patch_size != 0 {
            return Err(Error::argument(
                "encoder",
                format!("patch {} does not divide tile side {side}", kernel.patch_size),
            ));
        }
        let (mut tokens, patch_matrix, grid) = self.embed.forward(kernel, tile)?;
        let n = tokens.rows();
        let masked: Vec<usize> = match mask {
            None => Vec::new(),
            Some(idx) => {
                for &i in idx {
                    if i >= n {
                        return Err(Error::argument(
                            "encoder",
                            format!("mask index {i} out of {n} patches"),
                        ));
                    }
                    tokens.row_mut(i).copy_from_slice(self.mask_token.value.row(0));
                }
                idx.to_vec()
            }
        };

        let prefix = self.config.prefix_tokens();
        let dim = self.config.dim;
        let mut seq = Tensor::zeros(&[prefix + n, dim]);
        seq.row_mut(0).copy_from_slice(self.cls.value.row(0));
        for r in 0..self.config.registers {
            seq.row_mut(1 + r).copy_from_slice(self.registers.value.row(r));
        }
        for t in 0..n {
            seq.row_mut(prefix + t).copy_from_slice(tokens.row(t));
        }

        let rope = if self.config.rope {
            Some(RopeTable::build(
                grid.0,
                grid.1,
                self.config.head_dim(),
                self.config.rope_base,
            )?)
        } else {
            None
        };

        let mut block_inputs = Vec::with_capacity(self.config.depth);
        let mut block_caches = Vec::with_capacity(self.config.depth);
        let mut x = seq;
        for block in &self.blocks {
            block_inputs.push(x.clone());
            let (y, cache) = block.forward(&x, rope.as_ref(), prefix)?;
            block_caches.push(cache);
            x = y;
        }
        let (out, final_ln_cache) = self.final_ln.forward(&x)?;
        Ok((
            out,
            EncoderActivations {
                patch_matrix,
                block_inputs,
                block_caches,
                final_ln_cache,
                masked,
                grid,
                rope,
            },
        ))
    }

    /// Backward from d(output tokens); accumulates every parameter gradient.
    /// The patch-embed weight gradient lands in `kernel`; call
    /// `embed.finalize_kernel` once per step after all views are done.
    pub fn backward(
        &mut self,
        acts: &EncoderActivations<T>,
        kernel: &mut EmbedKernel<T>,
        d_out: &Tensor<T>,
    ) -> Result<()> {
        let mut d = self.final_ln.backward(&acts.final_ln_cache, d_out)?;
        for i in (0..self.blocks.len()).rev() {
            d = self.blocks[i].backward(&acts.block_caches[i], &d, acts.rope.as_ref())?;
        }
        let prefix = self.config.prefix_tokens();
        let dim = self.config.dim;
        // Split the sequence gradient by role.
        for j in 0..dim {
            self.cls.grad.data_mut()[j] += d.at2(0, j);
        }
        for r in 0..self.config.registers {
            for j in 0..dim {
                let v = d.at2(1 + r, j);
                self.registers.grad.data_mut()[r * dim + j] += v;
            }
        }
        let n = d.rows() - prefix;
        let mut d_tokens = Tensor::zeros(&[n, dim]);
        for t in 0..n {
            d_tokens.row_mut(t).copy_from_slice(d.row(prefix + t));
        }
        // Masked rows feed the mask token, not the patch embedding.
        for &i in &acts.masked {
            {
                let row = d_tokens.row(i);
                let g = self.mask_token.grad.data_mut();
                for j in 0..dim {
                    g[j] += row[j];
                }
            }
            d_tokens.row_mut(i).fill(T::zero());
        }
        self.embed.backward(kernel, &acts.patch_matrix, &d_tokens)
    }

    /// Split a forward output into CLS / registers / patches.
    pub fn split_tokens(
        &self,
        out: &Tensor<T>,
        grid: (usize, usize),
        patch_size: usize,
    ) -> TokenSequence<T> {
        let dim = self.config.dim;
        let prefix = self.config.prefix_tokens();
        let n = out.rows() - prefix;
        let cls = Tensor::from_vec(&[dim], out.row(0).to_vec());
        let mut registers = Tensor::zeros(&[self.config.registers, dim]);
        for r in 0..self.config.registers {
            registers.row_mut(r).copy_from_slice(out.row(1 + r));
        }
        let mut patches = Tensor::zeros(&[n, dim]);
        for t in 0..n {
            patches.row_mut(t).copy_from_slice(out.row(prefix + t));
        }
        TokenSequence {
            cls,
            registers,
            patches,
            grid,
            patch_size,
        }
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_, T> {
        let mut out = Vec::new();
        self.embed.collect_params_mut("embed", &mut out);
        out.push(("cls".to_string(), &mut self.cls));
        out.push(("registers".to_string(), &mut self.registers));
        out.push(("mask_token".to_string(), &mut self.mask_token));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_params_mut(&format!("block{i}"), &mut out);
        }
        self.final_ln.collect_params_mut("final_ln", &mut out);
        out
    }

    pub fn params(&self) -> ParamsRef<'_, T> {
        let mut out = Vec::new();
        self.embed.collect_params("embed", &mut out);
        out.push(("cls".to_string(), &self.cls));
        out.push(("registers".to_string(), &self.registers));
        out.push(("mask_token".to_string(), &self.mask_token));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("block{i}"), &mut out);
        }
        self.final_ln.collect_params("final_ln", &mut out);
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------
//
// Binary, little-endian, version tag in the magic:
//   magic   : 8 bytes  "TSRENC01"
//   count   : u32      number of parameters
//   per parameter, in traversal order:
//     name_len : u16
//     name     : utf-8 bytes
//     ndim     : u8
//     dims     : u32 * ndim
//     values   : f32 * prod(dims)
// Values are always stored as f32 regardless of the in-memory scalar type.

const CKPT_MAGIC: &[u8; 8] = b"TSRENC01";

pub fn save_checkpoint<T: Scalar>(encoder: &Encoder<T>, path: &std::path::Path) -> Result<()> {
    let params = encoder.params();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, p) in params {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u16).to_le_bytes())?;
        f.write_all(bytes)?;
        let shape = p.value.shape();
        f.write_all(&[shape.len() as u8])?;
        for &d in shape {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            f.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(
    config: EncoderConfig,
    seed: u64,
    path: &std::path::Path,
) -> Result<Encoder<T>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Integrity("checkpoint truncated before magic".to_string()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Integrity(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut u32b = [0u8; 4];
    f.read_exact(&mut u32b)?;
    let count = u32::from_le_bytes(u32b) as usize;

    let mut encoder = Encoder::<T>::init(config, seed)?;
    let mut params = encoder.params_mut();
    if params.len() != count {
        return Err(Error::Integrity(format!(
            "checkpoint has {count} parameters, model expects {}",
            params.len()
        )));
    }
    for (name, p) in params.iter_mut() {
        let mut u16b = [0u8; 2];
        f.read_exact(&mut u16b)?;
        let name_len = u16::from_le_bytes(u16b) as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)?;
        let got_name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Integrity("non-utf8 parameter name".to_string()))?;
        if &got_name != name {
            return Err(Error::Integrity(format!(
                "parameter order mismatch: checkpoint has '{got_name}', model expects '{name}'"
            )));
        }
        let mut ndim = [0u8; 1];
        f.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            f.read_exact(&mut u32b)?;
            shape.push(u32::from_le_bytes(u32b) as usize);
        }
        if shape != p.value.shape() {
            return Err(Error::Integrity(format!(
                "shape mismatch for '{name}': checkpoint {shape:?}, model {:?}",
                p.value.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        f.read_exact(&mut buf)
            .map_err(|_| Error::Integrity(format!("checkpoint truncated in '{name}'")))?;
        let data = p.value.data_mut();
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            data[i] = T::from_f64(v as f64);
        }
        p.zero_grad();
    }
    Ok(encoder)
}
