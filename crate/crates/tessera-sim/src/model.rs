//! Model cost profiles: per-layer gradient sizes and compute times derived
//! from the encoder's closed-form MAC counts.

use tessera_core::encoder::EncoderConfig;
use tessera_core::flexi::ResizeMode;
use tessera_core::{Error, Result};

/// Single GPU-speed constant turning MAC counts into seconds. Fit so the
/// simulated profiles land in the hardware-plausible range; only ratios and
/// curve shapes matter downstream.
pub const MACS_PER_SECOND: f64 = 2e14;

/// Cost profile of one model under data-parallel training.
///
/// `layer_grad_bytes` / `layer_backward_time` are ordered by backward
/// completion: the deepest transformer block first, the patch embedding
/// last. That ordering is what gradient buckets fill in.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub layer_grad_bytes: Vec<f64>,
    pub layer_backward_time: Vec<f64>,
    pub forward_time: f64,
    pub optimizer_time_per_byte: f64,
    pub local_batch: usize,
}

impl ModelProfile {
    pub fn validate(&self) -> Result<()> {
        if self.layer_grad_bytes.is_empty() || self.layer_grad_bytes.len() != self.layer_backward_time.len() {
            return Err(Error::Config(format!(
                "profile '{}': layer byte and time lists must be non-empty and equal length",
                self.name
            )));
        }
        if self.layer_grad_bytes.iter().any(|&b| b <= 0.0) || self.layer_backward_time.iter().any(|&t| t <= 0.0) {
            return Err(Error::Config(format!(
                "profile '{}': layer sizes and compute times must be positive",
                self.name
            )));
        }
        if self.forward_time <= 0.0 || self.local_batch == 0 {
            return Err(Error::Config(format!(
                "profile '{}': forward time and local batch must be positive",
                self.name
            )));
        }
        Ok(())
    }

    pub fn total_grad_bytes(&self) -> f64 {
        self.layer_grad_bytes.iter().sum()
    }

    pub fn total_backward_time(&self) -> f64 {
        self.layer_backward_time.iter().sum()
    }

    pub fn max_layer_bytes(&self) -> f64 {
        self.layer_grad_bytes.iter().cloned().fold(0.0, f64::max)
    }

    pub fn optimizer_time(&self) -> f64 {
        self.total_grad_bytes() * self.optimizer_time_per_byte
    }
}

/// Build a profile from encoder arithmetic: parameter counts give gradient
/// bytes, MAC counts give compute times (backward charged at 2x forward,
/// split across layers in proportion to their MACs).
pub fn profile_from_config(
    name: &str,
    cfg: &EncoderConfig,
    patch: usize,
    local_batch: usize,
    optimizer_time_per_byte: f64,
) -> ModelProfile {
    let d = cfg.dim as f64;
    let r = cfg.mlp_ratio as f64;
    // Per block: qkv (3D^2 + 3D), attention proj (D^2 + D), MLP
    // (2r D^2 + (r+1) D), two layer norms (4D).
    let block_params = (4.0 + 2.0 * r) * d * d + (9.0 + r) * d;
    // Patch embedding at the native size, plus CLS/register/mask tokens and
    // the final norm.
    let native = cfg.native_patch() as f64;
    let embed_params = native * native * cfg.channels as f64 * d + (4.0 + cfg.registers as f64) * d;

    let flops = cfg.count_flops(patch);
    let total_macs = flops.total();
    let block_macs = (total_macs - flops.embed) / cfg.depth as f64;
    let to_seconds = |macs: f64| macs * local_batch as f64 / MACS_PER_SECOND;

    let mut layer_grad_bytes = vec![block_params * 4.0; cfg.depth];
    layer_grad_bytes.push(embed_params * 4.0);
    let mut layer_backward_time = vec![to_seconds(2.0 * block_macs); cfg.depth];
    layer_backward_time.push(to_seconds(2.0 * flops.embed));

    ModelProfile {
        name: name.to_string(),
        layer_grad_bytes,
        layer_backward_time,
        forward_time: to_seconds(total_macs),
        optimizer_time_per_byte,
        local_batch,
    }
}

fn scale_config(dim: usize, depth: usize, heads: usize, registers: usize, patch: usize) -> EncoderConfig {
    EncoderConfig {
        dim,
        depth,
        heads,
        mlp_ratio: 4,
        channels: 3,
        tile_side: 224,
        registers,
        patch_sizes: vec![patch],
        rope: true,
        rope_base: tessera_core::rope::DEFAULT_ROPE_BASE,
        resize_mode: ResizeMode::PseudoInverse,
    }
}

/// ViT-B-class profile: 12 blocks of width 768, patch 16, large per-GPU
/// batch. Communication is small next to compute, so it scales well.
pub fn vit_b_like() -> ModelProfile {
    profile_from_config("vit-b-like", &scale_config(768, 12, 12, 0, 16), 16, 256, 1e-12)
}

/// ViT-G-class profile at patch 14.
pub fn vit_g14_like() -> ModelProfile {
    profile_from_config("vit-g14-like", &scale_config(1664, 48, 16, 4, 14), 14, 32, 1e-12)
}

/// The same backbone tokenized at patch 8: ~3.2x the MACs of patch 14.
pub fn vit_g8_like() -> ModelProfile {
    profile_from_config("vit-g8-like", &scale_config(1664, 48, 16, 4, 8), 8, 32, 1e-12)
}
