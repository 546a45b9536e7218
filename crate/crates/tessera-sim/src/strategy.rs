//! Data-parallel strategy parameters and gradient bucket partitioning.

use tessera_core::{Error, Result};

pub const MB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Ddp,
    Fsdp,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// DDP gradient bucket capacity in bytes.
    pub bucket_cap_bytes: f64,
    /// When off, every bucket pays a flatten/copy cost before its all-reduce.
    pub gradient_as_bucket_view: bool,
    /// Bytes/s charged for that copy.
    pub copy_bandwidth: f64,
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bucket_cap_bytes <= 0.0 {
            return Err(Error::Config("bucket cap must be positive".to_string()));
        }
        if self.copy_bandwidth <= 0.0 {
            return Err(Error::Config("copy bandwidth must be positive".to_string()));
        }
        Ok(())
    }

    /// Stock DDP: 25 MB buckets, bucket view off.
    pub fn ddp_default() -> StrategyConfig {
        StrategyConfig {
            kind: StrategyKind::Ddp,
            bucket_cap_bytes: 25.0 * MB,
            gradient_as_bucket_view: false,
            copy_bandwidth: 40e9,
        }
    }

    /// Tuned DDP: 360 MB buckets and gradient-as-bucket-view.
    pub fn ddp_tuned() -> StrategyConfig {
        StrategyConfig {
            gradient_as_bucket_view: true,
            bucket_cap_bytes: 360.0 * MB,
            ..StrategyConfig::ddp_default()
        }
    }

    pub fn fsdp() -> StrategyConfig {
        StrategyConfig {
            kind: StrategyKind::Fsdp,
            ..StrategyConfig::ddp_default()
        }
    }
}

/// One gradient bucket: the contiguous run of layers `[first, last]` in
/// backward-completion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub first_layer: usize,
    pub last_layer: usize,
    pub bytes: f64,
}

/// Greedy fill in backward-completion order: a bucket closes when adding the
/// next layer would push it past `cap`. Layers larger than the cap become
/// singleton buckets.
pub fn partition_buckets(layer_bytes: &[f64], cap: f64) -> Vec<Bucket> {
    let mut out = Vec::new();
    let mut first = 0;
    let mut bytes = 0.0;
    for (i, &b) in layer_bytes.iter().enumerate() {
        if bytes > 0.0 && bytes + b > cap {
            out.push(Bucket {
                first_layer: first,
                last_layer: i - 1,
                bytes,
            });
            first = i;
            bytes = 0.0;
        }
        bytes += b;
    }
    if bytes > 0.0 {
        out.push(Bucket {
            first_layer: first,
            last_layer: layer_bytes.len() - 1,
            bytes,
        });
    }
    out
}
