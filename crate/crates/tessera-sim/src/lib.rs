//! Throughput simulator for multi-node data-parallel training: gradient
//! bucket partitioning, ring all-reduce timing, compute/communication
//! overlap, RDMA effects, and an FSDP cost model.
//!
//! Nothing here talks to real hardware. Clusters, model profiles, and
//! strategies are plain data; `simulate_step` runs a small discrete-event
//! model of one optimizer step and everything else (scaling curves, DDP vs
//! FSDP comparisons) is built on top of it. All results are deterministic
//! functions of their inputs.

pub mod cluster;
pub mod model;
pub mod sim;
pub mod strategy;

pub use cluster::ClusterSpec;
pub use model::ModelProfile;
pub use sim::{
    allreduce_time, compare_ddp_fsdp, curve_to_csv, scaling_curve, simulate_step, CompareReport, CurvePoint,
    StepReport,
};
pub use strategy::{partition_buckets, StrategyConfig, StrategyKind};
