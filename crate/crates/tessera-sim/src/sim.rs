//! The step-time model: ring all-reduce costs, a discrete-event DDP
//! simulation with one serialized communication channel, the FSDP cost sum,
//! scaling curves, and the DDP-vs-FSDP comparison.

use tessera_core::{Error, Result};

use crate::cluster::ClusterSpec;
use crate::model::ModelProfile;
use crate::strategy::{partition_buckets, StrategyConfig, StrategyKind};

/// One ring phase (reduce-scatter or all-gather): each rank moves
/// `(W-1)/W * bytes` through the bottleneck link over `W-1` hops.
fn ring_phase_time(bytes: f64, cluster: &ClusterSpec, world: usize) -> f64 {
    if world <= 1 {
        return 0.0;
    }
    let w = world as f64;
    let (bw, hop) = cluster.bottleneck();
    (w - 1.0) / w * bytes / bw + (w - 1.0) * hop
}

/// Ring all-reduce: reduce-scatter plus all-gather. With the hierarchical
/// flag set (and more than one node), the reduction instead runs intra-node
/// first, rings across nodes, and broadcasts back inside each node — far
/// fewer hops over the slow fabric.
pub fn allreduce_time(bytes: f64, cluster: &ClusterSpec, world_size: usize) -> f64 {
    if world_size <= 1 {
        return 0.0;
    }
    let w = world_size as f64;
    if cluster.hierarchical_allreduce && cluster.nodes > 1 && cluster.gpus_per_node > 1 {
        let g = cluster.gpus_per_node as f64;
        let n = cluster.nodes as f64;
        let intra = |phase_bytes: f64| {
            (g - 1.0) / g * phase_bytes / cluster.intra_node_bw + (g - 1.0) * cluster.intra_hop_latency
        };
        let inter = 2.0 * (n - 1.0) / n * bytes / cluster.effective_inter_bw()
            + 2.0 * (n - 1.0) * cluster.effective_inter_hop();
        intra(bytes) + inter + intra(bytes)
    } else {
        let (bw, hop) = cluster.bottleneck();
        2.0 * (w - 1.0) / w * bytes / bw + 2.0 * (w - 1.0) * hop
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct StepReport {
    pub step_time: f64,
    pub images_per_second: f64,
    /// Serialized communication busy time / step time; 0 on a single GPU.
    pub comm_fraction: f64,
    /// DDP: gradient buckets. FSDP: communicating layers. 0 on a single GPU.
    pub bucket_count: usize,
    pub comm_time: f64,
    pub compute_time: f64,
}

fn report(step_time: f64, comm_time: f64, bucket_count: usize, compute: f64, images: f64) -> StepReport {
    StepReport {
        step_time,
        images_per_second: images / step_time,
        comm_fraction: comm_time / step_time,
        bucket_count,
        comm_time,
        compute_time: compute,
    }
}

/// Simulate one optimizer step.
///
/// DDP: gradient buckets become ready as their last layer finishes backward
/// (layers complete in the profile's order); all-reduces run serialized on
/// one channel; the step ends after forward + max(backward, last all-reduce)
/// + optimizer. FSDP charges two all-gathers and one reduce-scatter per
/// layer, unoverlapped, with the optimizer sharded across ranks.
pub fn simulate_step(cluster: &ClusterSpec, model: &ModelProfile, strategy: &StrategyConfig) -> Result<StepReport> {
    cluster.validate()?;
    model.validate()?;
    strategy.validate()?;
    let world = cluster.world_size();
    let images = (world * model.local_batch) as f64;
    let bwd_total = model.total_backward_time();

    if world == 1 {
        let compute = model.forward_time + bwd_total + model.optimizer_time();
        return Ok(report(compute, 0.0, 0, compute, images));
    }

    match strategy.kind {
        StrategyKind::Ddp => {
            let opt = model.optimizer_time();
            let compute = model.forward_time + bwd_total + opt;
            let buckets = partition_buckets(&model.layer_grad_bytes, strategy.bucket_cap_bytes);
            let mut ready_at = Vec::with_capacity(model.layer_backward_time.len());
            let mut acc = 0.0;
            for &t in &model.layer_backward_time {
                acc += t;
                ready_at.push(acc);
            }
            let mut channel_free = 0.0f64;
            let mut busy = 0.0;
            for b in &buckets {
                let copy = if strategy.gradient_as_bucket_view {
                    0.0
                } else {
                    b.bytes / strategy.copy_bandwidth
                };
                let dur = allreduce_time(b.bytes, cluster, world) + cluster.collective_launch_overhead + copy;
                let start = channel_free.max(ready_at[b.last_layer]);
                channel_free = start + dur;
                busy += dur;
            }
            let step = model.forward_time + bwd_total.max(channel_free) + opt;
            Ok(report(step, busy, buckets.len(), compute, images))
        }
        StrategyKind::Fsdp => {
            // Parameters shard W ways; each layer pays an all-gather before
            // forward, another before backward, and a reduce-scatter after.
            let mut comm = 0.0;
            for &bytes in &model.layer_grad_bytes {
                let phase = ring_phase_time(bytes, cluster, world) + cluster.collective_launch_overhead;
                comm += 3.0 * phase;
            }
            let opt = model.optimizer_time() / world as f64;
            let compute = model.forward_time + bwd_total + opt;
            let step = compute + comm;
            Ok(report(step, comm, model.layer_grad_bytes.len(), compute, images))
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CurvePoint {
    pub nodes: usize,
    pub throughput: f64,
    pub efficiency: f64,
    pub comm_fraction: f64,
}

/// Sweep node counts with the given strategy. Efficiency is throughput
/// relative to linear scaling of the single-node result.
pub fn scaling_curve(
    template: &ClusterSpec,
    model: &ModelProfile,
    strategy: &StrategyConfig,
    node_counts: &[usize],
) -> Result<Vec<CurvePoint>> {
    if node_counts.is_empty() {
        return Err(Error::argument("scaling_curve", "empty node count list"));
    }
    let base = simulate_step(&template.with_nodes(1), model, strategy)?;
    let mut out = Vec::with_capacity(node_counts.len());
    for &n in node_counts {
        let r = simulate_step(&template.with_nodes(n), model, strategy)?;
        out.push(CurvePoint {
            nodes: n,
            throughput: r.images_per_second,
            efficiency: r.images_per_second / (n as f64 * base.images_per_second),
            comm_fraction: r.comm_fraction,
        });
    }
    Ok(out)
}

pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("nodes,throughput,efficiency,comm_fraction\n");
    for p in points {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            p.nodes, p.throughput, p.efficiency, p.comm_fraction
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CompareReport {
    pub ddp: StepReport,
    pub fsdp: StepReport,
    /// Tuned-DDP throughput over FSDP throughput.
    pub throughput_ratio: f64,
    pub ddp_memory_bytes: f64,
    pub fsdp_memory_bytes: f64,
}

/// Tuned DDP against FSDP on the same cluster. Memory feasibility is a
/// byte-sum check: parameters, gradients, and two optimizer moments (4x the
/// parameter bytes), which FSDP shards W ways while materializing at most
/// two unsharded layers at a time.
pub fn compare_ddp_fsdp(cluster: &ClusterSpec, model: &ModelProfile) -> Result<CompareReport> {
    cluster.validate()?;
    model.validate()?;
    let world = cluster.world_size() as f64;
    let total = model.total_grad_bytes();
    let ddp_memory_bytes = 4.0 * total;
    let fsdp_memory_bytes = 4.0 * total / world + 2.0 * model.max_layer_bytes();
    if ddp_memory_bytes > cluster.gpu_memory_bytes {
        return Err(Error::argument(
            "compare_ddp_fsdp",
            format!(
                "DDP needs {:.1} GB per GPU but '{}' has {:.1} GB",
                ddp_memory_bytes / 1e9,
                cluster.name,
                cluster.gpu_memory_bytes / 1e9
            ),
        ));
    }
    if fsdp_memory_bytes > cluster.gpu_memory_bytes {
        return Err(Error::argument(
            "compare_ddp_fsdp",
            format!(
                "FSDP needs {:.1} GB per GPU but '{}' has {:.1} GB",
                fsdp_memory_bytes / 1e9,
                cluster.name,
                cluster.gpu_memory_bytes / 1e9
            ),
        ));
    }
    let ddp = simulate_step(cluster, model, &StrategyConfig::ddp_tuned())?;
    let fsdp = simulate_step(cluster, model, &StrategyConfig::fsdp())?;
    let throughput_ratio = ddp.images_per_second / fsdp.images_per_second;
    Ok(CompareReport {
        ddp,
        fsdp,
        throughput_ratio,
        ddp_memory_bytes,
        fsdp_memory_bytes,
    })
}
