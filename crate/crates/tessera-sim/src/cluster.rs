//! Cluster topology and link parameters.

use tessera_core::{Error, Result};

/// A homogeneous GPU cluster: `nodes` machines with `gpus_per_node` GPUs
/// each, fast intra-node links and a slower inter-node fabric.
///
/// RDMA is modeled as a bandwidth multiplier plus a lower per-hop latency on
/// the inter-node path. With RDMA off, transfers stage through host memory;
/// when `congestion_without_rdma` is set, that path additionally degrades
/// with node count (bandwidth divided by `nodes`, hop latency multiplied by
/// `nodes`) to reflect fabric contention from host-mediated copies.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterSpec {
    pub name: String,
    pub nodes: usize,
    pub gpus_per_node: usize,
    /// Bytes/s over NVLink-class links within one node.
    pub intra_node_bw: f64,
    /// Bytes/s over the inter-node fabric without RDMA.
    pub inter_node_bw: f64,
    /// Seconds per ring hop within a node.
    pub intra_hop_latency: f64,
    /// Seconds per ring hop across nodes without RDMA.
    pub inter_hop_latency: f64,
    pub rdma: bool,
    /// Multiplies `inter_node_bw` when RDMA is on.
    pub rdma_bw_multiplier: f64,
    /// Replaces `inter_hop_latency` when RDMA is on.
    pub rdma_hop_latency: f64,
    pub congestion_without_rdma: bool,
    /// Fixed cost to launch one collective, regardless of size.
    pub collective_launch_overhead: f64,
    pub gpu_memory_bytes: f64,
    /// Reduce within nodes first, ring across nodes, broadcast back.
    pub hierarchical_allreduce: bool,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 1 || self.gpus_per_node < 1 {
            return Err(Error::Config(format!(
                "cluster '{}' needs at least one node and one GPU per node",
                self.name
            )));
        }
        if self.intra_node_bw <= 0.0 || self.inter_node_bw <= 0.0 {
            return Err(Error::Config(format!(
                "cluster '{}' bandwidths must be positive",
                self.name
            )));
        }
        if self.rdma_bw_multiplier <= 0.0 {
            return Err(Error::Config(format!(
                "cluster '{}' rdma bandwidth multiplier must be positive",
                self.name
            )));
        }
        if self.intra_hop_latency < 0.0
            || self.inter_hop_latency < 0.0
            || self.rdma_hop_latency < 0.0
            || self.collective_launch_overhead < 0.0
        {
            return Err(Error::Config(format!("cluster '{}' latencies must be >= 0", self.name)));
        }
        Ok(())
    }

    pub fn world_size(&self) -> usize {
        self.nodes * self.gpus_per_node
    }

    pub fn with_nodes(&self, nodes: usize) -> ClusterSpec {
        ClusterSpec {
            nodes,
            ..self.clone()
        }
    }

    /// Effective inter-node bandwidth after RDMA / congestion effects.
    pub fn effective_inter_bw(&self) -> f64 {
        if self.rdma {
            self.inter_node_bw * self.rdma_bw_multiplier
        } else if self.congestion_without_rdma {
            self.inter_node_bw / self.nodes as f64
        } else {
            self.inter_node_bw
        }
    }

    /// Effective inter-node per-hop latency after RDMA / congestion effects.
    pub fn effective_inter_hop(&self) -> f64 {
        if self.rdma {
            self.rdma_hop_latency
        } else if self.congestion_without_rdma {
            self.inter_hop_latency * self.nodes as f64
        } else {
            self.inter_hop_latency
        }
    }

    /// The link parameters a flat ring over the whole world sees: the
    /// inter-node fabric as soon as more than one node participates.
    pub fn bottleneck(&self) -> (f64, f64) {
        if self.nodes > 1 {
            (self.effective_inter_bw(), self.effective_inter_hop())
        } else {
            (self.intra_node_bw, self.intra_hop_latency)
        }
    }

    /// Eight-GPU-per-node cluster with NVLink-class intra-node links and an
    /// RDMA-capable inter-node fabric.
    pub fn h200_like(nodes: usize) -> ClusterSpec {
        ClusterSpec {
            name: "h200-like".to_string(),
            nodes,
            gpus_per_node: 8,
            intra_node_bw: 400e9,
            inter_node_bw: 100e9,
            intra_hop_latency: 1e-6,
            inter_hop_latency: 50e-6,
            rdma: true,
            rdma_bw_multiplier: 1.5,
            rdma_hop_latency: 6e-6,
            congestion_without_rdma: true,
            collective_launch_overhead: 3e-4,
            gpu_memory_bytes: 141e9,
            hierarchical_allreduce: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_catches_bad_specs() {
        let mut c = ClusterSpec::h200_like(2);
        assert!(c.validate().is_ok());
        c.nodes = 0;
        assert!(c.validate().is_err());
        let mut c = ClusterSpec::h200_like(2);
        c.inter_node_bw = 0.0;
        assert!(c.validate().is_err());
        let mut c = ClusterSpec::h200_like(2);
        c.rdma_hop_latency = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rdma_and_congestion_shape_the_inter_link() {
        let mut c = ClusterSpec::h200_like(4);
        assert_eq!(c.effective_inter_bw(), 150e9);
        assert_eq!(c.effective_inter_hop(), 6e-6);

        c.rdma = false;
        // Congested host-mediated path: bandwidth / nodes, latency * nodes.
        assert_eq!(c.effective_inter_bw(), 25e9);
        assert_eq!(c.effective_inter_hop(), 200e-6);

        c.congestion_without_rdma = false;
        assert_eq!(c.effective_inter_bw(), 100e9);
        assert_eq!(c.effective_inter_hop(), 50e-6);
    }

    #[test]
    fn bottleneck_switches_on_node_count() {
        let c = ClusterSpec::h200_like(1);
        assert_eq!(c.bottleneck(), (400e9, 1e-6));
        let c = ClusterSpec::h200_like(2);
        assert_eq!(c.bottleneck(), (150e9, 6e-6));
        assert_eq!(c.world_size(), 16);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let c = ClusterSpec::h200_like(4);
        let s = serde_json::to_string(&c).unwrap();
        let back: ClusterSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(c, back);
    }
}
