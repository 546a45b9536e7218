//! `tessera simulate`: scaling curves and the DDP/FSDP comparison as
//! plot-ready CSV. Bundled presets reproduce the headline phenomenology;
//! custom runs take a full cluster/model/strategy spec.

use std::path::{Path, PathBuf};

use tessera_sim::model::{vit_b_like, vit_g14_like, vit_g8_like};
use tessera_sim::{
    compare_ddp_fsdp, curve_to_csv, scaling_curve, simulate_step, ClusterSpec, CurvePoint, ModelProfile,
    StrategyConfig,
};
use tessera_core::{Error, Result};

use crate::config;

fn default_nodes() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Named(String),
    Inline(Box<ModelProfile>),
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct SimulateCmdConfig {
    /// fig2, fig3, or compare; overrides the custom fields below.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub cluster: Option<ClusterSpec>,
    /// vit_b | vit_g14 | vit_g8, or an inline profile object.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub strategy: Option<StrategyConfig>,
    #[serde(default = "default_nodes")]
    pub node_counts: Vec<usize>,
}

impl Default for SimulateCmdConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(clap::Args)]
pub struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// fig2, fig3, or compare.
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated node counts for custom sweeps.
    #[arg(long, value_delimiter = ',')]
    nodes: Option<Vec<usize>>,
}

fn resolve_model(spec: &ModelSpec) -> Result<ModelProfile> {
    match spec {
        ModelSpec::Inline(p) => Ok((**p).clone()),
        ModelSpec::Named(name) => match name.as_str() {
            "vit_b" => Ok(vit_b_like()),
            "vit_g14" => Ok(vit_g14_like()),
            "vit_g8" => Ok(vit_g8_like()),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (expected vit_b, vit_g14, vit_g8, or an inline profile)"
            ))),
        },
    }
}

fn write_curve(out: &Path, name: &str, points: &[CurvePoint]) -> Result<()> {
    let path = out.join(name);
    std::fs::write(&path, curve_to_csv(points))?;
    let last = points.last().expect("nonempty curve");
    println!(
        "{name}: {} nodes -> throughput {:.0} img/s, efficiency {:.3}",
        last.nodes, last.throughput, last.efficiency
    );
    Ok(())
}

fn run_fig2(out: &Path, nodes: &[usize]) -> Result<()> {
    let rdma = ClusterSpec::h200_like(1);
    let mut no_rdma = rdma.clone();
    no_rdma.rdma = false;
    let untuned = StrategyConfig::ddp_default();
    write_curve(out, "fig2_vit_b.csv", &scaling_curve(&rdma, &vit_b_like(), &untuned, nodes)?)?;
    write_curve(
        out,
        "fig2_vit_g_untuned.csv",
        &scaling_curve(&no_rdma, &vit_g14_like(), &untuned, nodes)?,
    )?;
    let g8 = simulate_step(&rdma, &vit_g8_like(), &StrategyConfig::ddp_tuned())?;
    let g14 = simulate_step(&rdma, &vit_g14_like(), &StrategyConfig::ddp_tuned())?;
    println!(
        "single-node step times: vit_g8 {:.3} s vs vit_g14 {:.3} s (ratio {:.2})",
        g8.step_time,
        g14.step_time,
        g8.step_time / g14.step_time
    );
    Ok(())
}

fn run_fig3(out: &Path, nodes: &[usize]) -> Result<()> {
    let cluster = ClusterSpec::h200_like(1);
    let m = vit_g14_like();
    write_curve(
        out,
        "fig3_untuned.csv",
        &scaling_curve(&cluster, &m, &StrategyConfig::ddp_default(), nodes)?,
    )?;
    write_curve(
        out,
        "fig3_tuned.csv",
        &scaling_curve(&cluster, &m, &StrategyConfig::ddp_tuned(), nodes)?,
    )?;
    Ok(())
}

fn run_compare(out: &Path) -> Result<()> {
    let report = compare_ddp_fsdp(&ClusterSpec::h200_like(4), &vit_g14_like())?;
    std::fs::write(
        out.join("compare.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    println!(
        "tuned DDP {:.0} img/s vs FSDP {:.0} img/s: ratio {:.2}",
        report.ddp.images_per_second, report.fsdp.images_per_second, report.throughput_ratio
    );
    println!(
        "memory per GPU: DDP {:.1} GB, FSDP {:.1} GB",
        report.ddp_memory_bytes / 1e9,
        report.fsdp_memory_bytes / 1e9
    );
    Ok(())
}

pub fn run(args: SimulateArgs) -> Result<()> {
    let mut cfg: SimulateCmdConfig = config::load_config(args.config.as_deref())?;
    if let Some(v) = args.preset {
        cfg.preset = Some(v);
    }
    if let Some(v) = args.nodes {
        cfg.node_counts = v;
    }
    let out = config::out_dir(args.out);
    config::echo_config(&out, "simulate-config.json", &cfg)?;

    match cfg.preset.as_deref() {
        Some("fig2") => run_fig2(&out, &cfg.node_counts),
        Some("fig3") => run_fig3(&out, &cfg.node_counts),
        Some("compare") => run_compare(&out),
        Some(other) => Err(Error::Config(format!(
            "unknown preset '{other}' (expected fig2, fig3, or compare)"
        ))),
        None => {
            let cluster = cfg
                .cluster
                .as_ref()
                .ok_or_else(|| Error::Config("custom simulate needs a 'cluster' spec".to_string()))?;
            let model = resolve_model(
                cfg.model
                    .as_ref()
                    .ok_or_else(|| Error::Config("custom simulate needs a 'model' spec".to_string()))?,
            )?;
            let strategy = cfg
                .strategy
                .as_ref()
                .ok_or_else(|| Error::Config("custom simulate needs a 'strategy' spec".to_string()))?;
            let curve = scaling_curve(cluster, &model, strategy, &cfg.node_counts)?;
            write_curve(&out, "scaling.csv", &curve)
        }
    }
}
