//! Analytic operation counts per inference. One multiply-accumulate counts
//! as two FLOPs; normalisations, activations and softmax are ignored.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopConfig {
    pub antennas: usize,
    pub ris_elements: usize,
    pub users: usize,
    pub csi_d_model: usize,
    pub csi_layers: usize,
    pub vit_dim: usize,
    pub vit_layers: usize,
    pub vit_patches: usize,
    /// Values per patch vector (`P^2` times channels).
    pub vit_patch_values: usize,
    pub vit_mlp_hidden: Vec<usize>,
    pub agent_layers: usize,
    pub agent_hidden: usize,
}

impl Default for FlopConfig {
    /// The large-array reference configuration.
    fn default() -> Self {
        Self {
            antennas: 128,
            ris_elements: 100,
            users: 10,
            csi_d_model: 512,
            csi_layers: 6,
            vit_dim: 768,
            vit_layers: 12,
            vit_patches: 2025,
            vit_patch_values: 16 * 16 * 3,
            vit_mlp_hidden: vec![512, 256, 128],
            agent_layers: 3,
            agent_hidden: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopRow {
    pub component: String,
    pub gflops: f64,
    /// Published figure for the reference configuration.
    pub reference_gflops: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub rows: Vec<FlopRow>,
    /// CSI attention-score term alone (`2 L N^2 d` MACs times `K`), GFLOPs.
    pub csi_attention_gflops: f64,
    /// CSI count for a single UE, GFLOPs.
    pub csi_per_ue_gflops: f64,
    pub total_gflops: f64,
    pub reference_total_gflops: f64,
}

impl FlopReport {
    pub fn row(&self, component: &str) -> Option<&FlopRow> {
        self.rows.iter().find(|r| r.component == component)
    }

    pub const CSV_HEADER: &'static str = "component,gflops,reference_gflops";

    pub fn csv_rows(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .rows
            .iter()
            .map(|r| format!("{},{},{}", r.component, r.gflops, r.reference_gflops.map_or(String::new(), |v| v.to_string())))
            .collect();
        out.push(format!("total_per_frame,{},{}", self.total_gflops, self.reference_total_gflops));
        out
    }
}

/// MACs of a pre-norm encoder block over `t` tokens of width `d` with a
/// `4d` feed-forward layer.
fn encoder_macs(t: f64, d: f64) -> f64 {
    4.0 * t * d * d + 2.0 * t * t * d + 8.0 * t * d * d
}

fn mlp_macs(sizes: &[usize]) -> f64 {
    sizes.windows(2).map(|w| (w[0] * w[1]) as f64).sum()
}

pub fn flop_report(cfg: &FlopConfig) -> Result<FlopReport> {
    let (n, k) = (cfg.antennas as f64, cfg.users as f64);
    if cfg.antennas == 0 || cfg.users == 0 || cfg.csi_d_model == 0 || cfg.vit_dim == 0 || cfg.agent_hidden == 0 {
        return Err(invalid("flop config dimensions must be at least 1"));
    }
    let d = cfg.csi_d_model as f64;
    let l = cfg.csi_layers as f64;
    // embedding, encoder stack, 2N-wide head on the pooled vector
    let csi_ue = 3.0 * n * d + l * encoder_macs(n, d) + d * 2.0 * n;
    let csi = k * csi_ue;
    let csi_attention = k * l * 2.0 * n * n * d;

    let dv = cfg.vit_dim as f64;
    let t = cfg.vit_patches as f64 + 1.0;
    let mut head = vec![cfg.vit_dim];
    head.extend_from_slice(&cfg.vit_mlp_hidden);
    head.push(cfg.users);
    let vit = cfg.vit_patches as f64 * cfg.vit_patch_values as f64 * dv + cfg.vit_layers as f64 * encoder_macs(t, dv) + mlp_macs(&head);

    // actor: estimated-CSI input, hidden stack, precoder plus phase outputs
    let h = cfg.agent_hidden;
    let mut sizes = vec![2 * cfg.antennas * cfg.users + cfg.users];
    sizes.extend(std::iter::repeat(h).take(cfg.agent_layers.max(1)));
    sizes.push(2 * cfg.antennas * cfg.users + cfg.ris_elements);
    let agent = mlp_macs(&sizes);

    let g = |macs: f64| 2.0 * macs / 1e9;
    let rows = vec![
        FlopRow { component: "csi_transformer".into(), gflops: g(csi), reference_gflops: Some(0.12) },
        FlopRow { component: "vit_blockage_predictor".into(), gflops: g(vit), reference_gflops: Some(4.82) },
        FlopRow { component: "hdrl_agent".into(), gflops: g(agent), reference_gflops: Some(0.15) },
    ];
    let total = rows.iter().map(|r| r.gflops).sum();
    Ok(FlopReport {
        rows,
        csi_attention_gflops: g(csi_attention),
        csi_per_ue_gflops: g(csi_ue),
        total_gflops: total,
        reference_total_gflops: 5.09,
    })
}
