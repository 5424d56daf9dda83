use serde::Serialize;

use crate::error::Result;
use crate::model::NetworkConfig;
use crate::sparsify::TARGET_DENSITIES;

/// FLOPs per band-rate step of one network component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityItem {
    pub name: &'static str,
    pub flops_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Complexity {
    pub band_rate: f64,
    pub items: Vec<ComplexityItem>,
}

impl Complexity {
    pub fn flops_per_step(&self) -> f64 {
        self.items.iter().map(|i| i.flops_per_step).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.flops_per_step() * self.band_rate * 1e-9
    }

    pub fn item(&self, name: &str) -> Option<f64> {
        self.items.iter().find(|i| i.name == name).map(|i| i.flops_per_step)
    }
}

/// Operation count of the synthesis network, two FLOPs per multiply-add.
///
/// Work done once per conditioning frame (segmental conv, conditioning
/// projections into the GRUs) is divided by the steps per frame. Embedding
/// inputs are precomputed tables, so they cost one add per gate row.
/// `densities` are the update/reset/new densities of the sparse recurrent
/// matrix.
pub fn complexity(cfg: &NetworkConfig, densities: [f64; 3]) -> Result<Complexity> {
    cfg.validate()?;
    let spf = cfg.steps_per_frame() as f64;
    let (s, d) = (cfg.sparse_units as f64, cfg.dense_units as f64);
    let (m, k, l) = (cfg.bands as f64, cfg.lp_order as f64, cfg.logit_latent as f64);
    let (pc, hr, b) = (
        cfg.cond_proj as f64,
        cfg.residual_hidden as f64,
        cfg.head_bins as f64,
    );
    let wd = cfg.segconv_dim() as f64;
    let head_out = cfg.head_output() as f64;
    let items = vec![
        ("conditioning", 2.0 * (wd * wd + wd * pc) / spf),
        ("sparse_gru.recurrent", 2.0 * s * s * densities.iter().sum::<f64>()),
        ("sparse_gru.conditioning", 2.0 * 3.0 * s * pc / spf),
        ("sparse_gru.embeddings", 3.0 * s * 2.0 * m),
        ("dense_gru.sparse_input", 2.0 * 2.0 * 3.0 * d * s),
        ("dense_gru.recurrent", 2.0 * 2.0 * 3.0 * d * d),
        ("dense_gru.conditioning", 2.0 * 2.0 * 3.0 * d * pc / spf),
        ("dense_gru.embeddings", 3.0 * d * m),
        ("dual_fc", 2.0 * 2.0 * 2.0 * head_out * d),
        ("residual_fc", 2.0 * m * 2.0 * (l * hr + hr * b)),
        ("lp_combine", 2.0 * m * 2.0 * k),
    ];
    Ok(Complexity {
        band_rate: cfg.band_rate(),
        items: items
            .into_iter()
            .map(|(name, flops_per_step)| ComplexityItem { name, flops_per_step })
            .collect(),
    })
}

pub fn complexity_gflops(cfg: &NetworkConfig) -> Result<f64> {
    Ok(complexity(cfg, TARGET_DENSITIES)?.gflops())
}
