//! FLOP cost model. A multiply-accumulate counts as two flops.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostPhase {
    Inference,
    /// Forward pass plus the two backward products.
    Training,
}

/// `2·n·d_in·d_out` for inference, three times that for a training step.
pub fn flops_affine(n: usize, d_in: usize, d_out: usize, phase: CostPhase) -> f64 {
    let forward = 2.0 * n as f64 * d_in as f64 * d_out as f64;
    match phase {
        CostPhase::Inference => forward,
        CostPhase::Training => 3.0 * forward,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerDesc {
    Dense { d_in: usize, d_out: usize },
    /// Tree-gated experts of shape `d_in → d_out`; `experts − 1` gates.
    Moe {
        d_in: usize,
        d_out: usize,
        experts: usize,
        hard: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetDesc {
    pub layers: Vec<LayerDesc>,
}

/// Every component that runs on an input. Ensembles list each member.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDesc {
    pub components: Vec<NetDesc>,
}

/// Cost of one layer split into gating and expert (or dense) work.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerCost {
    pub gate: f64,
    pub expert: f64,
}

impl LayerCost {
    pub fn total(&self) -> f64 {
        self.gate + self.expert
    }
}

/// Soft layers pay for every expert; hard layers for exactly one. Both pay
/// for every gate in the tree whatever path an example takes.
pub fn flops_layer(layer: &LayerDesc, n: usize, phase: CostPhase) -> LayerCost {
    match *layer {
        LayerDesc::Dense { d_in, d_out } => LayerCost {
            gate: 0.0,
            expert: flops_affine(n, d_in, d_out, phase),
        },
        LayerDesc::Moe {
            d_in,
            d_out,
            experts,
            hard,
        } => {
            let active = if hard { 1 } else { experts };
            LayerCost {
                gate: experts.saturating_sub(1) as f64 * flops_affine(n, d_in, 2, phase),
                expert: active as f64 * flops_affine(n, d_in, d_out, phase),
            }
        }
    }
}

pub fn flops_model(desc: &ModelDesc, n: usize, phase: CostPhase) -> f64 {
    let mut acc = 0.0;
    for net in &desc.components {
        for layer in &net.layers {
            acc += flops_layer(layer, n, phase).total();
        }
    }
    acc
}

/// Reads a model description from JSON; unknown layer kinds are rejected.
pub fn parse_model_desc(json: &str) -> Result<ModelDesc> {
    serde_json::from_str(json).map_err(|e| input_err!("bad model description: {e}"))
}
