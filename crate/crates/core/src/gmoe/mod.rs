//! Growing tree-gated mixtures of experts.
//!
//! A layer starts as a single expert. Growth replaces the expert with the
//! largest validation loss by a 2-way gate over two copies of it, which
//! leaves the layer's function unchanged.

mod layer;
mod net;
pub mod tree;

pub use layer::{
    accumulate_expert_loss, expert_bias, expert_weight, gate_bias, gate_probs, gate_weight, moe_backward, moe_forward,
    select_losing_expert, split_expert, ExpertLossStats, Gating, MoeCache, MoeLayer, Phase, RoutingRecord,
};
pub use net::{grow_step, moe_layer_name, GrowthRecord, MoeNet, NetCache, NetLayer, EVAL_CHUNK};
pub use tree::{GateNode, GateTree, PreorderRecord};
