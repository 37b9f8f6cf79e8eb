//! ReLU networks whose hidden layers may be mixture-of-experts layers.

use super::layer::{
    accumulate_expert_loss, moe_backward, moe_forward, select_losing_expert, split_expert, ExpertLossStats, Gating,
    MoeCache, MoeLayer, Phase,
};
use crate::error::{input_err, Result};
use crate::metrics::{LayerDesc, NetDesc};
use crate::numkit::layers::{affine_backward, affine_forward, relu_backward_inplace, relu_inplace};
use crate::numkit::mlp::{bias_name, init_affine, layer_seed, weight_name};
use crate::numkit::{softmax_xent, softmax_xent_per_example, Matrix, MlpConfig, ParamSet, SeedStream};
use crate::stream::ValSet;

/// Rows evaluated per forward pass when scanning a large set.
pub const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub enum NetLayer {
    Dense { index: usize, d_in: usize, d_out: usize },
    Moe(MoeLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeNet {
    cfg: MlpConfig,
    layers: Vec<NetLayer>,
}

enum LayerCache {
    Dense { input: Matrix, output: Matrix },
    Moe(MoeCache),
}

pub struct NetCache {
    layers: Vec<LayerCache>,
}

impl NetCache {
    /// Routing caches of the MoE layers, in layer order.
    pub fn moe_caches(&self) -> impl Iterator<Item = &MoeCache> {
        self.layers.iter().filter_map(|c| match c {
            LayerCache::Moe(m) => Some(m),
            LayerCache::Dense { .. } => None,
        })
    }
}

/// Name of the MoE layer replacing affine layer `l`.
pub fn moe_layer_name(l: usize) -> String {
    format!("l{l}")
}

impl MoeNet {
    /// The MLP described by `cfg` with the hidden layers listed in
    /// `moe_layers` replaced by single-expert MoE layers.
    pub fn new(cfg: &MlpConfig, moe_layers: &[usize], gating: Gating) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden_dims.len();
        if let Some(&bad) = moe_layers.iter().find(|&&l| l >= hidden) {
            return Err(input_err!("MoE layer {bad} is not one of the {hidden} hidden layers"));
        }
        let layers = cfg
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(index, (d_in, d_out))| {
                if moe_layers.contains(&index) {
                    NetLayer::Moe(MoeLayer::new(moe_layer_name(index), d_in, d_out, gating))
                } else {
                    NetLayer::Dense { index, d_in, d_out }
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn from_layers(cfg: &MlpConfig, layers: Vec<NetLayer>) -> Self {
        Self {
            cfg: cfg.clone(),
            layers,
        }
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[NetLayer] {
        &self.layers
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.layers.iter().filter_map(|l| match l {
            NetLayer::Moe(m) => Some(m),
            NetLayer::Dense { .. } => None,
        })
    }

    /// Expert 0 of each MoE layer draws from the same substream as the
    /// dense layer it replaces, so an ungrown net equals the plain MLP.
    pub fn init_params(&self) -> Result<ParamSet> {
        let mut params = ParamSet::new();
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                NetLayer::Dense { d_in, d_out, .. } => {
                    let (w, b) = init_affine(layer_seed(self.cfg.seed, l), *d_in, *d_out);
                    params.insert(weight_name(l), w)?;
                    params.insert(bias_name(l), b)?;
                }
                NetLayer::Moe(m) => m.init_params(layer_seed(self.cfg.seed, l), &mut params)?,
            }
        }
        Ok(params)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                NetLayer::Dense { d_in, d_out, .. } => d_in * d_out + d_out,
                NetLayer::Moe(m) => m.param_count(),
            })
            .sum()
    }

    pub fn desc(&self) -> NetDesc {
        NetDesc {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    NetLayer::Dense { d_in, d_out, .. } => LayerDesc::Dense {
                        d_in: *d_in,
                        d_out: *d_out,
                    },
                    NetLayer::Moe(m) => m.desc(),
                })
                .collect(),
        }
    }

    /// Logits plus the cache needed for a backward pass. `routing` seeds
    /// hard-gating draws during training; each MoE layer uses its own
    /// substream of it.
    pub fn forward(
        &self,
        params: &ParamSet,
        x: &Matrix,
        phase: Phase,
        routing: Option<SeedStream>,
    ) -> Result<(Matrix, NetCache)> {
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                NetLayer::Dense { index, .. } => {
                    let mut z = affine_forward(&h, params.get(&weight_name(*index))?, params.get(&bias_name(*index))?)?;
                    if l < last {
                        relu_inplace(&mut z);
                    }
                    caches.push(LayerCache::Dense {
                        input: h,
                        output: z.clone(),
                    });
                    h = z;
                }
                NetLayer::Moe(m) => {
                    let mut rng = routing.map(|s| s.split(l as u64).rng());
                    let (z, cache) = moe_forward(m, params, &h, phase, rng.as_mut())?;
                    caches.push(LayerCache::Moe(cache));
                    h = z;
                }
            }
        }
        Ok((h, NetCache { layers: caches }))
    }

    /// Evaluation-mode logits, computed in chunks.
    pub fn logits(&self, params: &ParamSet, x: &Matrix) -> Result<Matrix> {
        let mut data = Vec::with_capacity(x.rows() * self.cfg.num_classes);
        for start in (0..x.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(x.rows());
            let (logits, _) = self.forward(params, &x.slice_rows(start, end), Phase::Eval, None)?;
            data.extend_from_slice(logits.data());
        }
        Matrix::new(x.rows(), self.cfg.num_classes, data)
    }

    /// Mean cross-entropy, logits and gradients of a training step.
    pub fn forward_backward(
        &self,
        params: &ParamSet,
        x: &Matrix,
        labels: &[usize],
        routing: Option<SeedStream>,
    ) -> Result<(f64, Matrix, ParamSet)> {
        let (logits, cache) = self.forward(params, x, Phase::Train, routing)?;
        let (loss, dlogits) = softmax_xent(&logits, labels)?;
        let grads = self.backward(params, &cache, dlogits)?;
        Ok((loss, logits, grads))
    }

    /// Parameter gradients given the gradient at the logits.
    pub fn backward(&self, params: &ParamSet, cache: &NetCache, dlogits: Matrix) -> Result<ParamSet> {
        let last = self.layers.len() - 1;
        let mut grads = params.zeros_like();
        let mut grad = dlogits;
        for (l, (layer, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let dx = match (layer, c) {
                (NetLayer::Dense { index, .. }, LayerCache::Dense { input, output }) => {
                    if l < last {
                        relu_backward_inplace(output, &mut grad);
                    }
                    let g = affine_backward(input, params.get(&weight_name(*index))?, &grad, l > 0)?;
                    grads.get_mut(&weight_name(*index))?.data_mut().copy_from_slice(&g.dw);
                    grads.get_mut(&bias_name(*index))?.data_mut().copy_from_slice(&g.db);
                    g.dx
                }
                (NetLayer::Moe(m), LayerCache::Moe(mc)) => moe_backward(m, params, mc, &grad, &mut grads, l > 0)?,
                _ => unreachable!("cache built from the same layer list"),
            };
            match dx {
                Some(dx) => grad = dx,
                None => break,
            }
        }
        Ok(grads)
    }
}

/// What one MoE layer did during a growth step.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthRecord {
    pub layer: String,
    pub split: usize,
    pub new_expert: usize,
    pub stats: ExpertLossStats,
}

/// Runs `val` through the net, credits each example's loss to the expert
/// it was routed to in every MoE layer, then splits each layer's losing
/// expert. New gates draw from `seed`, one substream per layer.
pub fn grow_step(net: &mut MoeNet, params: &mut ParamSet, val: &ValSet<'_>, seed: SeedStream) -> Result<Vec<GrowthRecord>> {
    if val.is_empty() {
        return Err(input_err!("growth needs a non-empty validation set"));
    }
    let k_per_layer: Vec<usize> = net.moe_layers().map(MoeLayer::num_experts).collect();
    if k_per_layer.is_empty() {
        return Err(input_err!("network has no MoE layer to grow"));
    }
    let mut stats: Vec<ExpertLossStats> = k_per_layer.iter().map(|&k| ExpertLossStats::new(k)).collect();
    let positions: Vec<usize> = (0..val.len()).collect();
    for chunk in positions.chunks(EVAL_CHUNK) {
        let (x, y) = val.batch(chunk);
        let (logits, cache) = net.forward(params, &x, Phase::Eval, None)?;
        let losses = softmax_xent_per_example(&logits, &y)?;
        for (s, mc) in stats.iter_mut().zip(cache.moe_caches()) {
            accumulate_expert_loss(s, mc.record(), &losses)?;
        }
    }
    let mut out = Vec::with_capacity(stats.len());
    let mut stats = stats.into_iter();
    for (l, layer) in net.layers.iter_mut().enumerate() {
        let NetLayer::Moe(m) = layer else { continue };
        let s = stats.next().expect("one entry per MoE layer");
        let losing = select_losing_expert(&s)?;
        let new_expert = split_expert(m, params, losing, seed.split(l as u64))?;
        out.push(GrowthRecord {
            layer: m.name().to_owned(),
            split: losing,
            new_expert,
            stats: s,
        });
    }
    Ok(out)
}
