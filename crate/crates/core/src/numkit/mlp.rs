//! Fully connected ReLU networks ending in a linear logit layer.

use serde::{Deserialize, Serialize};

use super::layers::{affine_backward, affine_forward, relu_backward_inplace, relu_inplace};
use super::loss::softmax_xent;
use super::matrix::Matrix;
use super::params::{ParamSet, Tensor};
use super::rng::{glorot_uniform, SeedStream};
use crate::error::{input_err, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl MlpConfig {
    /// Two hidden layers of equal width.
    pub fn two_layer(input_dim: usize, width: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![width, width],
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(input_err!("all MLP dimensions must be at least 1: {self:?}"));
        }
        Ok(())
    }

    /// `(d_in, d_out)` for each affine layer, logits last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.num_classes)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

pub fn weight_name(layer: usize) -> String {
    format!("l{layer}.w")
}

pub fn bias_name(layer: usize) -> String {
    format!("l{layer}.b")
}

/// Glorot-uniform weights drawn from the layer's own substream, zero biases.
pub fn init_affine(seed: SeedStream, d_in: usize, d_out: usize) -> (Tensor, Tensor) {
    let mut rng = seed.rng();
    let w = glorot_uniform(&mut rng, d_in, d_out, d_in * d_out);
    (
        Tensor::new(vec![d_in, d_out], w).expect("sized by construction"),
        Tensor::zeros(vec![d_out]),
    )
}

/// Substream used to initialise affine layer `layer` of a network seeded `seed`.
pub fn layer_seed(seed: u64, layer: usize) -> SeedStream {
    SeedStream::new(seed).split(layer as u64)
}

pub fn init_mlp(cfg: &MlpConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    for (l, (d_in, d_out)) in cfg.layer_dims().into_iter().enumerate() {
        let (w, b) = init_affine(layer_seed(cfg.seed, l), d_in, d_out);
        params.insert(weight_name(l), w)?;
        params.insert(bias_name(l), b)?;
    }
    Ok(params)
}

/// Logits for a batch.
pub fn mlp_forward(cfg: &MlpConfig, params: &ParamSet, x: &Matrix) -> Result<Matrix> {
    let layers = cfg.layer_dims().len();
    let mut h = x.clone();
    for l in 0..layers {
        h = affine_forward(&h, params.get(&weight_name(l))?, params.get(&bias_name(l))?)?;
        if l + 1 < layers {
            relu_inplace(&mut h);
        }
    }
    Ok(h)
}

/// Mean cross-entropy, logits and parameter gradients.
pub fn mlp_forward_backward(
    cfg: &MlpConfig,
    params: &ParamSet,
    x: &Matrix,
    labels: &[usize],
) -> Result<(f64, Matrix, ParamSet)> {
    let layers = cfg.layer_dims().len();
    // acts[l] is the input of affine layer l
    let mut acts = Vec::with_capacity(layers);
    let mut h = x.clone();
    for l in 0..layers {
        let z = affine_forward(&h, params.get(&weight_name(l))?, params.get(&bias_name(l))?)?;
        acts.push(h);
        h = z;
        if l + 1 < layers {
            relu_inplace(&mut h);
        }
    }
    let logits = h;
    let (loss, mut grad) = softmax_xent(&logits, labels)?;

    let mut grads = params.zeros_like();
    for l in (0..layers).rev() {
        let w = params.get(&weight_name(l))?;
        let g = affine_backward(&acts[l], w, &grad, l > 0)?;
        grads.get_mut(&weight_name(l))?.data_mut().copy_from_slice(&g.dw);
        grads.get_mut(&bias_name(l))?.data_mut().copy_from_slice(&g.db);
        if let Some(mut dx) = g.dx {
            relu_backward_inplace(&acts[l], &mut dx);
            grad = dx;
        }
    }
    Ok((loss, logits, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::gradcheck::finite_diff_check;
    use crate::numkit::loss::softmax_xent as xent;

    fn toy_batch(n: usize, d: usize, c: usize) -> (Matrix, Vec<usize>) {
        let data = (0..n * d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let labels = (0..n).map(|i| (i * 3 + 1) % c).collect();
        (Matrix::new(n, d, data).unwrap(), labels)
    }

    #[test]
    fn zero_weights_give_uniform_prediction() {
        let cfg = MlpConfig::two_layer(5, 4, 7, 0);
        let params = init_mlp(&cfg).unwrap();
        let zero = params.zeros_like();
        let (x, y) = toy_batch(6, 5, 7);
        let (loss, logits, _) = mlp_forward_backward(&cfg, &zero, &x, &y).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_is_plain_softmax_regression() {
        let cfg = MlpConfig {
            input_dim: 3,
            hidden_dims: vec![],
            num_classes: 4,
            seed: 9,
        };
        let params = init_mlp(&cfg).unwrap();
        let (x, y) = toy_batch(5, 3, 4);
        let (loss, logits, grads) = mlp_forward_backward(&cfg, &params, &x, &y).unwrap();
        let (loss2, dlogits) = xent(&logits, &y).unwrap();
        assert_eq!(loss, loss2);
        // dW = x^T dlogits, db = column sums
        for p in 0..3 {
            for j in 0..4 {
                let naive: f64 = (0..5).map(|i| x.get(i, p) * dlogits.get(i, j)).sum();
                assert!((grads.get("l0.w").unwrap().data()[p * 4 + j] - naive).abs() < 1e-14);
            }
        }
        for j in 0..4 {
            let naive: f64 = (0..5).map(|i| dlogits.get(i, j)).sum();
            assert!((grads.get("l0.b").unwrap().data()[j] - naive).abs() < 1e-14);
        }
    }

    #[test]
    fn two_hidden_layer_gradients_match_finite_differences() {
        // 3 -> 4 -> 3 -> 2: 16 + 15 + 8 = 39 params; plus bias perturbation.
        let cfg = MlpConfig {
            input_dim: 3,
            hidden_dims: vec![4, 3],
            num_classes: 2,
            seed: 5,
        };
        let mut params = init_mlp(&cfg).unwrap();
        // non-zero biases so ReLU kinks are away from the sampled points
        for (name, t) in params.iter_mut() {
            if name.ends_with(".b") {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.1 + 0.05 * i as f64;
                }
            }
        }
        assert!(cfg.param_count() <= 50);
        let (x, y) = toy_batch(6, 3, 2);
        let report = finite_diff_check(
            |p| {
                let (l, _, g) = mlp_forward_backward(&cfg, p, &x, &y).unwrap();
                (l, g)
            },
            &params,
            1e-5,
        );
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = MlpConfig::two_layer(8, 6, 3, 11);
        assert!(init_mlp(&cfg).unwrap().bit_eq(&init_mlp(&cfg).unwrap()));
        let other = MlpConfig { seed: 12, ..cfg.clone() };
        assert!(!init_mlp(&cfg).unwrap().bit_eq(&init_mlp(&other).unwrap()));
        assert_eq!(init_mlp(&cfg).unwrap().param_count(), cfg.param_count());
    }
}
