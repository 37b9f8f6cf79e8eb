use crate::error::{input_err, Error, Result};
use crate::gmoe::{Gating, MoeNet};
use crate::metrics::{flops_model, CostPhase, ModelDesc};
use crate::numkit::{softmax_xent, MlpConfig, OptState, OptimizerConfig, ParamSet, SeedStream};
use crate::stream::{minibatches, TrainSet, ValSet};

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// One network with its parameters and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub seed: u64,
    pub net: MoeNet,
    pub params: ParamSet,
    pub opt: OptState,
    pub frozen: bool,
    /// Training rounds completed; keys the shuffle and routing streams.
    pub rounds: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub flops_used: f64,
    pub wall_ms: f64,
    /// Training examples pushed through forward/backward, summed over
    /// epochs and components.
    pub examples: u64,
}

impl TrainReport {
    /// Folds in the report of a component trained in the same stage.
    pub(crate) fn absorb(&mut self, other: &TrainReport) {
        self.epochs_run = self.epochs_run.max(other.epochs_run);
        self.flops_used += other.flops_used;
        self.examples += other.examples;
    }
}

/// Settings shared by every component trained in one stage.
#[derive(Clone, Copy)]
pub(crate) struct TrainSpec<'a> {
    pub epochs: usize,
    pub minibatch: usize,
    pub optimizer: OptimizerConfig,
    pub routing_seed: u64,
    pub patience: Option<usize>,
    pub val: Option<&'a ValSet<'a>>,
}

#[cfg(not(target_arch = "wasm32"))]
pub(crate) fn stopwatch() -> impl Fn() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64() * 1e3
}

#[cfg(target_arch = "wasm32")]
pub(crate) fn stopwatch() -> impl Fn() -> f64 {
    || 0.0
}

pub(crate) fn shuffle_stream(seed: u64, round: u64) -> SeedStream {
    SeedStream::new(seed).split(SHUFFLE_STREAM).split(round)
}

impl Component {
    pub fn new(cfg: &MlpConfig, moe_layers: &[usize], gating: Gating, optimizer: &OptimizerConfig) -> Result<Self> {
        let net = MoeNet::new(cfg, moe_layers, gating)?;
        let params = net.init_params()?;
        Ok(Self {
            seed: cfg.seed,
            net,
            params,
            opt: optimizer.new_state(),
            frozen: false,
            rounds: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn model_desc(&self) -> ModelDesc {
        ModelDesc {
            components: vec![self.net.desc()],
        }
    }

    fn is_hard(&self) -> bool {
        self.net.moe_layers().any(|m| m.gating() == Gating::Hard)
    }

    pub(crate) fn check_data(&self, data: &crate::stream::Dataset) -> Result<()> {
        let cfg = self.net.config();
        if data.dim() != cfg.input_dim || data.num_classes() != cfg.num_classes {
            return Err(input_err!(
                "data has D={} C={}, learner expects D={} C={}",
                data.dim(),
                data.num_classes(),
                cfg.input_dim,
                cfg.num_classes
            ));
        }
        Ok(())
    }

    /// Mean validation cross-entropy.
    pub(crate) fn val_loss(&self, val: &ValSet<'_>) -> Result<f64> {
        let (x, y) = val.materialize();
        let logits = self.net.logits(&self.params, &x)?;
        Ok(softmax_xent(&logits, &y)?.0)
    }

    /// Runs `spec.epochs` passes of mini-batch training over `train`.
    pub(crate) fn train(&mut self, train: &TrainSet<'_>, spec: &TrainSpec<'_>) -> Result<TrainReport> {
        if self.frozen {
            return Err(Error::State("frozen component passed to training".into()));
        }
        self.check_data(train.dataset())?;
        let elapsed = stopwatch();
        let mut report = TrainReport::default();
        if spec.epochs == 0 {
            return Ok(report);
        }
        let n = train.len();
        if n == 0 {
            return Err(input_err!("empty training set"));
        }
        let desc = self.model_desc();
        let epoch_flops = flops_model(&desc, n, CostPhase::Training);
        let shuffle = shuffle_stream(self.seed, self.rounds);
        let hard = self.is_hard();
        let val = spec.val.filter(|v| !v.is_empty());
        let (mut best, mut since_best) = (f64::INFINITY, 0);
        for epoch in 0..spec.epochs {
            let mut total = 0.0;
            for (b, pos) in minibatches(n, spec.minibatch, shuffle.split(epoch as u64))?.iter().enumerate() {
                let (x, y) = train.batch(pos);
                let routing = hard.then(|| {
                    SeedStream::new(spec.routing_seed)
                        .split(self.seed)
                        .split(self.rounds)
                        .split(epoch as u64)
                        .split(b as u64)
                });
                let (loss, _, grads) = self.net.forward_backward(&self.params, &x, &y, routing)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("training loss {loss} at epoch {epoch}, batch {b}")));
                }
                spec.optimizer.step(&mut self.params, &grads, &mut self.opt)?;
                total += loss * pos.len() as f64;
            }
            report.epochs_run += 1;
            report.final_train_loss = total / n as f64;
            report.flops_used += epoch_flops;
            report.examples += n as u64;
            if let (Some(patience), Some(val)) = (spec.patience, val) {
                let v = self.val_loss(val)?;
                report.flops_used += flops_model(&desc, val.len(), CostPhase::Inference);
                if v < best {
                    best = v;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= patience {
                        break;
                    }
                }
            }
        }
        self.rounds += 1;
        report.wall_ms = elapsed();
        Ok(report)
    }
}
