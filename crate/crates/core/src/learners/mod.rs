//! Learners: single model (SM), ensemble (Ens), uniform logit mixture
//! (UMix), growing ensemble (gEns) and growing mixture of experts (gMoE).
//!
//! Every learner is a list of [`Component`]s. Fixed-architecture learners
//! warm-start from their previous parameters and optimizer state at each
//! training event unless `from_scratch` is set.

mod component;

use serde::{Deserialize, Serialize};

pub use component::{Component, TrainReport};

use component::{shuffle_stream, stopwatch, TrainSpec};

use crate::error::{state_err, Error, Result};
use crate::gmoe::{grow_step, Gating, GrowthRecord, Phase};
use crate::metrics::{flops_model, CostPhase, ModelDesc};
use crate::numkit::{softmax_rows, softmax_xent, Matrix, MlpConfig, OptimizerConfig, ParamSet, SeedStream};
use crate::stream::{minibatches, TrainSet, ValSet};

const GROW_STREAM: u64 = 0x4752_4f57;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Sm,
    Ens,
    Umix,
    Gens,
    Gmoe,
}

impl LearnerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::Sm => "sm",
            LearnerKind::Ens => "ens",
            LearnerKind::Umix => "umix",
            LearnerKind::Gens => "gens",
            LearnerKind::Gmoe => "gmoe",
        }
    }

    pub fn is_growing(self) -> bool {
        matches!(self, LearnerKind::Gens | LearnerKind::Gmoe)
    }
}

/// When a gMoE grows relative to training at an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowOrder {
    #[default]
    Before,
    After,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    /// Architecture of every component; `mlp.seed` is the base seed.
    pub mlp: MlpConfig,
    /// Members of an Ens or UMix.
    pub components: usize,
    /// Components added per gEns stage.
    pub grow_k: usize,
    pub moe_layers: Vec<usize>,
    pub gating: Gating,
    /// gMoE only: split experts at each event.
    pub grow: bool,
    pub grow_order: GrowOrder,
    pub optimizer: OptimizerConfig,
    pub minibatch_size: usize,
    pub from_scratch: bool,
    pub patience: Option<usize>,
    pub routing_seed: u64,
}

impl LearnerConfig {
    pub fn new(kind: LearnerKind, mlp: MlpConfig) -> Self {
        Self {
            kind,
            mlp,
            components: 5,
            grow_k: 1,
            moe_layers: vec![0, 1],
            gating: Gating::Soft,
            grow: kind.is_growing(),
            grow_order: GrowOrder::Before,
            optimizer: OptimizerConfig::default(),
            minibatch_size: 128,
            from_scratch: false,
            patience: None,
            routing_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.mlp.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be at least 1".into());
        }
        match self.kind {
            LearnerKind::Ens | LearnerKind::Umix if self.components == 0 => {
                return bad("an ensemble needs at least one component".into())
            }
            LearnerKind::Gens if self.grow_k == 0 => return bad("grow_k must be at least 1".into()),
            LearnerKind::Gens if !self.grow => return bad("gens always grows; grow=false is not meaningful".into()),
            LearnerKind::Gmoe => {
                let hidden = self.mlp.hidden_dims.len();
                if self.moe_layers.is_empty() {
                    return bad("gmoe needs at least one MoE layer".into());
                }
                if let Some(l) = self.moe_layers.iter().find(|&&l| l >= hidden) {
                    return bad(format!("moe layer {l} is not one of the {hidden} hidden layers"));
                }
            }
            _ => {}
        }
        if self.grow && !self.kind.is_growing() {
            return bad(format!("{} does not grow", self.kind.as_str()));
        }
        if self.from_scratch && self.kind.is_growing() {
            return bad(format!("from_scratch is not supported for {}", self.kind.as_str()));
        }
        if let OptimizerConfig::Adadelta { rho, eps } = self.optimizer {
            if !(0.0 < rho && rho < 1.0 && eps > 0.0) {
                return bad(format!("adadelta needs 0 < rho < 1 and eps > 0, got {rho}, {eps}"));
            }
        }
        Ok(())
    }

    /// Seed of component `i`.
    pub fn component_seed(&self, i: usize) -> u64 {
        self.mlp.seed.wrapping_add(i as u64)
    }

    fn component(&self, i: usize) -> Result<Component> {
        let cfg = MlpConfig {
            seed: self.component_seed(i),
            ..self.mlp.clone()
        };
        let moe: &[usize] = if self.kind == LearnerKind::Gmoe { &self.moe_layers } else { &[] };
        Component::new(&cfg, moe, self.gating, &self.optimizer)
    }

    fn spec<'a>(&self, epochs: usize, val: Option<&'a ValSet<'a>>) -> TrainSpec<'a> {
        TrainSpec {
            epochs,
            minibatch: self.minibatch_size,
            optimizer: self.optimizer,
            routing_seed: self.routing_seed,
            patience: self.patience,
            val,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerHandle {
    pub config: LearnerConfig,
    pub components: Vec<Component>,
    /// gMoE growth steps taken so far.
    pub growths: u64,
}

impl LearnerHandle {
    pub fn new(config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        let n = match config.kind {
            LearnerKind::Sm | LearnerKind::Gmoe => 1,
            LearnerKind::Ens | LearnerKind::Umix => config.components,
            LearnerKind::Gens => 0,
        };
        let components = (0..n).map(|i| config.component(i)).collect::<Result<_>>()?;
        Ok(Self {
            config,
            components,
            growths: 0,
        })
    }

    pub fn kind(&self) -> LearnerKind {
        self.config.kind
    }

    pub fn num_classes(&self) -> usize {
        self.config.mlp.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.components.iter().map(Component::param_count).sum()
    }

    /// Everything that runs at inference time.
    pub fn model_desc(&self) -> ModelDesc {
        ModelDesc {
            components: self.components.iter().map(|c| c.net.desc()).collect(),
        }
    }

    fn expect_kind(&self, kinds: &[LearnerKind], op: &str) -> Result<()> {
        if !kinds.contains(&self.kind()) {
            return Err(state_err!("{op} is not defined for {}", self.kind().as_str()));
        }
        Ok(())
    }

    /// One training event: grow if applicable, then train.
    pub fn train_event(&mut self, train: &TrainSet<'_>, val: &ValSet<'_>, epochs: usize) -> Result<TrainReport> {
        match self.kind() {
            LearnerKind::Sm => sm_train(self, train, Some(val), epochs, self.config.from_scratch),
            LearnerKind::Ens => ens_train(self, train, Some(val), epochs),
            LearnerKind::Umix => umix_train(self, train, epochs),
            LearnerKind::Gens => gens_grow_and_train(self, train, Some(val), epochs, self.config.grow_k),
            LearnerKind::Gmoe => gmoe_train(self, train, val, epochs),
        }
    }
}

fn reset_component(h: &mut LearnerHandle, i: usize) -> Result<()> {
    h.components[i] = h.config.component(i)?;
    Ok(())
}

/// Trains the single model, warm-started unless `from_scratch`, in which
/// case it restarts from its initial parameters and optimizer state.
pub fn sm_train(
    h: &mut LearnerHandle,
    train: &TrainSet<'_>,
    val: Option<&ValSet<'_>>,
    epochs: usize,
    from_scratch: bool,
) -> Result<TrainReport> {
    h.expect_kind(&[LearnerKind::Sm], "sm_train")?;
    if from_scratch && epochs > 0 {
        reset_component(h, 0)?;
    }
    let spec = h.config.spec(epochs, val);
    h.components[0].train(train, &spec)
}

fn running_mean(acc: &mut Matrix, next: &Matrix, i: usize) {
    let inv = (i + 1) as f64;
    for (a, b) in acc.data_mut().iter_mut().zip(next.data()) {
        *a += (b - *a) / inv;
    }
}

/// Uniform average of the components' class probabilities. A growing
/// ensemble with no component yet predicts the uniform distribution.
pub fn ens_predict(h: &LearnerHandle, x: &Matrix) -> Result<Matrix> {
    h.expect_kind(&[LearnerKind::Ens, LearnerKind::Gens], "ens_predict")?;
    let c = h.num_classes();
    if h.components.is_empty() {
        return Matrix::new(x.rows(), c, vec![1.0 / c as f64; x.rows() * c]);
    }
    let mut acc = Matrix::zeros(x.rows(), c);
    for (i, comp) in h.components.iter().enumerate() {
        let p = softmax_rows(&comp.net.logits(&comp.params, x)?);
        running_mean(&mut acc, &p, i);
    }
    Ok(acc)
}

fn train_all(comps: &mut [Component], train: &TrainSet<'_>, spec: &TrainSpec<'_>) -> Result<Vec<TrainReport>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        comps.par_iter_mut().map(|c| c.train(train, spec)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        comps.iter_mut().map(|c| c.train(train, spec)).collect()
    }
}

fn merge(reports: &[TrainReport], wall_ms: f64) -> TrainReport {
    let mut out = TrainReport::default();
    let mut loss = 0.0;
    for (i, r) in reports.iter().enumerate() {
        out.absorb(r);
        loss += (r.final_train_loss - loss) / (i + 1) as f64;
    }
    out.final_train_loss = loss;
    out.wall_ms = wall_ms;
    out
}

/// Trains every member independently on the same data.
pub fn ens_train(h: &mut LearnerHandle, train: &TrainSet<'_>, val: Option<&ValSet<'_>>, epochs: usize) -> Result<TrainReport> {
    h.expect_kind(&[LearnerKind::Ens], "ens_train")?;
    let elapsed = stopwatch();
    if h.config.from_scratch && epochs > 0 {
        for i in 0..h.components.len() {
            reset_component(h, i)?;
        }
    }
    let spec = h.config.spec(epochs, val);
    let reports = train_all(&mut h.components, train, &spec)?;
    Ok(merge(&reports, elapsed()))
}

/// Loss of the mean logits and each member's gradient; every member
/// back-propagates `dlogits / N`.
pub fn umix_forward_backward(h: &LearnerHandle, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<ParamSet>)> {
    h.expect_kind(&[LearnerKind::Umix], "umix_forward_backward")?;
    umix_step(&h.components, x, labels)
}

fn umix_step(comps: &[Component], x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<ParamSet>)> {
    let c = comps[0].net.config().num_classes;
    let mut mean = Matrix::zeros(x.rows(), c);
    let mut caches = Vec::with_capacity(comps.len());
    for (i, comp) in comps.iter().enumerate() {
        let (logits, cache) = comp.net.forward(&comp.params, x, Phase::Train, None)?;
        running_mean(&mut mean, &logits, i);
        caches.push(cache);
    }
    let (loss, mut dl) = softmax_xent(&mean, labels)?;
    let n = comps.len() as f64;
    for v in dl.data_mut() {
        *v /= n;
    }
    let grads = comps
        .iter()
        .zip(&caches)
        .map(|(comp, cache)| comp.net.backward(&comp.params, cache, dl.clone()))
        .collect::<Result<_>>()?;
    Ok((loss, grads))
}

fn umix_logits(comps: &[Component], x: &Matrix) -> Result<Matrix> {
    let c = comps[0].net.config().num_classes;
    let mut mean = Matrix::zeros(x.rows(), c);
    for (i, comp) in comps.iter().enumerate() {
        running_mean(&mut mean, &comp.net.logits(&comp.params, x)?, i);
    }
    Ok(mean)
}

/// Joint training of a UMix on shared mini-batches.
pub fn umix_train(h: &mut LearnerHandle, train: &TrainSet<'_>, epochs: usize) -> Result<TrainReport> {
    h.expect_kind(&[LearnerKind::Umix], "umix_train")?;
    let elapsed = stopwatch();
    let mut report = TrainReport::default();
    if epochs == 0 {
        return Ok(report);
    }
    if h.config.from_scratch {
        for i in 0..h.components.len() {
            reset_component(h, i)?;
        }
    }
    h.components[0].check_data(train.dataset())?;
    let n = train.len();
    if n == 0 {
        return Err(crate::error::input_err!("empty training set"));
    }
    let epoch_flops = flops_model(&h.model_desc(), n, CostPhase::Training);
    let shuffle = shuffle_stream(h.components[0].seed, h.components[0].rounds);
    let optimizer = h.config.optimizer;
    for epoch in 0..epochs {
        let mut total = 0.0;
        for pos in minibatches(n, h.config.minibatch_size, shuffle.split(epoch as u64))? {
            let (x, y) = train.batch(&pos);
            let (loss, grads) = umix_step(&h.components, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss {loss} at epoch {epoch}")));
            }
            for (comp, g) in h.components.iter_mut().zip(&grads) {
                optimizer.step(&mut comp.params, g, &mut comp.opt)?;
            }
            total += loss * pos.len() as f64;
        }
        report.epochs_run += 1;
        report.final_train_loss = total / n as f64;
        report.flops_used += epoch_flops;
        report.examples += n as u64;
    }
    for comp in &mut h.components {
        comp.rounds += 1;
    }
    report.wall_ms = elapsed();
    Ok(report)
}

/// Freezes every existing member, appends `k` fresh ones and trains only
/// those.
pub fn gens_grow_and_train(
    h: &mut LearnerHandle,
    train: &TrainSet<'_>,
    val: Option<&ValSet<'_>>,
    epochs: usize,
    k: usize,
) -> Result<TrainReport> {
    h.expect_kind(&[LearnerKind::Gens], "gens_grow_and_train")?;
    let elapsed = stopwatch();
    if k == 0 {
        return Err(crate::error::input_err!("k must be at least 1"));
    }
    for comp in &mut h.components {
        comp.frozen = true;
    }
    let start = h.components.len();
    for i in start..start + k {
        let comp = h.config.component(i)?;
        h.components.push(comp);
    }
    let spec = h.config.spec(epochs, val);
    let reports = train_all(&mut h.components[start..], train, &spec)?;
    Ok(merge(&reports, elapsed()))
}

/// Splits the losing expert of every MoE layer. Returns the growth
/// records and the flops spent on the validation pass.
pub fn gmoe_grow(h: &mut LearnerHandle, val: &ValSet<'_>) -> Result<(Vec<GrowthRecord>, f64)> {
    h.expect_kind(&[LearnerKind::Gmoe], "gmoe_grow")?;
    let comp = &mut h.components[0];
    let flops = flops_model(&comp.model_desc(), val.len(), CostPhase::Inference);
    let seed = SeedStream::new(comp.seed).split(GROW_STREAM).split(h.growths);
    let recs = grow_step(&mut comp.net, &mut comp.params, val, seed)?;
    h.growths += 1;
    Ok((recs, flops))
}

fn gmoe_train(h: &mut LearnerHandle, train: &TrainSet<'_>, val: &ValSet<'_>, epochs: usize) -> Result<TrainReport> {
    let elapsed = stopwatch();
    let mut grow_flops = 0.0;
    if h.config.grow && h.config.grow_order == GrowOrder::Before {
        grow_flops += gmoe_grow(h, val)?.1;
    }
    let spec = h.config.spec(epochs, Some(val));
    let mut report = h.components[0].train(train, &spec)?;
    if h.config.grow && h.config.grow_order == GrowOrder::After {
        grow_flops += gmoe_grow(h, val)?.1;
    }
    report.flops_used += grow_flops;
    report.wall_ms = elapsed();
    Ok(report)
}

/// Class probabilities under the learner's own aggregation rule.
pub fn probabilities(h: &LearnerHandle, x: &Matrix) -> Result<Matrix> {
    match h.kind() {
        LearnerKind::Sm | LearnerKind::Gmoe => {
            let c = &h.components[0];
            Ok(softmax_rows(&c.net.logits(&c.params, x)?))
        }
        LearnerKind::Ens | LearnerKind::Gens => ens_predict(h, x),
        LearnerKind::Umix => Ok(softmax_rows(&umix_logits(&h.components, x)?)),
    }
}

/// Most probable class per row; ties go to the lowest class index.
pub fn predict(h: &LearnerHandle, x: &Matrix) -> Result<Vec<usize>> {
    Ok(probabilities(h, x)?.argmax_rows())
}
