use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adadelta { rho: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adadelta { rho: 0.9, eps: 1e-6 }
    }
}

impl OptimizerConfig {
    pub fn new_state(&self) -> OptState {
        match self {
            OptimizerConfig::Sgd { .. } => OptState::Sgd(SgdState::default()),
            OptimizerConfig::Adadelta { .. } => OptState::Adadelta(AdadeltaState::default()),
        }
    }

    pub fn step(&self, params: &mut ParamSet, grads: &ParamSet, state: &mut OptState) -> Result<()> {
        match (self, state) {
            (OptimizerConfig::Sgd { lr, momentum }, OptState::Sgd(s)) => {
                sgd_momentum_step(params, grads, s, *lr, *momentum)
            }
            (OptimizerConfig::Adadelta { rho, eps }, OptState::Adadelta(s)) => {
                adadelta_step(params, grads, s, *rho, *eps)
            }
            _ => Err(Error::State("optimizer state does not match optimizer kind".into())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: ParamSet,
}

/// Running averages of squared gradients and squared updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdadeltaState {
    pub sq_grad: ParamSet,
    pub sq_delta: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptState {
    Sgd(SgdState),
    Adadelta(AdadeltaState),
}

impl OptState {
    /// Named slots for serialisation, in a fixed order.
    pub fn slots(&self) -> Vec<(&'static str, &ParamSet)> {
        match self {
            OptState::Sgd(s) => vec![("velocity", &s.velocity)],
            OptState::Adadelta(s) => vec![("sq_grad", &s.sq_grad), ("sq_delta", &s.sq_delta)],
        }
    }
}

fn check_inputs(params: &ParamSet, grads: &ParamSet) -> Result<()> {
    params.check_aligned(grads)?;
    if !grads.all_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(())
}

/// Adds zero slots for parameters the state has not seen yet (grown models).
fn sync_slots(params: &ParamSet, slot: &mut ParamSet) -> Result<()> {
    if slot.check_aligned(params).is_ok() {
        return Ok(());
    }
    let mut synced = params.zeros_like();
    for (name, t) in synced.iter_mut() {
        if let Ok(old) = slot.get(name) {
            if old.shape() == t.shape() {
                t.data_mut().copy_from_slice(old.data());
            }
        }
    }
    *slot = synced;
    Ok(())
}

/// `v ← momentum·v + g; θ ← θ − lr·v`.
pub fn sgd_momentum_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_inputs(params, grads)?;
    sync_slots(params, &mut state.velocity)?;
    for (((_, p), (_, g)), (_, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.velocity.iter_mut())
    {
        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// AdaDelta with unit learning rate.
pub fn adadelta_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdadeltaState,
    rho: f64,
    eps: f64,
) -> Result<()> {
    check_inputs(params, grads)?;
    sync_slots(params, &mut state.sq_grad)?;
    sync_slots(params, &mut state.sq_delta)?;
    for ((((_, p), (_, g)), (_, eg)), (_, ed)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.sq_grad.iter_mut())
        .zip(state.sq_delta.iter_mut())
    {
        for (((p, &g), eg), ed) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(eg.data_mut())
            .zip(ed.data_mut())
        {
            *eg = rho * *eg + (1.0 - rho) * g * g;
            let delta = -((*ed + eps) / (*eg + eps)).sqrt() * g;
            *ed = rho * *ed + (1.0 - rho) * delta * delta;
            *p += delta;
        }
    }
    if !params.all_finite() {
        return Err(Error::Numeric("non-finite parameter after AdaDelta step".into()));
    }
    Ok(())
}
