//! Browser bindings. Each export takes and returns JSON text so the page
//! can stay plain JavaScript.

use rand::Rng;
use serde::Deserialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use alma_core::gmoe::{split_expert, Gating, MoeNet, NetLayer};
use alma_core::harness::SyntheticSpec;
use alma_core::learners::{predict, LearnerConfig, LearnerHandle, LearnerKind};
use alma_core::metrics::{error_rate, flops_layer, ArrivalRecord, CostPhase, LayerDesc, MetricsLedger};
use alma_core::numkit::{Matrix, MlpConfig, SeedStream};
use alma_core::stream::{partition_stream, StreamState};

fn to_js(r: alma_core::Result<Value>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, JsError> {
    serde_json::from_str(text).map_err(|e| JsError::new(&format!("bad request: {e}")))
}

#[derive(Deserialize)]
#[serde(default)]
struct SimRequest {
    learner: LearnerKind,
    mega_batches: usize,
    waiting_time: usize,
    replay: bool,
    width: usize,
    epochs: usize,
    classes: usize,
    spread: f64,
    seed: u64,
}

impl Default for SimRequest {
    fn default() -> Self {
        Self {
            learner: LearnerKind::Sm,
            mega_batches: 20,
            waiting_time: 5,
            replay: false,
            width: 16,
            epochs: 5,
            classes: 4,
            spread: 1.2,
            seed: 0,
        }
    }
}

fn simulate(req: SimRequest) -> alma_core::Result<Value> {
    let spec = SyntheticSpec {
        classes: req.classes,
        dim: 8,
        spread: req.spread,
        seed: req.seed,
    };
    let train = spec.sample(req.mega_batches * 40, 0)?;
    let test = spec.sample(400, 1)?;
    let mut cfg = LearnerConfig::new(req.learner, MlpConfig::two_layer(8, req.width, req.classes, req.seed));
    cfg.components = 3;
    cfg.moe_layers = vec![0, 1];
    cfg.grow = req.learner.is_growing();
    cfg.minibatch_size = 32;
    cfg.validate()?;
    let mut learner = LearnerHandle::new(cfg)?;
    let mega = partition_stream(&train, req.mega_batches, 0.1, req.seed)?;
    let mut stream = StreamState::new(mega, req.waiting_time, req.replay)?;
    let mut ledger = MetricsLedger::new(req.mega_batches, learner.param_count());
    while let Some(t) = stream.advance() {
        let flops = match stream.assemble_training_set(&train, t)? {
            Some(set) => {
                let val = stream.assemble_validation_set(&train, t)?.expect("event window");
                Some(learner.train_event(&set, &val, req.epochs)?.flops_used)
            }
            None => None,
        };
        ledger.append(ArrivalRecord {
            t,
            error_rate: error_rate(&predict(&learner, test.inputs())?, test.labels())?,
            param_count: learner.param_count(),
            flops: flops.unwrap_or(0.0),
            trained: flops.is_some(),
        })?;
    }
    Ok(json!({
        "records": ledger.records(),
        "summary": ledger.summary()?,
        "events": stream.event_times(),
    }))
}

/// Runs a small synthetic stream and returns the ledger and summary.
#[wasm_bindgen]
pub fn simulate_stream(request: &str) -> Result<String, JsError> {
    to_js(simulate(parse(request)?))
}

#[derive(Deserialize)]
#[serde(default)]
struct GrowRequest {
    splits: usize,
    hard: bool,
    seed: u64,
}

impl Default for GrowRequest {
    fn default() -> Self {
        Self {
            splits: 4,
            hard: false,
            seed: 0,
        }
    }
}

fn grow(req: GrowRequest) -> alma_core::Result<Value> {
    let gating = if req.hard { Gating::Hard } else { Gating::Soft };
    let cfg = MlpConfig {
        input_dim: 4,
        hidden_dims: vec![8],
        num_classes: 3,
        seed: req.seed,
    };
    let mut net = MoeNet::new(&cfg, &[0], gating)?;
    let mut params = net.init_params()?;
    let mut rng = SeedStream::new(req.seed).split(1).rng();
    let x = Matrix::new(200, 4, (0..800).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let mut steps = Vec::new();
    for _ in 0..req.splits {
        let before = net.logits(&params, &x)?;
        let mut layers = net.layers().to_vec();
        let NetLayer::Moe(layer) = &mut layers[0] else {
            unreachable!("layer 0 is a MoE layer")
        };
        let expert = rng.random_range(0..layer.num_experts());
        split_expert(layer, &mut params, expert, SeedStream::new(rng.random()))?;
        let tree: Vec<String> = layer.tree().preorder().iter().map(|r| format!("{r:?}")).collect();
        net = MoeNet::from_layers(&cfg, layers);
        let after = net.logits(&params, &x)?;
        let deviation = before
            .data()
            .iter()
            .zip(after.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        // move the copies apart so the next split acts on distinct experts
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        steps.push(json!({
            "split": expert,
            "experts": net.moe_layers().next().map(|m| m.num_experts()),
            "params": params.param_count(),
            "max_deviation": deviation,
            "preorder": tree,
        }));
    }
    Ok(json!({ "steps": steps }))
}

/// Splits experts of a one-layer gMoE and reports the output change of
/// each split (zero up to rounding).
#[wasm_bindgen]
pub fn grow_experts(request: &str) -> Result<String, JsError> {
    to_js(grow(parse(request)?))
}

#[derive(Deserialize)]
struct CostRequest {
    d_in: usize,
    d_out: usize,
    batch: usize,
    max_experts: usize,
}

/// Per-layer inference and training FLOPs of soft and hard MoE layers
/// for 1..=max_experts experts.
#[wasm_bindgen]
pub fn moe_costs(request: &str) -> Result<String, JsError> {
    let req: CostRequest = parse(request)?;
    if req.max_experts == 0 || req.max_experts > 256 {
        return Err(JsError::new("max_experts must lie in 1..=256"));
    }
    let rows: Vec<Value> = (1..=req.max_experts)
        .map(|k| {
            let layer = |hard| LayerDesc::Moe {
                d_in: req.d_in,
                d_out: req.d_out,
                experts: k,
                hard,
            };
            let cost = |hard, phase| flops_layer(&layer(hard), req.batch, phase).total();
            json!({
                "experts": k,
                "soft_inference": cost(false, CostPhase::Inference),
                "hard_inference": cost(true, CostPhase::Inference),
                "soft_training": cost(false, CostPhase::Training),
                "hard_training": cost(true, CostPhase::Training),
            })
        })
        .collect();
    Ok(Value::Array(rows).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulate_fills_the_ledger() {
        let v = simulate(SimRequest {
            mega_batches: 6,
            waiting_time: 2,
            epochs: 2,
            ..SimRequest::default()
        })
        .unwrap();
        assert_eq!(v["records"].as_array().unwrap().len(), 6);
        assert_eq!(v["events"], json!([2, 4, 6]));
    }

    #[test]
    fn splits_keep_outputs() {
        for hard in [false, true] {
            let v = grow(GrowRequest {
                splits: 5,
                hard,
                seed: 3,
            })
            .unwrap();
            for s in v["steps"].as_array().unwrap() {
                assert!(s["max_deviation"].as_f64().unwrap() <= 1e-9);
            }
            assert_eq!(v["steps"][4]["experts"], 6);
        }
    }
}
