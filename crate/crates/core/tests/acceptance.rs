//! Acceptance gates. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! MNIST is read from `$ALMA_MNIST_DIR`, falling back to `data/mnist` at
//! the workspace root (see `scripts/fetch_mnist.sh`).

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use alma_core::gmoe::{expert_bias, expert_weight, grow_step, moe_forward, split_expert, Gating, MoeNet, NetLayer, Phase};
use alma_core::harness::{
    load_mnist_dir, run_experiment_with_data, run_seq_vs_iid, DatasetKind, ExperimentConfig, ExperimentData,
    RunOptions, SyntheticSpec,
};
use alma_core::learners::{
    ens_train, gens_grow_and_train, probabilities, sm_train, umix_forward_backward, umix_train, LearnerConfig,
    LearnerHandle, LearnerKind,
};
use alma_core::metrics::{
    cer, cum_comp, cum_mem, error_rate, flops_layer, ArrivalRecord, CostPhase, LayerDesc, MetricsLedger,
};
use alma_core::numkit::gradcheck::finite_diff_check;
use alma_core::numkit::layers::{affine_forward, relu_inplace};
use alma_core::numkit::mlp::{bias_name, weight_name};
use alma_core::numkit::{init_mlp, mlp_forward_backward, Matrix, MlpConfig, ParamSet, SeedStream};
use alma_core::stream::{Dataset, TrainSet, ValSet};

const SPLIT_TOL: f64 = 1e-6;
const SPLIT_MODELS: usize = 100;
const SPLIT_INPUTS: usize = 1000;
const GRAD_TOL: f64 = 1e-5;
const GRAD_STEP: f64 = 1e-5;
const GRAD_MAX_PARAMS: usize = 2000;
const KINK_MARGIN: f64 = 1e-3;
const RANDOM_CER: f64 = 90.0;
const RANDOM_CER_TOL: f64 = 0.5;
const TARDY_MAX_ERROR: f64 = 0.05;
const ORDERING_SLACK: f64 = 0.005;
const SEQ_IID_SLACK: f64 = 0.002;
const SEEDS: [u64; 3] = [0, 1, 2];

const LIMIT_SPLIT: Duration = Duration::from_secs(60);
const LIMIT_GRAD: Duration = Duration::from_secs(120);
const LIMIT_TARDY: Duration = Duration::from_secs(600);
const LIMIT_ORDERING: Duration = Duration::from_secs(1800);
const LIMIT_SEQ_IID: Duration = Duration::from_secs(1200);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn perturb(params: &mut ParamSet, rng: &mut impl Rng, scale: f64) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn split_once(net: &MoeNet, params: &mut ParamSet, rng: &mut impl Rng) -> MoeNet {
    let mut layers = net.layers().to_vec();
    let moe: Vec<usize> = (0..layers.len())
        .filter(|&i| matches!(layers[i], NetLayer::Moe(_)))
        .collect();
    let pick = moe[rng.random_range(0..moe.len())];
    if let NetLayer::Moe(layer) = &mut layers[pick] {
        let e = rng.random_range(0..layer.num_experts());
        split_expert(layer, params, e, SeedStream::new(rng.random())).unwrap();
    }
    MoeNet::from_layers(net.config(), layers)
}

fn split_smoothness() -> Outcome {
    let mut worst = 0.0f64;
    for gating in [Gating::Soft, Gating::Hard] {
        for m in 0..SPLIT_MODELS as u64 {
            let mut rng = SeedStream::new(1_000 + m).rng();
            let depth = rng.random_range(1..=2);
            let cfg = MlpConfig {
                input_dim: rng.random_range(1..=32),
                hidden_dims: (0..depth).map(|_| rng.random_range(1..=32)).collect(),
                num_classes: rng.random_range(2..=10),
                seed: m,
            };
            let moe_layers: Vec<usize> = (0..depth).filter(|_| rng.random_bool(0.6)).collect();
            let moe_layers = if moe_layers.is_empty() { vec![0] } else { moe_layers };
            let mut net = MoeNet::new(&cfg, &moe_layers, gating).map_err(|e| e.to_string())?;
            let mut params = net.init_params().unwrap();
            let k = rng.random_range(1..=6);
            for _ in 1..k {
                net = split_once(&net, &mut params, &mut rng);
            }
            perturb(&mut params, &mut rng, 0.5);
            let x = uniform(&mut rng, SPLIT_INPUTS, cfg.input_dim, 2.0);
            let before = net.logits(&params, &x).unwrap();
            let grown = split_once(&net, &mut params, &mut rng);
            let after = grown.logits(&params, &x).unwrap();
            for (a, b) in before.data().iter().zip(after.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= SPLIT_TOL, || format!("max |before - after| = {worst:.3e} > {SPLIT_TOL:e}"))?;
    Ok(format!("{} models x 2 modes, max deviation {worst:.2e}", SPLIT_MODELS))
}

/// Smallest |pre-activation| over every hidden unit, expert and example.
fn kink_margin(net: &MoeNet, params: &ParamSet, x: &Matrix) -> f64 {
    let mut margin = f64::INFINITY;
    let mut fold = |z: &Matrix| margin = z.data().iter().fold(margin, |m, v| m.min(v.abs()));
    let layers = net.layers();
    let mut h = x.clone();
    for layer in &layers[..layers.len() - 1] {
        match layer {
            NetLayer::Dense { index, .. } => {
                let w = params.get(&weight_name(*index)).unwrap();
                let mut z = affine_forward(&h, w, params.get(&bias_name(*index)).unwrap()).unwrap();
                fold(&z);
                relu_inplace(&mut z);
                h = z;
            }
            NetLayer::Moe(m) => {
                for j in 0..m.num_experts() {
                    let w = params.get(&expert_weight(m.name(), j)).unwrap();
                    fold(&affine_forward(&h, w, params.get(&expert_bias(m.name(), j)).unwrap()).unwrap());
                }
                h = moe_forward(m, params, &h, Phase::Eval, None).unwrap().0;
            }
        }
    }
    margin
}

/// Redraws `x` until no hidden unit of any model sits on a ReLU kink.
fn kink_free_batch(models: &[(&MoeNet, &ParamSet)], rng: &mut impl Rng, rows: usize, rejected: &mut usize) -> Matrix {
    let dim = models[0].0.config().input_dim;
    loop {
        let x = uniform(rng, rows, dim, 1.5);
        if models.iter().all(|(n, p)| kink_margin(n, p, &x) >= KINK_MARGIN) {
            return x;
        }
        *rejected += 1;
    }
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut rejected = 0;
    let mut record = |name: &str, params: &ParamSet, err: f64| -> Result<(), String> {
        ensure(params.param_count() <= GRAD_MAX_PARAMS, || {
            format!("{name} has {} parameters", params.param_count())
        })?;
        worst = worst.max(err);
        checked += 1;
        ensure(err <= GRAD_TOL, || format!("{name}: relative error {err:.3e}"))
    };
    for seed in 0..5u64 {
        let mut rng = SeedStream::new(77 + seed).rng();
        let y: Vec<usize> = (0..9).map(|_| rng.random_range(0..4)).collect();

        let cfg = MlpConfig {
            input_dim: 6,
            hidden_dims: vec![10, 8],
            num_classes: 4,
            seed,
        };
        let mut p = init_mlp(&cfg).unwrap();
        perturb(&mut p, &mut rng, 0.1);
        let as_net = MoeNet::new(&cfg, &[], Gating::Soft).unwrap();
        let x = kink_free_batch(&[(&as_net, &p)], &mut rng, y.len(), &mut rejected);
        let r = finite_diff_check(
            |p| {
                let (l, _, g) = mlp_forward_backward(&cfg, p, &x, &y).unwrap();
                (l, g)
            },
            &p,
            GRAD_STEP,
        );
        record("mlp", &p, r.max_rel_err)?;

        let mut lc = LearnerConfig::new(LearnerKind::Umix, MlpConfig::two_layer(6, 5, 4, seed));
        lc.components = 3;
        let mut h = LearnerHandle::new(lc).unwrap();
        for c in h.components.iter_mut() {
            perturb(&mut c.params, &mut rng, 0.1);
        }
        let members: Vec<(&MoeNet, &ParamSet)> = h.components.iter().map(|c| (&c.net, &c.params)).collect();
        let x = kink_free_batch(&members, &mut rng, y.len(), &mut rejected);
        let mut packed = ParamSet::new();
        for (i, c) in h.components.iter().enumerate() {
            for (name, t) in c.params.iter() {
                packed.insert(format!("c{i}/{name}"), t.clone()).unwrap();
            }
        }
        let r = finite_diff_check(
            |p| {
                for (i, c) in h.components.iter_mut().enumerate() {
                    for (name, t) in c.params.iter_mut() {
                        *t = p.get(&format!("c{i}/{name}")).unwrap().clone();
                    }
                }
                let (l, grads) = umix_forward_backward(&h, &x, &y).unwrap();
                let mut g = ParamSet::new();
                for (i, gi) in grads.iter().enumerate() {
                    for (name, t) in gi.iter() {
                        g.insert(format!("c{i}/{name}"), t.clone()).unwrap();
                    }
                }
                (l, g)
            },
            &packed,
            GRAD_STEP,
        );
        record("umix", &packed, r.max_rel_err)?;

        let cfg = MlpConfig::two_layer(6, 5, 4, seed);
        let mut net = MoeNet::new(&cfg, &[0, 1], Gating::Soft).unwrap();
        let mut params = net.init_params().unwrap();
        let val_x = uniform(&mut rng, 30, 6, 1.5);
        let val_y = (0..30).map(|i| i % 4).collect();
        let val_data = Dataset::new(val_x, val_y, 4).unwrap();
        for g in 0..3 {
            grow_step(&mut net, &mut params, &ValSet::all(&val_data), SeedStream::new(seed * 10 + g)).unwrap();
        }
        perturb(&mut params, &mut rng, 0.3);
        let x = kink_free_batch(&[(&net, &params)], &mut rng, y.len(), &mut rejected);
        let r = finite_diff_check(
            |p| {
                let (l, _, g) = net.forward_backward(p, &x, &y, None).unwrap();
                (l, g)
            },
            &params,
            GRAD_STEP,
        );
        record("soft gmoe", &params, r.max_rel_err)?;
    }
    Ok(format!(
        "{checked} models, worst relative error {worst:.2e}; {rejected} batches redrawn for ReLU kinks"
    ))
}

fn metric_oracles() -> Outcome {
    for case in 0..100u64 {
        let mut rng = SeedStream::new(500 + case).rng();
        let b = rng.random_range(1..=500);
        let t0 = rng.random_range(0..100_000);
        let mut ledger = MetricsLedger::new(b, t0);
        let mut rows = Vec::with_capacity(b);
        for t in 1..=b {
            let trained = rng.random_bool(0.3);
            let rec = ArrivalRecord {
                t,
                error_rate: rng.random_range(0.0..=1.0),
                param_count: rng.random_range(0..1_000_000),
                flops: if trained { rng.random_range(0.0..1e12) } else { 0.0 },
                trained,
            };
            ledger.append(rec).map_err(|e| e.to_string())?;
            rows.push(rec);
        }
        let naive_cer: f64 = rows.iter().map(|r| r.error_rate).sum();
        let naive_mem = (t0 as u128 + rows.iter().map(|r| r.param_count as u128).sum::<u128>()) as f64;
        let naive_comp: f64 = rows.iter().map(|r| r.flops).sum();
        ensure(cer(&ledger).unwrap() == naive_cer, || format!("case {case}: cer differs"))?;
        ensure(cum_mem(&ledger).unwrap() == naive_mem, || format!("case {case}: cum_mem differs"))?;
        ensure(cum_comp(&ledger).unwrap() == naive_comp, || format!("case {case}: cum_comp differs"))?;
    }
    let mut rng = SeedStream::new(3).rng();
    let labels: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..10)).collect();
    let mut ledger = MetricsLedger::new(100, 0);
    for t in 1..=100 {
        let preds: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..10)).collect();
        ledger
            .append(ArrivalRecord {
                t,
                error_rate: error_rate(&preds, &labels).unwrap(),
                param_count: 0,
                flops: 0.0,
                trained: false,
            })
            .unwrap();
    }
    let c = cer(&ledger).unwrap();
    ensure((c - RANDOM_CER).abs() <= RANDOM_CER_TOL, || format!("random-predictor CER {c:.3}"))?;
    Ok(format!("100 ledgers exact; random-predictor CER {c:.3}"))
}

fn blobs(n: usize, seed: u64) -> Dataset {
    SyntheticSpec {
        classes: 3,
        dim: 4,
        spread: 0.8,
        seed,
    }
    .sample(n, 0)
    .unwrap()
}

fn learner(kind: LearnerKind, components: usize, seed: u64) -> LearnerHandle {
    let mut c = LearnerConfig::new(kind, MlpConfig::two_layer(4, 6, 3, seed));
    c.components = components;
    c.minibatch_size = 16;
    LearnerHandle::new(c).unwrap()
}

fn freeze_identity() -> Outcome {
    let data = blobs(120, 4);
    let all = TrainSet::all(&data);

    let mut g = learner(LearnerKind::Gens, 0, 10);
    for stage in 0..4 {
        let before: Vec<ParamSet> = g.components.iter().map(|c| c.params.clone()).collect();
        let idx: Vec<usize> = (stage * 30..stage * 30 + 30).collect();
        gens_grow_and_train(&mut g, &TrainSet::new(&data, idx), None, 3, 1).map_err(|e| e.to_string())?;
        for (i, old) in before.iter().enumerate() {
            ensure(old.bit_eq(&g.components[i].params), || {
                format!("gEns component {i} changed during stage {stage}")
            })?;
        }
    }

    let mut sm = learner(LearnerKind::Sm, 1, 20);
    let mut ens = learner(LearnerKind::Ens, 4, 20);
    for i in 1..4 {
        ens.components[i] = ens.components[0].clone();
    }
    let mut umix = learner(LearnerKind::Umix, 1, 20);
    for _ in 0..2 {
        sm_train(&mut sm, &all, None, 3, false).unwrap();
        ens_train(&mut ens, &all, None, 3).unwrap();
        umix_train(&mut umix, &all, 3).unwrap();
    }
    let p = probabilities(&sm, data.inputs()).unwrap();
    ensure(p == probabilities(&ens, data.inputs()).unwrap(), || {
        "identical-seed Ens differs from SM".into()
    })?;
    ensure(
        p == probabilities(&umix, data.inputs()).unwrap() && sm.components[0].params.bit_eq(&umix.components[0].params),
        || "UMix with one member differs from SM".into(),
    )?;
    Ok("gEns freeze over 4 stages; Ens(4 clones) == SM; UMix(1) == SM, bit-exact".into())
}

fn hard_cost_invariance() -> Outcome {
    let layer = |experts| LayerDesc::Moe {
        d_in: 64,
        d_out: 64,
        experts,
        hard: true,
    };
    for phase in [CostPhase::Inference, CostPhase::Training] {
        let a = flops_layer(&layer(4), 128, phase).expert;
        let b = flops_layer(&layer(12), 128, phase).expert;
        ensure(a == b, || format!("{phase:?}: {a} != {b}"))?;
    }
    let e = flops_layer(&layer(4), 128, CostPhase::Inference).expert;
    Ok(format!("expert term {e} for k = 4 and k = 12"))
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("ALMA_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mnist_config(out: PathBuf, b: usize, w: usize, hidden: Vec<usize>, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetKind::Mnist,
        mnist_dir: mnist_dir(),
        mega_batches: b,
        waiting_time: w,
        hidden,
        seed_stream: seed,
        seed_init: seed,
        seed_routing: seed,
        output_dir: out,
        ..ExperimentConfig::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn tardy_gate(data: &ExperimentData) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mnist_config(dir.path().into(), 500, 500, vec![64, 64], 0);
    let out = run_experiment_with_data(&cfg, data, RunOptions::default()).map_err(|e| e.to_string())?;
    let s = out.summary.expect("complete");
    ensure(s.final_error <= TARDY_MAX_ERROR, || format!("final error {:.4}", s.final_error))?;
    Ok(format!("final test error {:.2}%", 100.0 * s.final_error))
}

fn waiting_ordering(data: &ExperimentData) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let arms = [1usize, 10, 100];
    let results: Vec<Vec<(f64, f64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = arms
            .iter()
            .map(|&w| {
                let root = dir.path().to_path_buf();
                s.spawn(move || {
                    SEEDS
                        .iter()
                        .map(|&seed| {
                            let cfg = mnist_config(root.join(format!("w{w}-s{seed}")), 100, w, vec![4], seed);
                            let s = run_experiment_with_data(&cfg, data, RunOptions::default())
                                .unwrap()
                                .summary
                                .unwrap();
                            (s.cer, s.final_error)
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let cer_of = |i: usize| mean(&results[i].iter().map(|r| r.0).collect::<Vec<_>>());
    let fin_of = |i: usize| mean(&results[i].iter().map(|r| r.1).collect::<Vec<_>>());
    let (cer1, cer10, cer_b) = (cer_of(0), cer_of(1), cer_of(2));
    let (fin1, fin_b) = (fin_of(0), fin_of(2));
    let detail = format!(
        "mean CER w=1 {cer1:.2}, w=10 {cer10:.2}, w=B {cer_b:.2}; final error w=1 {:.2}%, w=B {:.2}%",
        100.0 * fin1,
        100.0 * fin_b
    );
    ensure(cer_b > cer10, || format!("CER(w=B) not above CER(w=10): {detail}"))?;
    ensure(fin_b <= fin1 + ORDERING_SLACK, || format!("tardy final error too high: {detail}"))?;
    Ok(detail)
}

fn seq_vs_iid(data: &ExperimentData) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let outcomes: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = SEEDS
            .iter()
            .map(|&seed| {
                let cfg = mnist_config(dir.path().join(format!("s{seed}")), 100, 1, vec![16], seed);
                s.spawn(move || run_seq_vs_iid(&cfg, 4, data))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let seq = mean(&outcomes.iter().map(|o| o.seq.final_error).collect::<Vec<_>>());
    let iid = mean(&outcomes.iter().map(|o| o.iid.final_error).collect::<Vec<_>>());
    let detail = format!("mean final error seq {:.2}%, iid {:.2}%", 100.0 * seq, 100.0 * iid);
    ensure(seq >= iid - SEQ_IID_SLACK, || detail.clone())?;
    Ok(detail)
}

fn determinism_and_resume() -> Outcome {
    let spec = SyntheticSpec {
        classes: 4,
        dim: 6,
        spread: 1.0,
        seed: 9,
    };
    let data = ExperimentData {
        train: spec.sample(800, 0).unwrap(),
        test: spec.sample(200, 1).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let mut checked = Vec::new();
    for (name, learner, gating) in [
        ("gmoe-hard", LearnerKind::Gmoe, Gating::Hard),
        ("ens", LearnerKind::Ens, Gating::Soft),
        ("gens", LearnerKind::Gens, Gating::Soft),
    ] {
        let cfg = |sub: &str| ExperimentConfig {
            dataset: DatasetKind::Synthetic,
            mega_batches: 12,
            waiting_time: 3,
            replay: true,
            learner,
            gating,
            hidden: vec![8],
            components: 3,
            moe_layers: vec![0],
            epochs_per_event: 2,
            minibatch_size: 32,
            seed_routing: 5,
            output_dir: dir.path().join(format!("{name}-{sub}")),
            ..ExperimentConfig::default()
        };
        let read = |sub: &str, file: &str| std::fs::read(dir.path().join(format!("{name}-{sub}")).join(file)).unwrap();
        run_experiment_with_data(&cfg("a"), &data, RunOptions::default()).map_err(|e| e.to_string())?;
        run_experiment_with_data(&cfg("b"), &data, RunOptions::default()).map_err(|e| e.to_string())?;
        let stop = RunOptions {
            resume: false,
            stop_after: Some(7),
        };
        run_experiment_with_data(&cfg("c"), &data, stop).map_err(|e| e.to_string())?;
        let resume = RunOptions {
            resume: true,
            stop_after: None,
        };
        run_experiment_with_data(&cfg("c"), &data, resume).map_err(|e| e.to_string())?;
        for file in ["ledger.csv", "summary.json", "final.ckpt"] {
            ensure(read("a", file) == read("b", file), || format!("{name}: {file} differs between runs"))?;
            ensure(read("a", file) == read("c", file), || format!("{name}: {file} differs after resume"))?;
        }
        checked.push(name);
    }
    Ok(format!("identical and resumed outputs for {}", checked.join(", ")))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let mut outcome = f();
        let took = start.elapsed();
        if let (Ok(_), Some(limit)) = (&outcome, limit) {
            if took > limit {
                outcome = Err(format!("took {took:.1?}, limit {limit:?}"));
            }
        }
        match outcome {
            Ok(detail) => println!("PASS [{id}] {name}: {detail} ({took:.1?})"),
            Err(detail) => {
                failures += 1;
                println!("FAIL [{id}] {name}: {detail} ({took:.1?})");
            }
        }
    };

    report(1, "split smoothness", Some(LIMIT_SPLIT), &mut split_smoothness);
    report(2, "gradient correctness", Some(LIMIT_GRAD), &mut gradient_correctness);
    report(3, "metric oracle equivalence", None, &mut metric_oracles);
    report(4, "freeze and identity contracts", None, &mut freeze_identity);
    report(5, "hard MoE cost invariance", None, &mut hard_cost_invariance);

    let dir = mnist_dir();
    let data = load_mnist_dir(&dir).map(|(train, test)| ExperimentData { train, test });
    let mnist: [(usize, &str, Duration, fn(&ExperimentData) -> Outcome); 3] = [
        (6, "MNIST tardy gate", LIMIT_TARDY, tardy_gate),
        (7, "waiting-time ordering", LIMIT_ORDERING, waiting_ordering),
        (8, "seq-vs-iid gap", LIMIT_SEQ_IID, seq_vs_iid),
    ];
    for (id, name, limit, f) in mnist {
        match &data {
            Ok(d) => report(id, name, Some(limit), &mut || f(d)),
            Err(e) => report(id, name, None, &mut || Err(format!("MNIST unavailable in {}: {e}", dir.display()))),
        }
    }

    report(9, "determinism and resume", None, &mut determinism_and_resume);

    if failures == 0 {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
