//! The stream driver and the sequential-vs-iid ablation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{DatasetKind, ExperimentConfig};
use super::data::{load_mnist_dir, SyntheticSpec};
use crate::error::{input_err, state_err, Error, Result};
use crate::learners::{predict, LearnerHandle, TrainReport};
use crate::metrics::{error_rate, ArrivalRecord, MetricsLedger, Summary};
use crate::stream::{partition_stream, Dataset, StreamState};

pub const LEDGER_FILE: &str = "ledger.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUN_FILE: &str = "run.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const RESUME_CHECKPOINT: &str = "checkpoint.ckpt";
pub const ABORT_FILE: &str = "abort.json";

/// The training pool and the common test set.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => load_mnist_dir(&cfg.mnist_dir)?,
        DatasetKind::Synthetic => {
            let spec = SyntheticSpec {
                classes: cfg.synthetic_classes,
                dim: cfg.synthetic_dim,
                spread: cfg.synthetic_spread,
                seed: cfg.synthetic_seed,
            };
            (spec.sample(cfg.synthetic_train, 0)?, spec.sample(cfg.synthetic_test, 1)?)
        }
    };
    Ok(ExperimentData { train, test })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue from `checkpoint.ckpt` in the output directory.
    pub resume: bool,
    /// Write `checkpoint.ckpt` after this arrival and stop.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub ledger: MetricsLedger,
    pub summary: Option<Summary>,
    pub learner: LearnerHandle,
    /// Training examples processed by this invocation.
    pub examples: u64,
    pub complete: bool,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serialises");
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Runs the whole stream with data loaded from the configuration.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    run_experiment_with_data(cfg, &data, opts)
}

/// Runs the stream: at each arrival, train if a waiting window closes,
/// then evaluate on the test set and append to the ledger.
pub fn run_experiment_with_data(cfg: &ExperimentConfig, data: &ExperimentData, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out)?;
    let hash = cfg.hash();
    let canary = data.test.content_hash();

    let mega = partition_stream(&data.train, cfg.mega_batches, cfg.val_frac, cfg.seed_stream)?;
    let mut stream = StreamState::new(mega, cfg.waiting_time, cfg.replay)?;
    let (mut learner, mut ledger) = if opts.resume {
        let ck = load_checkpoint(&out.join(RESUME_CHECKPOINT), Some(&hash))?;
        stream.seek(ck.t as usize)?;
        (ck.learner, ck.ledger)
    } else {
        let learner = LearnerHandle::new(cfg.learner_config(data.train.dim(), data.train.num_classes()))?;
        let ledger = MetricsLedger::new(cfg.mega_batches, learner.param_count());
        (learner, ledger)
    };
    if learner.config.mlp.input_dim != data.test.dim() || learner.num_classes() != data.test.num_classes() {
        return Err(input_err!("test set does not match the training data shape"));
    }

    let mut examples = 0u64;
    let mut last_error: Option<f64> = None;
    let mut stopped = false;
    let result: Result<()> = (|| {
        while let Some(t) = stream.advance() {
            let report = match stream.assemble_training_set(&data.train, t)? {
                Some(train) => {
                    let val = stream
                        .assemble_validation_set(&data.train, t)?
                        .expect("same window as the training set");
                    let r = learner.train_event(&train, &val, cfg.epochs_per_event).map_err(|e| match e {
                        Error::Numeric(msg) => Error::Numeric(format!("arrival {t}: {msg}")),
                        other => other,
                    })?;
                    examples += r.examples;
                    Some(r)
                }
                None => None,
            };
            // the model only changes at training events
            let err = match (report, last_error) {
                (None, Some(e)) => e,
                _ => error_rate(&predict(&learner, data.test.inputs())?, data.test.labels())?,
            };
            last_error = Some(err);
            ledger.append(ArrivalRecord {
                t,
                error_rate: err,
                param_count: learner.param_count(),
                flops: report.map_or(0.0, |r: TrainReport| r.flops_used),
                trained: report.is_some(),
            })?;
            if opts.stop_after == Some(t) && t < stream.num_batches() {
                save_checkpoint(
                    &out.join(RESUME_CHECKPOINT),
                    &Checkpoint {
                        config_hash: hash.clone(),
                        t: t as u64,
                        learner: learner.clone(),
                        ledger: ledger.clone(),
                    },
                )?;
                stopped = true;
                break;
            }
        }
        Ok(())
    })();

    fs::write(out.join(LEDGER_FILE), ledger.to_csv())?;
    if let Err(e) = result {
        if let Error::Numeric(msg) = &e {
            write_json(
                &out.join(ABORT_FILE),
                &json!({
                    "error": "numeric",
                    "message": msg,
                    "arrivals_completed": ledger.records().len(),
                    "config_hash": hash,
                }),
            )?;
        }
        return Err(e);
    }
    if data.test.content_hash() != canary {
        return Err(state_err!("test set changed during the run"));
    }

    let complete = !stopped && ledger.is_complete();
    let summary = if complete { Some(ledger.summary()?) } else { None };
    if let Some(s) = &summary {
        write_json(&out.join(SUMMARY_FILE), s)?;
        save_checkpoint(
            &out.join(FINAL_CHECKPOINT),
            &Checkpoint {
                config_hash: hash.clone(),
                t: ledger.records().len() as u64,
                learner: learner.clone(),
                ledger: ledger.clone(),
            },
        )?;
    }
    let canonical: serde_json::Value = serde_json::from_str(&cfg.canonical_json()).expect("canonical JSON parses");
    write_json(
        &out.join(RUN_FILE),
        &json!({
            "config_hash": hash,
            "config": canonical,
            "learner": learner.kind().as_str(),
            "num_arrivals": cfg.mega_batches,
            "training_events": stream.event_times(),
            "train_pool_hash": data.train.content_hash(),
            "test_set_hash": canary,
            "complete": complete,
        }),
    )?;
    Ok(RunOutcome {
        output_dir: out,
        ledger,
        summary,
        learner,
        examples,
        complete,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeqIidOutcome {
    pub k: usize,
    pub seq: Summary,
    pub iid: Summary,
    pub seq_examples: u64,
    pub iid_examples: u64,
    /// `seq.final_error − iid.final_error`.
    pub gap: f64,
}

/// Trains once in `k` sequential chunks of the stream and once on the
/// whole stream at the end, with the same seeds and the same number of
/// examples processed.
pub fn run_seq_vs_iid(cfg: &ExperimentConfig, k: usize, data: &ExperimentData) -> Result<SeqIidOutcome> {
    cfg.validate()?;
    let b = cfg.mega_batches;
    if k == 0 || b % k != 0 {
        return Err(Error::Config(format!("k = {k} must divide the {b} mega-batches")));
    }
    if cfg.patience.is_some() {
        return Err(Error::Config("early stopping would unbalance the two arms".into()));
    }
    let arm = |w: usize, name: &str| ExperimentConfig {
        waiting_time: w,
        replay: false,
        output_dir: cfg.output_dir.join(name),
        ..cfg.clone()
    };
    let seq = run_experiment_with_data(&arm(b / k, "seq"), data, RunOptions::default())?;
    let iid = run_experiment_with_data(&arm(b, "iid"), data, RunOptions::default())?;
    if seq.examples != iid.examples {
        return Err(state_err!(
            "arms processed {} and {} examples",
            seq.examples,
            iid.examples
        ));
    }
    let (seq_s, iid_s) = (
        seq.summary.expect("complete run"),
        iid.summary.expect("complete run"),
    );
    let outcome = SeqIidOutcome {
        k,
        seq: seq_s,
        iid: iid_s,
        seq_examples: seq.examples,
        iid_examples: iid.examples,
        gap: seq_s.final_error - iid_s.final_error,
    };
    write_json(&cfg.resolved_output_dir().join("seq_vs_iid.json"), &outcome)?;
    Ok(outcome)
}
