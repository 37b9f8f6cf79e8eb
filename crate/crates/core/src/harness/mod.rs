//! Experiment configs, data loading, the stream driver, checkpoints and
//! run reports.

mod checkpoint;
mod config;
mod data;
mod report;
mod run;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{DatasetKind, ExperimentConfig, OptimizerKind, OUTPUT_ROOT_ENV};
pub use data::{gen_synthetic, load_mnist_dir, load_mnist_idx, parse_idx_images, parse_idx_labels, SyntheticSpec};
pub use report::{inspect, report, RunEntry, RunReport};
pub use run::{
    load_data, run_experiment, run_experiment_with_data, run_seq_vs_iid, ExperimentData, RunOptions, RunOutcome,
    SeqIidOutcome, ABORT_FILE, FINAL_CHECKPOINT, LEDGER_FILE, RESUME_CHECKPOINT, RUN_FILE, SUMMARY_FILE,
};
