use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::checkpoint::load_checkpoint;
use super::run::{LEDGER_FILE, RUN_FILE, SUMMARY_FILE};
use crate::error::Result;
use crate::gmoe::NetLayer;
use crate::metrics::{parse_csv, Summary};

/// Per-arrival series for plotting error against `t`, parameters or FLOPs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curves {
    pub t: Vec<usize>,
    pub error_rate: Vec<f64>,
    pub param_count: Vec<usize>,
    pub cum_flops: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunEntry {
    pub dir: PathBuf,
    pub learner: Option<String>,
    pub config_hash: Option<String>,
    pub summary: Summary,
    pub curves: Curves,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Incomplete {
    pub dir: PathBuf,
    pub reason: String,
}

/// Complete runs sorted by `cum_comp`, then everything that could not be read.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub runs: Vec<RunEntry>,
    pub incomplete: Vec<Incomplete>,
}

fn read_run(dir: &Path) -> std::result::Result<RunEntry, String> {
    let read = |name: &str| std::fs::read_to_string(dir.join(name)).map_err(|e| format!("{name}: {e}"));
    let summary: Summary =
        serde_json::from_str(&read(SUMMARY_FILE)?).map_err(|e| format!("{SUMMARY_FILE}: {e}"))?;
    let rows = parse_csv(&read(LEDGER_FILE)?).map_err(|e| format!("{LEDGER_FILE}: {e}"))?;
    let meta: Value = read(RUN_FILE)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or(Value::Null);
    if let Some(b) = meta["num_arrivals"].as_u64() {
        if rows.len() as u64 != b {
            return Err(format!("ledger has {} of {b} arrivals", rows.len()));
        }
    }
    let mut total = 0.0;
    let curves = Curves {
        t: rows.iter().map(|r| r.t).collect(),
        error_rate: rows.iter().map(|r| r.error_rate).collect(),
        param_count: rows.iter().map(|r| r.param_count).collect(),
        cum_flops: rows
            .iter()
            .map(|r| {
                total += r.flops;
                total
            })
            .collect(),
    };
    Ok(RunEntry {
        dir: dir.to_path_buf(),
        learner: meta["learner"].as_str().map(str::to_owned),
        config_hash: meta["config_hash"].as_str().map(str::to_owned),
        summary,
        curves,
    })
}

/// Merges the summaries and curves of several run directories.
pub fn report(dirs: &[PathBuf]) -> RunReport {
    let mut runs = Vec::new();
    let mut incomplete = Vec::new();
    for dir in dirs {
        match read_run(dir) {
            Ok(r) => runs.push(r),
            Err(reason) => incomplete.push(Incomplete {
                dir: dir.clone(),
                reason,
            }),
        }
    }
    runs.sort_by(|a, b| a.summary.cum_comp.total_cmp(&b.summary.cum_comp));
    RunReport { runs, incomplete }
}

/// A JSON description of a checkpoint: learner, architecture, gate trees
/// and ledger progress.
pub fn inspect(path: &Path) -> Result<Value> {
    let ck = load_checkpoint(path, None)?;
    let h = &ck.learner;
    let components: Vec<Value> = h
        .components
        .iter()
        .map(|c| {
            let layers: Vec<Value> = c
                .net
                .layers()
                .iter()
                .map(|l| match l {
                    NetLayer::Dense { index, d_in, d_out } => {
                        json!({"index": index, "kind": "dense", "d_in": d_in, "d_out": d_out})
                    }
                    NetLayer::Moe(m) => json!({
                        "name": m.name(),
                        "kind": "moe",
                        "d_in": m.d_in(),
                        "d_out": m.d_out(),
                        "experts": m.num_experts(),
                        "gates": m.tree().num_gates(),
                        "depth": m.tree().depth(),
                        "gating": m.gating(),
                    }),
                })
                .collect();
            json!({
                "seed": c.seed,
                "frozen": c.frozen,
                "rounds": c.rounds,
                "param_count": c.param_count(),
                "layers": layers,
            })
        })
        .collect();
    let last = ck.ledger.records().last();
    Ok(json!({
        "format_version": super::checkpoint::FORMAT_VERSION,
        "config_hash": ck.config_hash,
        "t": ck.t,
        "learner": h.kind().as_str(),
        "learner_config": h.config,
        "growths": h.growths,
        "param_count": h.param_count(),
        "components": components,
        "ledger": {
            "arrivals": ck.ledger.records().len(),
            "num_arrivals": ck.ledger.num_arrivals(),
            "last_error_rate": last.map(|r| r.error_rate),
        },
    }))
}
