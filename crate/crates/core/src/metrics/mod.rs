//! Cumulative error, memory and compute over a stream, plus the FLOP model.
//!
//! The ledger holds one record per arrival `t = 1..=B` and the parameter
//! count of the freshly initialised model (the `t = 0` memory term).
//! Compute at `t = 0` is zero. All sums run in arrival order.

mod flops;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use flops::{flops_affine, flops_layer, flops_model, parse_model_desc, CostPhase, LayerCost, LayerDesc, ModelDesc, NetDesc};

use crate::error::{input_err, state_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalRecord {
    pub t: usize,
    pub error_rate: f64,
    pub param_count: usize,
    pub flops: f64,
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    num_arrivals: usize,
    t0_param_count: usize,
    records: Vec<ArrivalRecord>,
}

/// The cumulative numbers written to `summary.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub cer: f64,
    pub mean_error: f64,
    pub cum_mem: f64,
    pub cum_comp: f64,
    pub final_error: f64,
}

pub const CSV_HEADER: &str = "t,error_rate,param_count,flops,trained";

impl MetricsLedger {
    pub fn new(num_arrivals: usize, t0_param_count: usize) -> Self {
        Self {
            num_arrivals,
            t0_param_count,
            records: Vec::with_capacity(num_arrivals),
        }
    }

    pub fn num_arrivals(&self) -> usize {
        self.num_arrivals
    }

    pub fn t0_param_count(&self) -> usize {
        self.t0_param_count
    }

    pub fn records(&self) -> &[ArrivalRecord] {
        &self.records
    }

    pub fn is_complete(&self) -> bool {
        self.records.len() == self.num_arrivals
    }

    /// Appends the record for the next arrival.
    pub fn append(&mut self, rec: ArrivalRecord) -> Result<()> {
        let expect = self.records.len() + 1;
        if rec.t != expect || rec.t > self.num_arrivals {
            return Err(state_err!("expected record for arrival {expect}, got {}", rec.t));
        }
        if !(0.0..=1.0).contains(&rec.error_rate) {
            return Err(input_err!("error rate {} outside [0, 1]", rec.error_rate));
        }
        if !(rec.flops.is_finite() && rec.flops >= 0.0) {
            return Err(input_err!("invalid flop count {}", rec.flops));
        }
        if !rec.trained && rec.flops != 0.0 {
            return Err(input_err!("arrival {} charged {} flops without training", rec.t, rec.flops));
        }
        self.records.push(rec);
        Ok(())
    }

    fn require_complete(&self) -> Result<()> {
        if !self.is_complete() {
            return Err(state_err!(
                "ledger holds {} of {} arrivals",
                self.records.len(),
                self.num_arrivals
            ));
        }
        Ok(())
    }

    pub fn summary(&self) -> Result<Summary> {
        let cer = cer(self)?;
        let final_error = self
            .records
            .last()
            .map(|r| r.error_rate)
            .ok_or_else(|| state_err!("empty stream has no final error"))?;
        Ok(Summary {
            cer,
            mean_error: cer / self.num_arrivals as f64,
            cum_mem: cum_mem(self)?,
            cum_comp: cum_comp(self)?,
            final_error,
        })
    }

    /// One CSV row per arrival recorded so far.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.t,
                r.error_rate,
                r.param_count,
                r.flops,
                u8::from(r.trained)
            );
        }
        out
    }
}

/// Parses rows written by [`MetricsLedger::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<ArrivalRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(input_err!("ledger CSV header missing"));
    }
    let bad = |line: &str| input_err!("malformed ledger row {line:?}");
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            Ok(ArrivalRecord {
                t: f[0].parse().map_err(|_| bad(line))?,
                error_rate: f[1].parse().map_err(|_| bad(line))?,
                param_count: f[2].parse().map_err(|_| bad(line))?,
                flops: f[3].parse().map_err(|_| bad(line))?,
                trained: match f[4] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad(line)),
                },
            })
        })
        .collect()
}

/// Fraction of mismatched predictions.
pub fn error_rate(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(input_err!("empty test set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Sum of per-arrival error rates.
pub fn cer(ledger: &MetricsLedger) -> Result<f64> {
    ledger.require_complete()?;
    let mut acc = 0.0;
    for r in &ledger.records {
        acc += r.error_rate;
    }
    Ok(acc)
}

/// Initial parameter count plus the count after every arrival.
pub fn cum_mem(ledger: &MetricsLedger) -> Result<f64> {
    ledger.require_complete()?;
    let mut acc = ledger.t0_param_count as f64;
    for r in &ledger.records {
        acc += r.param_count as f64;
    }
    Ok(acc)
}

pub fn cum_comp(ledger: &MetricsLedger) -> Result<f64> {
    ledger.require_complete()?;
    let mut acc = 0.0;
    for r in &ledger.records {
        acc += r.flops;
    }
    Ok(acc)
}
