//! Mega-batch streams and the waiting-time schedule.
//!
//! A dataset is shuffled once and cut into `B` mega-batches, each with its
//! own validation split. Arrivals are numbered `1..=B`. With waiting time
//! `w` a training event fires at `t = w, 2w, …` and at `t = B` when `w`
//! does not divide `B`, so there are `ceil(B / w)` events and the last one
//! covers the tail of the stream.

mod dataset;

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

pub use dataset::{Dataset, TrainSet, ValSet};

use crate::error::{input_err, Result};
use crate::numkit::rng::{permutation, SeedStream};

/// One chunk of the stream. Indices refer to the pooled training data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MegaBatch {
    /// 1-based arrival index.
    pub index: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl MegaBatch {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffles `data` with `seed` and cuts it into `b` disjoint mega-batches.
///
/// The first `n mod b` mega-batches get one extra example. Each mega-batch
/// keeps `round(val_frac · size)` of its examples for validation.
pub fn partition_stream(data: &Dataset, b: usize, val_frac: f64, seed: u64) -> Result<Vec<MegaBatch>> {
    let n = data.len();
    if b == 0 {
        return Err(input_err!("number of mega-batches must be at least 1"));
    }
    if b > n {
        return Err(input_err!("cannot cut {n} examples into {b} mega-batches"));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(input_err!("validation fraction {val_frac} outside [0, 1)"));
    }
    let perm = permutation(&mut SeedStream::new(seed).rng(), n);
    let (base, extra) = (n / b, n % b);
    let mut out = Vec::with_capacity(b);
    let mut start = 0;
    for i in 0..b {
        let size = base + usize::from(i < extra);
        let chunk = &perm[start..start + size];
        start += size;
        let n_val = (val_frac * size as f64).round() as usize;
        out.push(MegaBatch {
            index: i + 1,
            val: chunk[..n_val].to_vec(),
            train: chunk[n_val..].to_vec(),
        });
    }
    Ok(out)
}

/// The stream as seen by the driver: mega-batches, cursor and policy.
#[derive(Debug, Clone)]
pub struct StreamState {
    mega_batches: Vec<MegaBatch>,
    waiting_time: usize,
    replay: bool,
    cursor: usize,
}

impl StreamState {
    pub fn new(mega_batches: Vec<MegaBatch>, waiting_time: usize, replay: bool) -> Result<Self> {
        let b = mega_batches.len();
        if waiting_time == 0 || waiting_time > b {
            return Err(input_err!("waiting time {waiting_time} must lie in 1..={b}"));
        }
        Ok(Self {
            mega_batches,
            waiting_time,
            replay,
            cursor: 0,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.mega_batches.len()
    }

    pub fn waiting_time(&self) -> usize {
        self.waiting_time
    }

    pub fn replay(&self) -> bool {
        self.replay
    }

    pub fn mega_batches(&self) -> &[MegaBatch] {
        &self.mega_batches
    }

    /// Number of arrivals consumed so far.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Moves to the next arrival and returns its index.
    pub fn advance(&mut self) -> Option<usize> {
        if self.cursor >= self.num_batches() {
            return None;
        }
        self.cursor += 1;
        Some(self.cursor)
    }

    /// Restores the cursor when resuming from a checkpoint.
    pub fn seek(&mut self, cursor: usize) -> Result<()> {
        if cursor > self.num_batches() {
            return Err(input_err!("cursor {cursor} beyond stream of {}", self.num_batches()));
        }
        self.cursor = cursor;
        Ok(())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_batches() {
            return Err(input_err!("arrival {t} outside 1..={}", self.num_batches()));
        }
        Ok(())
    }

    pub fn is_event(&self, t: usize) -> bool {
        t >= 1 && t <= self.num_batches() && (t % self.waiting_time == 0 || t == self.num_batches())
    }

    pub fn event_times(&self) -> Vec<usize> {
        (1..=self.num_batches()).filter(|&t| self.is_event(t)).collect()
    }

    /// Zero-based ordinal of the event at `t`.
    pub fn event_ordinal(&self, t: usize) -> usize {
        (t - 1) / self.waiting_time
    }

    /// Mega-batch indices whose train splits form the training set at `t`.
    pub fn window(&self, t: usize) -> Result<Option<RangeInclusive<usize>>> {
        self.check_t(t)?;
        if !self.is_event(t) {
            return Ok(None);
        }
        let start = if self.replay {
            1
        } else {
            self.event_ordinal(t) * self.waiting_time + 1
        };
        Ok(Some(start..=t))
    }

    /// Union of train splits for the event completing at `t`, or `None`
    /// when `t` does not complete a waiting window.
    pub fn assemble_training_set<'a>(&self, pool: &'a Dataset, t: usize) -> Result<Option<TrainSet<'a>>> {
        Ok(self.window(t)?.map(|range| {
            let idx = range
                .flat_map(|i| self.mega_batches[i - 1].train.iter().copied())
                .collect();
            TrainSet::new(pool, idx)
        }))
    }

    /// Union of validation splits over the same mega-batches.
    pub fn assemble_validation_set<'a>(&self, pool: &'a Dataset, t: usize) -> Result<Option<ValSet<'a>>> {
        Ok(self.window(t)?.map(|range| {
            let idx = range
                .flat_map(|i| self.mega_batches[i - 1].val.iter().copied())
                .collect();
            ValSet::new(pool, idx)
        }))
    }
}

/// Shuffled mini-batches over `n` examples, as positions `0..n`.
///
/// Every position appears exactly once; the last slice may be short.
pub fn minibatches(n: usize, size: usize, seed: SeedStream) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(input_err!("cannot draw mini-batches from an empty dataset"));
    }
    if size == 0 {
        return Err(input_err!("mini-batch size must be at least 1"));
    }
    let perm = permutation(&mut seed.rng(), n);
    Ok(perm.chunks(size).map(<[usize]>::to_vec).collect())
}
