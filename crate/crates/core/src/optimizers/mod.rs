//! Trainers sharing [`ModelParams`](crate::model::ModelParams): the
//! block-wise sequential trainer and its baselines.

use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::blocks::{block_profile, BlockOrder};
use crate::error::{Error, Result};
use crate::ingest::UserSession;
use crate::model::{LossConfig, ModelParams};

mod batch;
mod bpr;
mod mf;
mod mostpop;
mod saros;

pub use batch::{bpr_batch_train, bpr_batch_train_from};
pub use bpr::{bpr_train, bpr_train_from, draw_pair, BprConfig, PairDraw};
pub use mf::{mf_fit, mf_point_grad, mf_point_loss, mf_targets, mf_train, MfExample};
pub use mostpop::{mostpop_rank, PopularityRanking};
pub use saros::{saros_train, saros_train_from, saros_train_observed};

/// When a user's parameter updates are discarded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdPolicy {
    /// Updates stop after `b_max` blocks; users with fewer than `b_min`
    /// applied blocks are rolled back.
    #[default]
    CapAndRollbackBelowB,
    /// Updates stop after `b_max` blocks; users whose uncapped block count
    /// falls outside `[b_min, b_max]` are rolled back.
    RollbackOutsideRange,
}

impl ThresholdPolicy {
    pub fn keeps(self, total: usize, applied: usize, b_min: usize, b_max: usize) -> bool {
        match self {
            ThresholdPolicy::CapAndRollbackBelowB => applied >= b_min,
            ThresholdPolicy::RollbackOutsideRange => (b_min..=b_max).contains(&total),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IteratePolicy {
    /// Parameters after the final user.
    #[default]
    Last,
    /// Mean of the parameters each user started from.
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub eta: f64,
    pub mu: f64,
    pub dim: usize,
    pub b_min: usize,
    pub b_max: usize,
    pub epochs: usize,
    pub seed: u64,
    pub threshold_policy: ThresholdPolicy,
    pub iterate_policy: IteratePolicy,
    pub time_budget: Option<Duration>,
    pub block_order: BlockOrder,
    /// Visit users in a seeded random order each epoch instead of data order.
    pub shuffle_users: bool,
    /// Keep item embeddings fixed (only user rows move).
    pub freeze_items: bool,
    /// Number of training-loss samples to record in the trace; 0 disables.
    pub trace_points: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            eta: 0.05,
            mu: 0.0,
            dim: 16,
            b_min: 1,
            b_max: usize::MAX,
            epochs: 1,
            seed: 0,
            threshold_policy: ThresholdPolicy::default(),
            iterate_policy: IteratePolicy::default(),
            time_budget: None,
            block_order: BlockOrder::default(),
            shuffle_users: false,
            freeze_items: false,
            trace_points: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        LossConfig::new(self.mu)?;
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if self.b_min == 0 || self.b_min > self.b_max {
            return Err(Error::Config(format!(
                "block thresholds must satisfy 1 <= b ({}) <= B ({})",
                self.b_min, self.b_max
            )));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { mu: self.mu }
    }
}

/// Default `(b, B)`: the minimum and the (rounded) mean per-user block count
/// over the training sessions. `b` is at least 1 and `B` at least `b`.
pub fn block_thresholds(train: &[UserSession], order: BlockOrder) -> (usize, usize) {
    let (counts, _) = block_profile(train, order);
    if counts.is_empty() {
        return (1, 1);
    }
    let min = counts.iter().map(|&(_, c)| c).min().unwrap_or(0).max(1);
    let mean = counts.iter().map(|&(_, c)| c).sum::<usize>() as f64 / counts.len() as f64;
    (min, (mean.round() as usize).max(min))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub time_s: f64,
    /// Position of the user (or draw, for sampled-pair training) in the stream.
    pub user_ordinal: usize,
    pub user: usize,
    /// 1-based block index within the user; 1 for single-pair updates.
    pub block: usize,
    /// Loss of the block at the parameters the step was taken from.
    pub block_loss: f64,
    pub updates: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateRecord {
    pub user: usize,
    pub blocks_total: usize,
    pub blocks_applied: usize,
    pub kept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub time_s: f64,
    pub updates: u64,
    pub users_seen: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub updates: Vec<UpdateRecord>,
    pub gates: Vec<GateRecord>,
    pub curve: Vec<CurvePoint>,
    /// Pair-gradient evaluations performed.
    pub pair_evaluations: u64,
    /// Sampled pairs rejected for having equal labels.
    pub rejections: u64,
    pub stopped_early: bool,
}

impl TrainTrace {
    pub fn update_count(&self) -> u64 {
        self.updates.len() as u64
    }

    /// The trace with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainTrace {
        let mut t = self.clone();
        t.updates.iter_mut().for_each(|u| u.time_s = 0.0);
        t.curve.iter_mut().for_each(|c| c.time_s = 0.0);
        t
    }

    /// Loss curve as `time_s,updates,users_seen,train_loss`. The time column
    /// is wall-clock and differs between reruns.
    pub fn write_curve<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "time_s,updates,users_seen,train_loss")?;
        for c in &self.curve {
            writeln!(out, "{:.6},{},{},{}", c.time_s, c.updates, c.users_seen, c.train_loss)?;
        }
        Ok(())
    }

    pub fn write_updates<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "update,user_ordinal,user,block,block_loss")?;
        for u in &self.updates {
            writeln!(out, "{},{},{},{},{}", u.updates, u.user_ordinal, u.user, u.block, u.block_loss)?;
        }
        Ok(())
    }

    pub fn write_gates<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "user,blocks_total,blocks_applied,kept")?;
        for g in &self.gates {
            writeln!(
                out,
                "{},{},{},{}",
                g.user, g.blocks_total, g.blocks_applied, g.kept as u8
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub trace: TrainTrace,
}

pub(crate) fn check_sessions(sessions: &[UserSession], n_users: usize, n_items: usize) -> Result<()> {
    for s in sessions {
        if s.user >= n_users {
            return Err(Error::OutOfRange {
                kind: "user",
                index: s.user,
                size: n_users,
            });
        }
        if let Some(e) = s.events.iter().find(|e| e.item >= n_items) {
            return Err(Error::OutOfRange {
                kind: "item",
                index: e.item,
                size: n_items,
            });
        }
    }
    Ok(())
}

/// Indices at which a loss-curve sample is taken, spread over `total` steps.
pub(crate) fn sample_every(total: usize, points: usize) -> Option<usize> {
    if points == 0 || total == 0 {
        None
    } else {
        Some(total.div_ceil(points).max(1))
    }
}
