use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::saros::record_curve;
use super::{check_sessions, sample_every, TrainOutput, TrainTrace, TrainerConfig, UpdateRecord};
use crate::error::{Error, Result};
use crate::ingest::{Event, UserSession};
use crate::model::{ModelParams, SparseGrad, UserItems};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BprConfig {
    /// Users drawn per epoch; each draw yields at most one update.
    pub draws_per_epoch: usize,
    /// Pair draws allowed per drawn user before giving up on it.
    pub retry_limit: usize,
}

impl Default for BprConfig {
    fn default() -> Self {
        BprConfig {
            draws_per_epoch: 10_000,
            retry_limit: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairDraw {
    /// Labels differ: `(preferred, non_preferred)`.
    Accepted { pos: usize, neg: usize },
    Rejected,
}

/// Draws two of the user's events uniformly with replacement.
pub fn draw_pair<R: Rng + ?Sized>(rng: &mut R, events: &[Event]) -> PairDraw {
    let a = &events[rng.gen_range(0..events.len())];
    let b = &events[rng.gen_range(0..events.len())];
    match (a.feedback.is_positive(), b.feedback.is_positive()) {
        (true, false) => PairDraw::Accepted { pos: a.item, neg: b.item },
        (false, true) => PairDraw::Accepted { pos: b.item, neg: a.item },
        _ => PairDraw::Rejected,
    }
}

pub fn bpr_train(
    sessions: &[UserSession],
    n_users: usize,
    n_items: usize,
    cfg: &TrainerConfig,
    bpr: &BprConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let init = ModelParams::random(n_users, n_items, cfg.dim, cfg.seed);
    bpr_train_from(init, sessions, cfg, bpr)
}

/// Sampled-pair SGD: draw a user uniformly, then draw item pairs from that
/// user's history until the labels differ (or the retry limit is hit) and
/// take one step on that pair.
pub fn bpr_train_from(
    init: ModelParams,
    sessions: &[UserSession],
    cfg: &TrainerConfig,
    bpr: &BprConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if bpr.retry_limit == 0 {
        return Err(Error::Config("retry limit must be >= 1".into()));
    }
    check_sessions(sessions, init.n_users(), init.n_items())?;
    let users: Vec<&UserSession> = sessions.iter().filter(|s| !s.events.is_empty()).collect();

    let loss_cfg = cfg.loss();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut trace = TrainTrace::default();
    let mut grad = SparseGrad::new(cfg.dim);
    let train_items = if cfg.trace_points > 0 {
        UserItems::from_sessions(sessions)
    } else {
        Vec::new()
    };
    let total_draws = bpr.draws_per_epoch * cfg.epochs;
    let curve_every = sample_every(total_draws, cfg.trace_points);

    if users.is_empty() {
        return Ok(TrainOutput { params, trace });
    }
    for draw in 0..total_draws {
        let session = users[rng.gen_range(0..users.len())];
        for _ in 0..bpr.retry_limit {
            match draw_pair(&mut rng, &session.events) {
                PairDraw::Rejected => trace.rejections += 1,
                PairDraw::Accepted { pos, neg } => {
                    grad.clear();
                    let loss = grad.add_pair(&params, &loss_cfg, session.user, pos, neg, 1.0);
                    if cfg.freeze_items {
                        grad.drop_items();
                    }
                    grad.apply(&mut params, cfg.eta);
                    trace.pair_evaluations += 1;
                    let updates = trace.updates.len() as u64 + 1;
                    trace.updates.push(UpdateRecord {
                        time_s: start.elapsed().as_secs_f64(),
                        user_ordinal: draw,
                        user: session.user,
                        block: 1,
                        block_loss: loss,
                        updates,
                    });
                    break;
                }
            }
        }
        if let Some(every) = curve_every {
            if (draw + 1) % every == 0 || draw + 1 == total_draws {
                record_curve(&mut trace, &params, cfg, &train_items, draw + 1, start);
            }
        }
        if cfg.time_budget.is_some_and(|b| start.elapsed() >= b) {
            trace.stopped_early = true;
            break;
        }
    }
    if !params.is_finite() {
        return Err(Error::Config("non-finite parameters; reduce eta".into()));
    }
    Ok(TrainOutput { params, trace })
}
