use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_sessions, sample_every, CurvePoint, GateRecord, IteratePolicy, TrainOutput, TrainTrace, TrainerConfig, UpdateRecord};
use crate::blocks::Segmenter;
use crate::error::{Error, Result};
use crate::ingest::UserSession;
use crate::model::{block_loss_grad, global_loss, ModelParams, SparseGrad, UserItems};

/// Original values of every row modified since the last `begin`.
#[derive(Debug, Default)]
struct UndoLog {
    users: BTreeMap<usize, Vec<f64>>,
    items: BTreeMap<usize, Vec<f64>>,
}

impl UndoLog {
    fn begin(&mut self) {
        self.users.clear();
        self.items.clear();
    }

    fn record(&mut self, params: &ModelParams, grad: &SparseGrad) {
        for &u in grad.users.keys() {
            self.users.entry(u).or_insert_with(|| params.user(u).to_vec());
        }
        for &i in grad.items.keys() {
            self.items.entry(i).or_insert_with(|| params.item(i).to_vec());
        }
    }

    fn restore(&self, params: &mut ModelParams) {
        for (&u, row) in &self.users {
            params.user_mut(u).copy_from_slice(row);
        }
        for (&i, row) in &self.items {
            params.item_mut(i).copy_from_slice(row);
        }
    }

    fn touched_finite(&self, params: &ModelParams) -> bool {
        self.users.keys().all(|&u| params.user(u).iter().all(|w| w.is_finite()))
            && self.items.keys().all(|&i| params.item(i).iter().all(|w| w.is_finite()))
    }
}

/// Block-wise sequential training from a seeded random initialization.
pub fn saros_train(
    sessions: &[UserSession],
    n_users: usize,
    n_items: usize,
    cfg: &TrainerConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let init = ModelParams::random(n_users, n_items, cfg.dim, cfg.seed);
    saros_train_from(init, sessions, cfg)
}

pub fn saros_train_from(init: ModelParams, sessions: &[UserSession], cfg: &TrainerConfig) -> Result<TrainOutput> {
    saros_train_observed(init, sessions, cfg, |_| {})
}

/// As [`saros_train_from`], calling `observe` with the parameters each user
/// starts from, before that user's first update.
pub fn saros_train_observed<F: FnMut(&ModelParams)>(
    init: ModelParams,
    sessions: &[UserSession],
    cfg: &TrainerConfig,
    mut observe: F,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if init.dim() != cfg.dim {
        return Err(Error::ShapeMismatch(format!(
            "initial parameters have dim {}, config asks for {}",
            init.dim(),
            cfg.dim
        )));
    }
    check_sessions(sessions, init.n_users(), init.n_items())?;

    let loss_cfg = cfg.loss();
    let start = Instant::now();
    let mut params = init;
    let mut trace = TrainTrace::default();
    let mut segmenter = Segmenter::new(cfg.block_order);
    let mut grad = SparseGrad::new(cfg.dim);
    let mut undo = UndoLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut average: Option<Vec<f64>> = match cfg.iterate_policy {
        IteratePolicy::Average => Some(vec![0.0; params.weights().count()]),
        IteratePolicy::Last => None,
    };
    let train_items = if cfg.trace_points > 0 {
        UserItems::from_sessions(sessions)
    } else {
        Vec::new()
    };
    let total_visits = sessions.len() * cfg.epochs;
    let curve_every = sample_every(total_visits, cfg.trace_points);

    let mut order: Vec<usize> = (0..sessions.len()).collect();
    let mut users_seen = 0usize;

    'epochs: for _ in 0..cfg.epochs {
        if cfg.shuffle_users {
            order.shuffle(&mut rng);
        }
        for &idx in &order {
            let session = &sessions[idx];
            observe(&params);
            if let Some(avg) = average.as_mut() {
                for (a, w) in avg.iter_mut().zip(params.weights()) {
                    *a += w;
                }
            }

            undo.begin();
            let mut applied = 0usize;
            for event in &session.events {
                let Some(block) = segmenter.feed(event.item, event.feedback) else {
                    continue;
                };
                if block.ordinal > cfg.b_max {
                    continue;
                }
                grad.clear();
                let loss = block_loss_grad(&params, &loss_cfg, session.user, &block, &mut grad);
                if cfg.freeze_items {
                    grad.drop_items();
                }
                undo.record(&params, &grad);
                grad.apply(&mut params, cfg.eta);
                applied += 1;
                trace.pair_evaluations += block.pair_count() as u64;
                let updates = trace.updates.len() as u64 + 1;
                trace.updates.push(UpdateRecord {
                    time_s: start.elapsed().as_secs_f64(),
                    user_ordinal: users_seen,
                    user: session.user,
                    block: block.ordinal,
                    block_loss: loss,
                    updates,
                });
            }
            let total = segmenter.finish_user();
            let kept = cfg.threshold_policy.keeps(total, applied, cfg.b_min, cfg.b_max);
            if kept {
                if !undo.touched_finite(&params) {
                    return Err(Error::Config(format!(
                        "non-finite parameters after user {}; reduce eta",
                        session.user
                    )));
                }
            } else {
                undo.restore(&mut params);
            }
            trace.gates.push(GateRecord {
                user: session.user,
                blocks_total: total,
                blocks_applied: applied,
                kept,
            });
            users_seen += 1;

            if let Some(every) = curve_every {
                if users_seen % every == 0 || users_seen == total_visits {
                    record_curve(&mut trace, &params, cfg, &train_items, users_seen, start);
                }
            }
            if cfg.time_budget.is_some_and(|b| start.elapsed() >= b) {
                trace.stopped_early = true;
                break 'epochs;
            }
        }
    }

    let params = match average {
        Some(sum) if users_seen > 0 => {
            let mut mean = params;
            let n = users_seen as f64;
            for (w, s) in mean.weights_mut().zip(sum) {
                *w = s / n;
            }
            mean
        }
        _ => params,
    };
    Ok(TrainOutput { params, trace })
}

pub(super) fn record_curve(
    trace: &mut TrainTrace,
    params: &ModelParams,
    cfg: &TrainerConfig,
    train_items: &[UserItems],
    users_seen: usize,
    start: Instant,
) {
    let train_loss = global_loss(params, &cfg.loss(), train_items)
        .map(|g| g.loss)
        .unwrap_or(f64::NAN);
    trace.curve.push(CurvePoint {
        time_s: start.elapsed().as_secs_f64(),
        updates: trace.updates.len() as u64,
        users_seen,
        train_loss,
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Event, Feedback};
    use crate::model::pair_grad;
    use crate::optimizers::ThresholdPolicy;

    fn session(user: usize, labels: &[u8], items: &[usize]) -> UserSession {
        UserSession {
            user,
            events: labels
                .iter()
                .zip(items)
                .enumerate()
                .map(|(t, (&l, &item))| Event {
                    item,
                    feedback: if l == 1 { Feedback::Positive } else { Feedback::Negative },
                    timestamp: t as i64,
                })
                .collect(),
        }
    }

    fn alternating(user: usize, blocks: usize, n_items: usize) -> UserSession {
        let labels: Vec<u8> = (0..2 * blocks).map(|t| (t % 2) as u8).collect();
        let items: Vec<usize> = (0..2 * blocks).map(|t| t % n_items).collect();
        session(user, &labels, &items)
    }

    fn cfg() -> TrainerConfig {
        TrainerConfig {
            eta: 0.1,
            mu: 0.01,
            dim: 3,
            ..Default::default()
        }
    }

    #[test]
    fn user_without_blocks_leaves_params_unchanged() {
        let init = ModelParams::random(1, 4, 3, 5);
        let s = session(0, &[0, 0, 0], &[0, 1, 2]);
        let out = saros_train_from(init.clone(), &[s], &cfg()).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.trace.gates[0].kept, false);
        assert_eq!(out.trace.gates[0].blocks_total, 0);
    }

    #[test]
    fn one_block_one_step() {
        let init = ModelParams::random(1, 2, 3, 11);
        let c = TrainerConfig { mu: 0.0, ..cfg() };
        let s = session(0, &[0, 1], &[1, 0]);
        let out = saros_train_from(init.clone(), &[s], &c).unwrap();

        let g = pair_grad(&init, &c.loss(), 0, 0, 1);
        let mut expected = init.clone();
        for d in 0..3 {
            expected.user_mut(0)[d] -= c.eta * g.users[&0][d];
            expected.item_mut(0)[d] -= c.eta * g.items[&0][d];
            expected.item_mut(1)[d] -= c.eta * g.items[&1][d];
        }
        assert_eq!(out.params, expected);
        assert_eq!(out.trace.pair_evaluations, 1);
    }

    #[test]
    fn below_b_is_rolled_back_bit_exact() {
        let init = ModelParams::random(2, 6, 3, 2);
        let c = TrainerConfig { b_min: 3, b_max: 5, ..cfg() };
        let out = saros_train_from(init.clone(), &[alternating(0, 2, 6)], &c).unwrap();
        assert!(out.params.weights().zip(init.weights()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(out.trace.gates[0].blocks_applied, 2);
        assert!(!out.trace.gates[0].kept);
    }

    #[test]
    fn cap_limits_applied_updates() {
        let init = ModelParams::random(1, 6, 3, 2);
        let c = TrainerConfig { b_min: 1, b_max: 2, ..cfg() };
        let out = saros_train_from(init.clone(), &[alternating(0, 7, 6)], &c).unwrap();
        assert_eq!(out.trace.gates[0].blocks_total, 7);
        assert_eq!(out.trace.gates[0].blocks_applied, 2);
        assert!(out.trace.gates[0].kept);
        assert_eq!(out.trace.update_count(), 2);

        let strict = TrainerConfig { threshold_policy: ThresholdPolicy::RollbackOutsideRange, ..c };
        let out = saros_train_from(init.clone(), &[alternating(0, 7, 6)], &strict).unwrap();
        assert!(!out.trace.gates[0].kept);
        assert_eq!(out.params, init);
    }

    #[test]
    fn averaged_iterate_is_mean_of_user_starts() {
        let init = ModelParams::random(2, 4, 3, 8);
        let sessions = vec![alternating(0, 2, 4), alternating(1, 3, 4)];
        let mut starts = Vec::new();
        let last = saros_train_observed(init.clone(), &sessions, &cfg(), |p| starts.push(p.clone())).unwrap();
        assert_eq!(starts.len(), 2);
        assert_eq!(starts[0], init);
        let avg_cfg = TrainerConfig { iterate_policy: IteratePolicy::Average, ..cfg() };
        let avg = saros_train_from(init, &sessions, &avg_cfg).unwrap();
        for ((a, s0), s1) in avg.params.weights().zip(starts[0].weights()).zip(starts[1].weights()) {
            assert_eq!(*a, (s0 + s1) / 2.0);
        }
        assert_ne!(avg.params, last.params);
    }

    #[test]
    fn frozen_items_stay_put() {
        let init = ModelParams::random(1, 4, 3, 1);
        let c = TrainerConfig { freeze_items: true, ..cfg() };
        let out = saros_train_from(init.clone(), &[alternating(0, 3, 4)], &c).unwrap();
        assert_eq!(out.params.item_matrix(), init.item_matrix());
        assert_ne!(out.params.user_matrix(), init.user_matrix());
    }

    #[test]
    fn out_of_range_session_is_rejected() {
        let init = ModelParams::random(1, 2, 3, 1);
        assert!(saros_train_from(init, &[session(0, &[0, 1], &[0, 5])], &cfg()).is_err());
    }

    #[test]
    fn tiny_budget_stops_after_first_user() {
        let sessions: Vec<UserSession> = (0..20).map(|u| alternating(u, 3, 5)).collect();
        let c = TrainerConfig {
            time_budget: Some(std::time::Duration::ZERO),
            ..cfg()
        };
        let out = saros_train(&sessions, 20, 5, &c).unwrap();
        assert!(out.trace.stopped_early);
        assert_eq!(out.trace.gates.len(), 1);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let sessions: Vec<UserSession> = (0..10).map(|u| alternating(u, 1 + u % 4, 7)).collect();
        let c = TrainerConfig { shuffle_users: true, epochs: 3, trace_points: 4, ..cfg() };
        let a = saros_train(&sessions, 10, 7, &c).unwrap();
        let b = saros_train(&sessions, 10, 7, &c).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace.without_timing(), b.trace.without_timing());
        assert_eq!(a.trace.curve.len(), 4);
    }
}
