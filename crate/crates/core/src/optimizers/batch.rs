use std::time::Instant;

use super::{check_sessions, CurvePoint, TrainOutput, TrainTrace, TrainerConfig, UpdateRecord};
use crate::error::{Error, Result};
use crate::ingest::UserSession;
use crate::model::{global_loss_grad, ModelParams, UserItems};

pub fn bpr_batch_train(
    sessions: &[UserSession],
    n_users: usize,
    n_items: usize,
    cfg: &TrainerConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let init = ModelParams::random(n_users, n_items, cfg.dim, cfg.seed);
    bpr_batch_train_from(init, sessions, cfg)
}

/// Full-batch gradient descent on the global ranking loss: one step of size
/// `eta` per epoch. The curve holds the loss at the start of each epoch.
pub fn bpr_batch_train_from(init: ModelParams, sessions: &[UserSession], cfg: &TrainerConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    check_sessions(sessions, init.n_users(), init.n_items())?;
    let users = UserItems::from_sessions(sessions);
    let loss_cfg = cfg.loss();
    let start = Instant::now();
    let mut params = init;
    let mut trace = TrainTrace::default();

    for epoch in 0..cfg.epochs {
        let (loss, mut grad) = global_loss_grad(&params, &loss_cfg, &users)?;
        if cfg.freeze_items {
            grad.drop_items();
        }
        grad.apply(&mut params, cfg.eta);
        trace.pair_evaluations += users
            .iter()
            .filter(|u| u.qualifies())
            .map(|u| (u.positives.len() * u.negatives.len()) as u64)
            .sum::<u64>();
        let time_s = start.elapsed().as_secs_f64();
        let updates = epoch as u64 + 1;
        trace.updates.push(UpdateRecord {
            time_s,
            user_ordinal: epoch,
            user: 0,
            block: 1,
            block_loss: loss.loss,
            updates,
        });
        trace.curve.push(CurvePoint {
            time_s,
            updates,
            users_seen: loss.evaluated * (epoch + 1),
            train_loss: loss.loss,
        });
        if !params.is_finite() {
            return Err(Error::Config("non-finite parameters; reduce eta".into()));
        }
        if cfg.time_budget.is_some_and(|b| start.elapsed() >= b) {
            trace.stopped_early = true;
            break;
        }
    }
    Ok(TrainOutput { params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Event, Feedback};
    use crate::model::{global_loss, LossConfig};

    fn session(user: usize, items: &[(usize, bool)]) -> UserSession {
        UserSession {
            user,
            events: items
                .iter()
                .enumerate()
                .map(|(t, &(item, pos))| Event {
                    item,
                    feedback: if pos { Feedback::Positive } else { Feedback::Negative },
                    timestamp: t as i64,
                })
                .collect(),
        }
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let init = ModelParams::zeros(1, 2, 3);
        let cfg = TrainerConfig { dim: 3, epochs: 5, ..Default::default() };
        let out = bpr_batch_train_from(init.clone(), &[session(0, &[(0, false), (1, true)])], &cfg).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn convex_subproblem_loss_is_non_increasing() {
        let sessions = vec![
            session(0, &[(0, false), (1, true), (2, false), (3, true)]),
            session(1, &[(4, true), (0, false), (2, true), (5, false)]),
            session(2, &[(3, false), (5, true), (1, false)]),
        ];
        let init = ModelParams::random(3, 6, 4, 17);
        let users = UserItems::from_sessions(&sessions);
        let loss_cfg = LossConfig::new(0.05).unwrap();

        // Backtracking: halve eta until one step decreases the loss and the
        // Armijo condition holds, then train with that step.
        let (l0, mut g) = global_loss_grad(&init, &loss_cfg, &users).unwrap();
        g.drop_items();
        let gnorm = g.norm_sq();
        let mut eta = 1.0;
        loop {
            let mut trial = init.clone();
            g.apply(&mut trial, eta);
            if global_loss(&trial, &loss_cfg, &users).unwrap().loss <= l0.loss - 0.5 * eta * gnorm {
                break;
            }
            eta *= 0.5;
        }
        let cfg = TrainerConfig {
            dim: 4,
            eta: eta * 0.5,
            mu: 0.05,
            epochs: 200,
            freeze_items: true,
            ..Default::default()
        };
        let out = bpr_batch_train_from(init, &sessions, &cfg).unwrap();
        let losses: Vec<f64> = out.trace.curve.iter().map(|c| c.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-15), "{losses:?}");
        assert!(losses.last().unwrap() < &losses[0]);
    }
}
