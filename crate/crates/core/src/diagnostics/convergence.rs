use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linear_fit;
use crate::blocks::{BlockOrder, Segmenter};
use crate::error::{Error, Result};
use crate::ingest::{Event, Feedback, UserSession};
use crate::model::{dot, global_loss, global_loss_grad, sigmoid, LossConfig, ModelParams, UserItems};
use crate::optimizers::{saros_train_observed, IteratePolicy, TrainerConfig};

/// Accepted range for the fitted exponent of `c * u^-alpha`.
pub const ALPHA_RANGE: (f64, f64) = (0.4, 1.2);
/// Final suboptimality must be at most this fraction of its value at u/10.
pub const FINAL_RATIO: f64 = 0.5;
const REFERENCE_GRAD_NORM: f64 = 1e-8;
const REFERENCE_MAX_ITERS: usize = 1_000_000;

/// A ranking problem that is convex in the trained parameters: item
/// embeddings are frozen and every session shares user row 0, so the stream
/// of sessions is a stream of stochastic samples of one objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexInstance {
    pub sessions: Vec<UserSession>,
    /// Starting point; its item rows are the frozen embeddings.
    pub init: ModelParams,
    pub loss: LossConfig,
}

impl ConvexInstance {
    /// `n_sessions` synthetic sessions over `n_items` uniformly drawn items,
    /// each cut right after its `blocks`-th block closes. An item is
    /// preferred with probability `sigmoid(w . V_i)` for a hidden preference
    /// vector `w`; training starts from a zero user row.
    pub fn synthetic(n_sessions: usize, dim: usize, n_items: usize, blocks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Uniform::new_inclusive(-1.0, 1.0);
        let hidden: Vec<f64> = (0..dim).map(|_| 2.0 * unit.sample(&mut rng)).collect();
        let items: Vec<f64> = (0..n_items * dim).map(|_| unit.sample(&mut rng)).collect();
        let init = ModelParams::from_parts(1, n_items, dim, vec![0.0; dim], items)
            .expect("shape is consistent by construction");

        let mut segmenter = Segmenter::new(BlockOrder::Symmetric);
        let sessions = (0..n_sessions)
            .map(|_| {
                let mut events = Vec::new();
                let mut closed = 0;
                while closed < blocks {
                    let item = rng.gen_range(0..n_items);
                    let p = sigmoid(dot(&hidden, init.item(item)));
                    let feedback = if rng.gen::<f64>() < p {
                        Feedback::Positive
                    } else {
                        Feedback::Negative
                    };
                    events.push(Event {
                        item,
                        feedback,
                        timestamp: events.len() as i64,
                    });
                    if segmenter.feed(item, feedback).is_some() {
                        closed += 1;
                    }
                }
                segmenter.finish_user();
                UserSession { user: 0, events }
            })
            .collect();
        ConvexInstance {
            sessions,
            init,
            loss: LossConfig { mu: 0.01 },
        }
    }

    /// The same session streamed `copies` times.
    pub fn repeated(session: &UserSession, copies: usize, init: ModelParams, loss: LossConfig) -> Self {
        let one = UserSession {
            user: 0,
            events: session.events.clone(),
        };
        ConvexInstance {
            sessions: vec![one; copies],
            init,
            loss,
        }
    }

    pub fn population(&self) -> Vec<UserItems> {
        UserItems::from_sessions(&self.sessions)
    }

    /// Minimizer of the population loss over the user row, by gradient
    /// descent with backtracking until the gradient norm is at most 1e-8.
    pub fn reference_optimum(&self) -> Result<(ModelParams, f64)> {
        let users = self.population();
        let mut w = self.init.clone();
        let mut step = 1.0;
        for _ in 0..REFERENCE_MAX_ITERS {
            let (loss, mut grad) = global_loss_grad(&w, &self.loss, &users)?;
            grad.drop_items();
            let gnorm2 = grad.norm_sq();
            if gnorm2.sqrt() <= REFERENCE_GRAD_NORM {
                return Ok((w, loss.loss));
            }
            step *= 2.0;
            loop {
                let mut trial = w.clone();
                grad.apply(&mut trial, step);
                let l = global_loss(&trial, &self.loss, &users)?.loss;
                if l <= loss.loss - 0.5 * step * gnorm2 {
                    w = trial;
                    break;
                }
                step *= 0.5;
                if step < 1e-20 {
                    return Err(Error::Diagnostic("reference descent stalled".into()));
                }
            }
        }
        Err(Error::Diagnostic("reference descent did not converge".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub users: usize,
    pub replicates: usize,
    pub optimum_loss: f64,
    /// `(u, mean over replicates of L(mean of the first u user-start
    /// iterates) - L*)`.
    pub curve: Vec<(usize, f64)>,
    /// Fitted `alpha` in `suboptimality ~ c * u^-alpha`.
    pub alpha: f64,
    pub constant: f64,
    pub r_squared: f64,
    /// Suboptimality at the last u divided by its value at u/10.
    pub final_ratio: f64,
    pub passes: bool,
}

/// Streams `users` sessions through the sequential trainer (item embeddings
/// frozen) and fits the decay of the averaged iterate's suboptimality. Each
/// replicate visits the sessions in its own seeded random order; the fitted
/// curve is the mean over replicates.
pub fn check_convergence_rate(
    instance: &ConvexInstance,
    cfg: &TrainerConfig,
    users: usize,
    replicates: usize,
) -> Result<ConvergenceReport> {
    if users < 10 || instance.sessions.is_empty() || replicates == 0 {
        return Err(Error::Config(
            "need at least 10 users, one replicate and a non-empty instance".into(),
        ));
    }
    let (_, optimum) = instance.reference_optimum()?;
    let population = instance.population();

    let mut mean_gap = vec![0.0; users];
    for r in 0..replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64);
        let mut order: Vec<usize> = (0..instance.sessions.len()).collect();
        let mut stream = Vec::with_capacity(users);
        while stream.len() < users {
            order.shuffle(&mut rng);
            stream.extend(order.iter().take(users - stream.len()).map(|&i| instance.sessions[i].clone()));
        }
        let gaps = suboptimality_curve(instance, cfg, &stream, &population, optimum)?;
        for (m, g) in mean_gap.iter_mut().zip(gaps) {
            *m += g / replicates as f64;
        }
    }
    let curve: Vec<(usize, f64)> = mean_gap
        .into_iter()
        .enumerate()
        .map(|(u, g)| (u + 1, g.max(f64::MIN_POSITIVE)))
        .collect();

    let x: Vec<f64> = curve.iter().map(|&(u, _)| (u as f64).ln()).collect();
    let y: Vec<f64> = curve.iter().map(|&(_, s)| s.ln()).collect();
    let (intercept, slope, r_squared) = linear_fit(&x, &y);
    let alpha = -slope;
    let last = curve[users - 1].1;
    let tenth = curve[users / 10 - 1].1;
    let final_ratio = last / tenth;
    let passes = (ALPHA_RANGE.0..=ALPHA_RANGE.1).contains(&alpha) && final_ratio <= FINAL_RATIO;
    Ok(ConvergenceReport {
        users,
        replicates,
        optimum_loss: optimum,
        curve,
        alpha,
        constant: intercept.exp(),
        r_squared,
        final_ratio,
        passes,
    })
}

/// `L(mean of the first u user-start iterates) - L*` for every prefix of
/// `stream`.
fn suboptimality_curve(
    instance: &ConvexInstance,
    cfg: &TrainerConfig,
    stream: &[UserSession],
    population: &[UserItems],
    optimum: f64,
) -> Result<Vec<f64>> {
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(stream.len());
    if cfg.eta == 0.0 {
        starts.resize(stream.len(), instance.init.user(0).to_vec());
    } else {
        let run_cfg = TrainerConfig {
            dim: instance.init.dim(),
            mu: instance.loss.mu,
            freeze_items: true,
            iterate_policy: IteratePolicy::Last,
            shuffle_users: false,
            trace_points: 0,
            time_budget: None,
            epochs: 1,
            ..cfg.clone()
        };
        saros_train_observed(instance.init.clone(), stream, &run_cfg, |p| starts.push(p.user(0).to_vec()))?;
    }

    let mut mean = instance.init.clone();
    let mut sum = vec![0.0; instance.init.dim()];
    let mut gaps = Vec::with_capacity(stream.len());
    for (u, start) in starts.iter().enumerate() {
        for (s, w) in sum.iter_mut().zip(start) {
            *s += w;
        }
        let n = (u + 1) as f64;
        for (m, s) in mean.user_mut(0).iter_mut().zip(&sum) {
            *m = s / n;
        }
        gaps.push(global_loss(&mean, &instance.loss, population)?.loss - optimum);
    }
    Ok(gaps)
}
