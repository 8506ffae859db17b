use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_sessions, TrainerConfig};
use crate::error::{Error, Result};
use crate::ingest::UserSession;
use crate::model::{dot, norm_sq, ModelParams};

/// One regression target for least-squares factorization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfExample {
    pub user: usize,
    pub item: usize,
    pub target: f64,
}

/// Positive feedback becomes target 1, negative becomes 0.
pub fn mf_targets(sessions: &[UserSession]) -> Vec<MfExample> {
    sessions
        .iter()
        .flat_map(|s| {
            s.events.iter().map(move |e| MfExample {
                user: s.user,
                item: e.item,
                target: if e.feedback.is_positive() { 1.0 } else { 0.0 },
            })
        })
        .collect()
}

/// `(y - U_u . V_i)^2 + mu (|U_u|^2 + |V_i|^2)`.
pub fn mf_point_loss(params: &ModelParams, mu: f64, ex: &MfExample) -> f64 {
    let (u, v) = (params.user(ex.user), params.item(ex.item));
    let r = ex.target - dot(u, v);
    r * r + mu * (norm_sq(u) + norm_sq(v))
}

/// Gradient of [`mf_point_loss`] as `(d/dU_u, d/dV_i)`.
pub fn mf_point_grad(params: &ModelParams, mu: f64, ex: &MfExample) -> (Vec<f64>, Vec<f64>) {
    let (u, v) = (params.user(ex.user), params.item(ex.item));
    let r = ex.target - dot(u, v);
    let gu = u.iter().zip(v).map(|(a, b)| -2.0 * r * b + 2.0 * mu * a).collect();
    let gv = u.iter().zip(v).map(|(a, b)| -2.0 * r * a + 2.0 * mu * b).collect();
    (gu, gv)
}

/// SGD over the examples, one pass per epoch. Returns the fitted parameters
/// and the summed loss measured after each epoch.
pub fn mf_fit(mut params: ModelParams, examples: &[MfExample], cfg: &TrainerConfig) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        if cfg.shuffle_users {
            order.shuffle(&mut rng);
        }
        for &k in &order {
            let ex = &examples[k];
            let (gu, gv) = mf_point_grad(&params, cfg.mu, ex);
            for (w, g) in params.user_mut(ex.user).iter_mut().zip(&gu) {
                *w -= cfg.eta * g;
            }
            if !cfg.freeze_items {
                for (w, g) in params.item_mut(ex.item).iter_mut().zip(&gv) {
                    *w -= cfg.eta * g;
                }
            }
        }
        let total: f64 = examples.iter().map(|ex| mf_point_loss(&params, cfg.mu, ex)).sum();
        if !total.is_finite() {
            return Err(Error::Config("least-squares fit diverged; reduce eta".into()));
        }
        losses.push(total);
    }
    Ok((params, losses))
}

pub fn mf_train(sessions: &[UserSession], n_users: usize, n_items: usize, cfg: &TrainerConfig) -> Result<ModelParams> {
    cfg.validate()?;
    check_sessions(sessions, n_users, n_items)?;
    let init = ModelParams::random(n_users, n_items, cfg.dim, cfg.seed);
    mf_fit(init, &mf_targets(sessions), cfg).map(|(p, _)| p)
}
