//! User/item embeddings and the regularized logistic pairwise loss.
//!
//! For a user `u`, a preferred item `i` and a non-preferred item `j` the
//! instantaneous loss is
//!
//! ```text
//! softplus(-U_u . (V_i - V_j)) + mu * (|U_u|^2 + |V_i|^2 + |V_j|^2)
//! ```
//!
//! Block, user and global losses are plain averages of it over pairs (and
//! over users for the global loss).

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Block;
use crate::error::{Error, Result};
use crate::ingest::UserSession;

pub mod checkpoint;

/// The weight pair `(U, V)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dim: usize,
    n_users: usize,
    n_items: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be at least 1");
        ModelParams {
            dim,
            n_users,
            n_items,
            users: vec![0.0; n_users * dim],
            items: vec![0.0; n_items * dim],
        }
    }

    /// Entries i.i.d. uniform in `[-1/sqrt(k), 1/sqrt(k)]`.
    pub fn random(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Self {
        let mut params = Self::zeros(n_users, n_items, dim);
        let bound = 1.0 / (dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in params.users.iter_mut().chain(params.items.iter_mut()) {
            *w = dist.sample(&mut rng);
        }
        params
    }

    pub fn from_parts(
        n_users: usize,
        n_items: usize,
        dim: usize,
        users: Vec<f64>,
        items: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 || users.len() != n_users * dim || items.len() != n_items * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {n_users}x{dim} users and {n_items}x{dim} items, got {} and {} values",
                users.len(),
                items.len()
            )));
        }
        Ok(ModelParams {
            dim,
            n_users,
            n_items,
            users,
            items,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub fn user_mut(&mut self, u: usize) -> &mut [f64] {
        &mut self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub fn user_matrix(&self) -> &[f64] {
        &self.users
    }

    pub fn item_matrix(&self) -> &[f64] {
        &self.items
    }

    /// All weights, users first, as one flat slice pair.
    pub fn weights_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.users.iter_mut().chain(self.items.iter_mut())
    }

    pub fn weights(&self) -> impl Iterator<Item = &f64> {
        self.users.iter().chain(self.items.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.weights().all(|w| w.is_finite())
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.dim == other.dim && self.n_users == other.n_users && self.n_items == other.n_items
    }

    pub fn shape_string(&self) -> String {
        format!(
            "{} users x {} items x dim {}",
            self.n_users, self.n_items, self.dim
        )
    }

    pub fn check_user(&self, u: usize) -> Result<()> {
        if u < self.n_users {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                kind: "user",
                index: u,
                size: self.n_users,
            })
        }
    }

    pub fn check_item(&self, i: usize) -> Result<()> {
        if i < self.n_items {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                kind: "item",
                index: i,
                size: self.n_items,
            })
        }
    }

    /// `U_u . V_i`.
    pub fn score(&self, u: usize, i: usize) -> Result<f64> {
        self.check_user(u)?;
        self.check_item(i)?;
        Ok(dot(self.user(u), self.item(i)))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1 / (1 + e^-x)` without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mu: f64,
}

impl LossConfig {
    pub fn new(mu: f64) -> Result<Self> {
        if mu >= 0.0 && mu.is_finite() {
            Ok(LossConfig { mu })
        } else {
            Err(Error::Config(format!("mu must be finite and >= 0, got {mu}")))
        }
    }
}

/// Pair loss with an explicit label: `y = +1` when `first` is preferred over
/// `second`, `y = -1` for the reverse.
pub fn labeled_pair_loss(
    params: &ModelParams,
    cfg: &LossConfig,
    user: usize,
    first: usize,
    second: usize,
    y: f64,
) -> f64 {
    let (u, vi, vj) = (params.user(user), params.item(first), params.item(second));
    let margin: f64 = u.iter().zip(vi.iter().zip(vj)).map(|(a, (b, c))| a * (b - c)).sum();
    softplus(-y * margin) + cfg.mu * (norm_sq(u) + norm_sq(vi) + norm_sq(vj))
}

pub fn pair_loss(params: &ModelParams, cfg: &LossConfig, user: usize, pos: usize, neg: usize) -> f64 {
    labeled_pair_loss(params, cfg, user, pos, neg, 1.0)
}

/// Gradient restricted to the user and item rows it touches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    dim: usize,
    pub users: BTreeMap<usize, Vec<f64>>,
    pub items: BTreeMap<usize, Vec<f64>>,
}

impl SparseGrad {
    pub fn new(dim: usize) -> Self {
        SparseGrad {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.items.is_empty()
    }

    pub fn clear(&mut self) {
        self.users.clear();
        self.items.clear();
    }

    fn user_row(&mut self, u: usize) -> &mut Vec<f64> {
        let dim = self.dim;
        self.users.entry(u).or_insert_with(|| vec![0.0; dim])
    }

    fn item_row(&mut self, i: usize) -> &mut Vec<f64> {
        let dim = self.dim;
        self.items.entry(i).or_insert_with(|| vec![0.0; dim])
    }

    /// Adds `weight * grad pair_loss(user, pos, neg)` and returns the pair
    /// loss at the current parameters.
    pub fn add_pair(
        &mut self,
        params: &ModelParams,
        cfg: &LossConfig,
        user: usize,
        pos: usize,
        neg: usize,
        weight: f64,
    ) -> f64 {
        let (u, vp, vn) = (params.user(user), params.item(pos), params.item(neg));
        let margin: f64 = u.iter().zip(vp.iter().zip(vn)).map(|(a, (b, c))| a * (b - c)).sum();
        // d/dmargin softplus(-margin) = -sigmoid(-margin)
        let s = sigmoid(-margin);
        let two_mu = 2.0 * cfg.mu;

        let gu = self.user_row(user);
        for d in 0..u.len() {
            gu[d] += weight * (-s * (vp[d] - vn[d]) + two_mu * u[d]);
        }
        let gp = self.item_row(pos);
        for d in 0..u.len() {
            gp[d] += weight * (-s * u[d] + two_mu * vp[d]);
        }
        let gn = self.item_row(neg);
        for d in 0..u.len() {
            gn[d] += weight * (s * u[d] + two_mu * vn[d]);
        }
        softplus(-margin) + cfg.mu * (norm_sq(u) + norm_sq(vp) + norm_sq(vn))
    }

    /// Accumulates `weight * other`.
    pub fn add_scaled(&mut self, other: &SparseGrad, weight: f64) {
        for (&u, row) in &other.users {
            let dst = self.user_row(u);
            for (d, g) in dst.iter_mut().zip(row) {
                *d += weight * g;
            }
        }
        for (&i, row) in &other.items {
            let dst = self.item_row(i);
            for (d, g) in dst.iter_mut().zip(row) {
                *d += weight * g;
            }
        }
    }

    pub fn drop_items(&mut self) {
        self.items.clear();
    }

    /// `params -= eta * self`.
    pub fn apply(&self, params: &mut ModelParams, eta: f64) {
        for (&u, row) in &self.users {
            for (w, g) in params.user_mut(u).iter_mut().zip(row) {
                *w -= eta * g;
            }
        }
        for (&i, row) in &self.items {
            for (w, g) in params.item_mut(i).iter_mut().zip(row) {
                *w -= eta * g;
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.users
            .values()
            .chain(self.items.values())
            .map(|r| norm_sq(r))
            .sum()
    }

    /// Dense layout matching [`ModelParams::weights`]: users then items.
    pub fn to_dense(&self, n_users: usize, n_items: usize) -> Vec<f64> {
        let mut out = vec![0.0; (n_users + n_items) * self.dim];
        for (&u, row) in &self.users {
            out[u * self.dim..(u + 1) * self.dim].copy_from_slice(row);
        }
        let base = n_users * self.dim;
        for (&i, row) in &self.items {
            out[base + i * self.dim..base + (i + 1) * self.dim].copy_from_slice(row);
        }
        out
    }
}

pub fn pair_grad(params: &ModelParams, cfg: &LossConfig, user: usize, pos: usize, neg: usize) -> SparseGrad {
    let mut g = SparseGrad::new(params.dim());
    g.add_pair(params, cfg, user, pos, neg, 1.0);
    g
}

/// Mean pair loss and its gradient over `positives x negatives`. Callers
/// guarantee both lists are non-empty.
fn averaged_pairs(
    params: &ModelParams,
    cfg: &LossConfig,
    user: usize,
    positives: &[usize],
    negatives: &[usize],
    grad: Option<&mut SparseGrad>,
) -> f64 {
    let weight = 1.0 / (positives.len() * negatives.len()) as f64;
    let mut total = 0.0;
    match grad {
        Some(g) => {
            for &p in positives {
                for &n in negatives {
                    total += g.add_pair(params, cfg, user, p, n, weight);
                }
            }
        }
        None => {
            for &p in positives {
                for &n in negatives {
                    total += pair_loss(params, cfg, user, p, n);
                }
            }
        }
    }
    total * weight
}

pub fn block_loss(params: &ModelParams, cfg: &LossConfig, user: usize, block: &Block) -> f64 {
    averaged_pairs(params, cfg, user, &block.positives, &block.negatives, None)
}

/// Block loss plus its gradient accumulated into `grad`.
pub fn block_loss_grad(
    params: &ModelParams,
    cfg: &LossConfig,
    user: usize,
    block: &Block,
    grad: &mut SparseGrad,
) -> f64 {
    averaged_pairs(params, cfg, user, &block.positives, &block.negatives, Some(grad))
}

pub fn user_loss(
    params: &ModelParams,
    cfg: &LossConfig,
    user: usize,
    positives: &[usize],
    negatives: &[usize],
) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::DegenerateUser(user));
    }
    Ok(averaged_pairs(params, cfg, user, positives, negatives, None))
}

pub fn user_loss_grad(
    params: &ModelParams,
    cfg: &LossConfig,
    user: usize,
    positives: &[usize],
    negatives: &[usize],
    grad: &mut SparseGrad,
) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::DegenerateUser(user));
    }
    Ok(averaged_pairs(params, cfg, user, positives, negatives, Some(grad)))
}

/// A user's preferred and non-preferred items over some split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserItems {
    pub user: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl UserItems {
    pub fn from_session(s: &UserSession) -> Self {
        UserItems {
            user: s.user,
            positives: s.positives(),
            negatives: s.negatives(),
        }
    }

    pub fn from_sessions(sessions: &[UserSession]) -> Vec<Self> {
        sessions.iter().map(Self::from_session).collect()
    }

    pub fn qualifies(&self) -> bool {
        !self.positives.is_empty() && !self.negatives.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalLoss {
    pub loss: f64,
    pub evaluated: usize,
    /// Users lacking either a positive or a negative item.
    pub skipped: usize,
}

/// Uniform mean of the per-user losses over qualifying users.
pub fn global_loss(params: &ModelParams, cfg: &LossConfig, users: &[UserItems]) -> Result<GlobalLoss> {
    let mut sum = 0.0;
    let mut evaluated = 0;
    for u in users.iter().filter(|u| u.qualifies()) {
        sum += user_loss(params, cfg, u.user, &u.positives, &u.negatives)?;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::NoQualifyingUser(
            "every user lacks a positive or a negative item".into(),
        ));
    }
    Ok(GlobalLoss {
        loss: sum / evaluated as f64,
        evaluated,
        skipped: users.len() - evaluated,
    })
}

/// Global loss and its full gradient.
pub fn global_loss_grad(
    params: &ModelParams,
    cfg: &LossConfig,
    users: &[UserItems],
) -> Result<(GlobalLoss, SparseGrad)> {
    let qualifying: Vec<&UserItems> = users.iter().filter(|u| u.qualifies()).collect();
    if qualifying.is_empty() {
        return Err(Error::NoQualifyingUser(
            "every user lacks a positive or a negative item".into(),
        ));
    }
    let user_weight = 1.0 / qualifying.len() as f64;
    let mut grad = SparseGrad::new(params.dim());
    let mut scratch = SparseGrad::new(params.dim());
    let mut sum = 0.0;
    for u in &qualifying {
        scratch.clear();
        sum += user_loss_grad(params, cfg, u.user, &u.positives, &u.negatives, &mut scratch)?;
        grad.add_scaled(&scratch, user_weight);
    }
    Ok((
        GlobalLoss {
            loss: sum * user_weight,
            evaluated: qualifying.len(),
            skipped: users.len() - qualifying.len(),
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Feedback;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn params_from(users: &[&[f64]], items: &[&[f64]]) -> ModelParams {
        let dim = users[0].len();
        ModelParams::from_parts(
            users.len(),
            items.len(),
            dim,
            users.concat(),
            items.concat(),
        )
        .unwrap()
    }

    fn block(pos: &[usize], neg: &[usize]) -> Block {
        Block {
            negatives: neg.to_vec(),
            positives: pos.to_vec(),
            ordinal: 1,
            closed_by: Feedback::Positive,
        }
    }

    #[test]
    fn score_examples() {
        let p = params_from(&[&[0.0, 0.0], &[1.0, 0.0], &[1.0, 2.0]], &[&[1.0, 0.0], &[3.0, -1.0]]);
        assert_eq!(p.score(0, 1).unwrap(), 0.0);
        assert_eq!(p.score(1, 0).unwrap(), 1.0);
        assert_eq!(p.score(2, 1).unwrap(), 1.0);
        assert!(matches!(p.score(3, 0), Err(Error::OutOfRange { kind: "user", .. })));
        assert!(matches!(p.score(0, 2), Err(Error::OutOfRange { kind: "item", .. })));
    }

    #[test]
    fn pair_loss_examples() {
        let zero = ModelParams::zeros(1, 2, 3);
        let cfg0 = LossConfig::new(0.0).unwrap();
        assert!((pair_loss(&zero, &cfg0, 0, 0, 1) - LN2).abs() < 1e-15);

        let p = params_from(&[&[1.0, 0.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = LossConfig::new(0.1).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln() + 0.3;
        assert!((pair_loss(&p, &cfg, 0, 0, 1) - expected).abs() < 1e-15);
        assert!((pair_loss(&p, &cfg, 0, 0, 1) - 0.613262).abs() < 1e-6);

        let far = params_from(&[&[1e6, 0.0]], &[&[1e6, 0.0], &[0.0, 0.0]]);
        let l = pair_loss(&far, &cfg0, 0, 0, 1);
        assert!(l >= 0.0 && l < 1e-300);
        let wrong = pair_loss(&far, &cfg0, 0, 1, 0);
        assert!((wrong - 1e12).abs() / 1e12 < 1e-12);
    }

    #[test]
    fn zero_params_give_zero_gradient() {
        let zero = ModelParams::zeros(1, 2, 3);
        let g = pair_grad(&zero, &LossConfig::new(0.0).unwrap(), 0, 0, 1);
        assert_eq!(g.norm_sq(), 0.0);
    }

    #[test]
    fn regularizer_part_is_two_mu_row() {
        let p = ModelParams::random(1, 2, 3, 9);
        let g0 = pair_grad(&p, &LossConfig::new(0.0).unwrap(), 0, 0, 1);
        let g1 = pair_grad(&p, &LossConfig::new(0.25).unwrap(), 0, 0, 1);
        for d in 0..3 {
            assert!((g1.users[&0][d] - g0.users[&0][d] - 0.5 * p.user(0)[d]).abs() < 1e-15);
            assert!((g1.items[&1][d] - g0.items[&1][d] - 0.5 * p.item(1)[d]).abs() < 1e-15);
        }
    }

    #[test]
    fn block_and_user_loss_examples() {
        let p = ModelParams::random(1, 5, 3, 3);
        let cfg = LossConfig::new(0.05).unwrap();
        assert_eq!(block_loss(&p, &cfg, 0, &block(&[1], &[2])), pair_loss(&p, &cfg, 0, 1, 2));
        assert_eq!(user_loss(&p, &cfg, 0, &[1], &[2]).unwrap(), pair_loss(&p, &cfg, 0, 1, 2));

        let zero = ModelParams::zeros(1, 5, 3);
        let cfg0 = LossConfig::new(0.0).unwrap();
        assert!((block_loss(&zero, &cfg0, 0, &block(&[0, 1], &[2, 3, 4])) - LN2).abs() < 1e-15);
        assert!((user_loss(&zero, &cfg0, 0, &[0], &[2, 3]).unwrap() - LN2).abs() < 1e-15);

        let b = block(&[0, 1], &[2, 3, 4]);
        let mut brute = 0.0;
        for &i in &b.positives {
            for &j in &b.negatives {
                brute += pair_loss(&p, &cfg, 0, i, j);
            }
        }
        assert!((block_loss(&p, &cfg, 0, &b) - brute / 6.0).abs() < 1e-14);
        assert!(matches!(user_loss(&p, &cfg, 0, &[], &[1]), Err(Error::DegenerateUser(0))));
    }

    #[test]
    fn global_loss_means_over_users() {
        let p = ModelParams::random(3, 4, 2, 1);
        let cfg = LossConfig::new(0.01).unwrap();
        let users = vec![
            UserItems { user: 0, positives: vec![0], negatives: vec![1, 2] },
            UserItems { user: 1, positives: vec![3], negatives: vec![] },
            UserItems { user: 2, positives: vec![1, 2], negatives: vec![3] },
        ];
        let a = user_loss(&p, &cfg, 0, &[0], &[1, 2]).unwrap();
        let b = user_loss(&p, &cfg, 2, &[1, 2], &[3]).unwrap();
        let g = global_loss(&p, &cfg, &users).unwrap();
        assert!((g.loss - (a + b) / 2.0).abs() < 1e-15);
        assert_eq!((g.evaluated, g.skipped), (2, 1));
        assert_eq!(global_loss(&p, &cfg, &users[..1]).unwrap().loss, a);
        assert!(global_loss(&p, &cfg, &users[1..2]).is_err());
    }

    #[test]
    fn random_init_is_seeded_and_bounded() {
        let a = ModelParams::random(4, 6, 9, 42);
        assert_eq!(a, ModelParams::random(4, 6, 9, 42));
        assert_ne!(a, ModelParams::random(4, 6, 9, 43));
        assert!(a.weights().all(|w| w.abs() <= 1.0 / 3.0));
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(seed in any::<u64>(), mu in 0.0f64..2.0, scale in 0.1f64..20.0) {
            let mut p = ModelParams::random(2, 4, 3, seed);
            p.weights_mut().for_each(|w| *w *= scale);
            let cfg = LossConfig::new(mu).unwrap();
            prop_assert!(pair_loss(&p, &cfg, 1, 0, 3) >= 0.0);
            prop_assert!(block_loss(&p, &cfg, 0, &block(&[0, 1], &[2, 3])) >= 0.0);
        }

        #[test]
        fn pair_term_antisymmetric(seed in any::<u64>(), mu in 0.0f64..1.0) {
            let p = ModelParams::random(1, 3, 4, seed);
            let cfg = LossConfig::new(mu).unwrap();
            let a = labeled_pair_loss(&p, &cfg, 0, 0, 2, 1.0);
            let b = labeled_pair_loss(&p, &cfg, 0, 2, 0, -1.0);
            prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }

        #[test]
        fn block_loss_is_user_loss_on_block_sets(seed in any::<u64>()) {
            let p = ModelParams::random(1, 6, 3, seed);
            let cfg = LossConfig::new(0.1).unwrap();
            let b = block(&[4, 1], &[0, 2, 5]);
            prop_assert_eq!(block_loss(&p, &cfg, 0, &b), user_loss(&p, &cfg, 0, &b.positives, &b.negatives).unwrap());
        }

        #[test]
        fn score_bilinear_and_rank_invariant(seed in any::<u64>(), alpha in 0.01f64..50.0) {
            let p = ModelParams::random(1, 8, 3, seed);
            let mut q = p.clone();
            q.user_mut(0).iter_mut().for_each(|w| *w *= alpha);
            let rank = |m: &ModelParams| {
                let mut idx: Vec<usize> = (0..8).collect();
                idx.sort_by(|&a, &b| m.score(0, b).unwrap().total_cmp(&m.score(0, a).unwrap()).then(a.cmp(&b)));
                idx
            };
            for i in 0..8 {
                let (s, t) = (p.score(0, i).unwrap(), q.score(0, i).unwrap());
                prop_assert!((t - alpha * s).abs() <= 1e-12 * (1.0 + t.abs()));
            }
            prop_assert_eq!(rank(&p), rank(&q));
        }
    }
}
