//! Ranking metrics over the held-out split.
//!
//! `AP@K` is normalized by `min(K, #relevant candidates)`. `NDCG@K` uses the
//! `(2^rel - 1) / log2(1 + i)` gain with binary relevance, normalized by the
//! ideal ordering over `min(K, #relevant)` positions. Both are 0 for a user
//! with no relevant candidate.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::UserSession;
use crate::model::{global_loss, LossConfig, ModelParams, UserItems};
use crate::optimizers::PopularityRanking;

/// Anything that assigns a ranking score to a (user, item) pair.
pub trait Scorer {
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    fn score(&self, user: usize, item: usize) -> f64;
}

impl Scorer for ModelParams {
    fn n_users(&self) -> usize {
        ModelParams::n_users(self)
    }

    fn n_items(&self) -> usize {
        ModelParams::n_items(self)
    }

    fn score(&self, user: usize, item: usize) -> f64 {
        crate::model::dot(self.user(user), self.item(item))
    }
}

/// Scores items by negated popularity rank; unseen items rank last.
pub struct PopularityScorer<'a> {
    pub ranking: &'a PopularityRanking,
    pub n_users: usize,
    pub n_items: usize,
}

impl Scorer for PopularityScorer<'_> {
    fn n_users(&self) -> usize {
        self.n_users
    }

    fn n_items(&self) -> usize {
        self.n_items
    }

    fn score(&self, _user: usize, item: usize) -> f64 {
        match self.ranking.position(item) {
            Some(r) => -(r as f64),
            None => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub user: usize,
    /// Candidates in descending score order.
    pub items: Vec<usize>,
    pub relevance: Vec<bool>,
    /// Relevant items in the whole candidate set (not just this list).
    pub n_relevant: usize,
}

impl RankedList {
    pub fn from_relevance(relevance: &[bool]) -> Self {
        RankedList {
            user: 0,
            items: (0..relevance.len()).collect(),
            relevance: relevance.to_vec(),
            n_relevant: relevance.iter().filter(|&&r| r).count(),
        }
    }
}

pub fn average_precision_at_k(ranked: &RankedList, k: usize) -> f64 {
    let denom = k.min(ranked.n_relevant);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (j, &rel) in ranked.relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (j + 1) as f64;
        }
    }
    sum / denom as f64
}

pub fn ndcg_at_k(ranked: &RankedList, k: usize) -> f64 {
    let ideal: f64 = (1..=k.min(ranked.n_relevant))
        .map(|i| 1.0 / ((1 + i) as f64).log2())
        .sum();
    if ideal == 0.0 {
        return 0.0;
    }
    let dcg: f64 = ranked
        .relevance
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &rel)| rel)
        .map(|(j, _)| 1.0 / ((j + 2) as f64).log2())
        .sum();
    dcg / ideal
}

/// Sorts candidates by descending score, ties by ascending item index.
pub fn rank_items<S: Scorer + ?Sized>(scorer: &S, user: usize, candidates: &[usize]) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = candidates.iter().map(|&i| (i, scorer.score(user, i))).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidatePolicy {
    /// Rank the items the user interacted with in the test split.
    #[default]
    TestItems,
    /// Rank every item in the catalog.
    FullCatalog,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedUsers {
    /// Test users outside the model's user index space.
    pub cold_user: usize,
    /// Test users whose candidates all fell outside the item index space.
    pub no_candidates: usize,
    /// Users excluded from the test loss (missing a positive or a negative).
    pub loss_degenerate: usize,
    /// Test items outside the model's item index space, dropped.
    pub cold_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    /// Mean held-out ranking loss; absent for scorers without embeddings or
    /// when no test user has both labels.
    pub test_loss: Option<f64>,
    pub n_users_evaluated: usize,
    pub skipped_users: SkippedUsers,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserMetric {
    pub user: usize,
    pub k: usize,
    pub ap: f64,
    pub ndcg: f64,
}

pub fn write_user_metrics<W: Write>(rows: &[UserMetric], mut out: W) -> std::io::Result<()> {
    writeln!(out, "user,K,ap,ndcg")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.user, r.k, r.ap, r.ndcg)?;
    }
    Ok(())
}

/// Ranks each test user's candidates and averages AP@K and NDCG@K uniformly
/// over evaluated users. When `loss` is given, the held-out ranking loss is
/// computed with the scorer's embeddings.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    test: &[UserSession],
    ks: &[usize],
    policy: CandidatePolicy,
    loss: Option<(&ModelParams, &LossConfig)>,
) -> Result<(EvalReport, Vec<UserMetric>)> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("cutoffs must be non-empty and >= 1".into()));
    }
    let ks: BTreeSet<usize> = ks.iter().copied().collect();
    let mut skipped = SkippedUsers::default();
    let mut sums: BTreeMap<usize, (f64, f64)> = ks.iter().map(|&k| (k, (0.0, 0.0))).collect();
    let mut rows = Vec::new();
    let mut evaluated = 0usize;
    let mut loss_users = Vec::new();

    for session in test {
        if session.user >= scorer.n_users() {
            skipped.cold_user += 1;
            continue;
        }
        let mut relevant = BTreeSet::new();
        let mut seen = BTreeSet::new();
        let mut warm = UserItems {
            user: session.user,
            positives: Vec::new(),
            negatives: Vec::new(),
        };
        for e in &session.events {
            if e.item >= scorer.n_items() {
                skipped.cold_items += 1;
                continue;
            }
            seen.insert(e.item);
            if e.feedback.is_positive() {
                relevant.insert(e.item);
                warm.positives.push(e.item);
            } else {
                warm.negatives.push(e.item);
            }
        }
        let candidates: Vec<usize> = match policy {
            CandidatePolicy::TestItems => seen.into_iter().collect(),
            CandidatePolicy::FullCatalog => (0..scorer.n_items()).collect(),
        };
        if candidates.is_empty() {
            skipped.no_candidates += 1;
            continue;
        }
        loss_users.push(warm);

        let order = rank_items(scorer, session.user, &candidates);
        let max_k = *ks.iter().next_back().unwrap();
        let top: Vec<usize> = order.into_iter().take(max_k).collect();
        let ranked = RankedList {
            user: session.user,
            relevance: top.iter().map(|i| relevant.contains(i)).collect(),
            items: top,
            n_relevant: relevant.len(),
        };
        for &k in &ks {
            let ap = average_precision_at_k(&ranked, k);
            let ndcg = ndcg_at_k(&ranked, k);
            let entry = sums.get_mut(&k).unwrap();
            entry.0 += ap;
            entry.1 += ndcg;
            rows.push(UserMetric {
                user: session.user,
                k,
                ap,
                ndcg,
            });
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::NoQualifyingUser("no evaluable test user".into()));
    }

    let test_loss = match loss {
        Some((params, cfg)) => match global_loss(params, cfg, &loss_users) {
            Ok(g) => {
                skipped.loss_degenerate = g.skipped;
                Some(g.loss)
            }
            Err(_) => {
                skipped.loss_degenerate = loss_users.len();
                None
            }
        },
        None => None,
    };
    let n = evaluated as f64;
    Ok((
        EvalReport {
            map_at: sums.iter().map(|(&k, &(ap, _))| (k, ap / n)).collect(),
            ndcg_at: sums.iter().map(|(&k, &(_, nd))| (k, nd / n)).collect(),
            test_loss,
            n_users_evaluated: evaluated,
            skipped_users: skipped,
        },
        rows,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Event, Feedback};
    use proptest::prelude::*;

    fn rl(bits: &[u8], n_relevant: usize) -> RankedList {
        RankedList {
            n_relevant,
            ..RankedList::from_relevance(&bits.iter().map(|&b| b == 1).collect::<Vec<_>>())
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision_at_k(&rl(&[1, 1, 1], 3), 3), 1.0);
        assert_eq!(average_precision_at_k(&rl(&[0, 0, 0], 0), 3), 0.0);
        let v = average_precision_at_k(&rl(&[0, 1, 1], 2), 3);
        assert!((v - 0.5 * (0.5 + 2.0 / 3.0)).abs() < 1e-15);
        assert!((v - 0.58333).abs() < 1e-5);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&rl(&[1], 1), 1), 1.0);
        let v = ndcg_at_k(&rl(&[0, 1], 1), 2);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.63093).abs() < 1e-5);
        assert_eq!(ndcg_at_k(&rl(&[0, 0], 0), 2), 0.0);
    }

    fn test_session(items: &[(usize, bool)]) -> UserSession {
        UserSession {
            user: 0,
            events: items
                .iter()
                .map(|&(item, pos)| Event {
                    item,
                    feedback: if pos { Feedback::Positive } else { Feedback::Negative },
                    timestamp: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn oracle_scores_are_perfect() {
        // user vector (1), item scores equal to relevance
        let params = ModelParams::from_parts(1, 4, 1, vec![1.0], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = test_session(&[(0, false), (1, true), (2, false), (3, true)]);
        let (report, rows) = evaluate(&params, &[s], &[1, 2, 4], CandidatePolicy::TestItems, None).unwrap();
        assert!(report.map_at.values().all(|&v| v == 1.0));
        assert!(report.ndcg_at.values().all(|&v| v == 1.0));
        assert_eq!(rows.len(), 3);
    }

    #[test]
    fn ties_are_deterministic() {
        let params = ModelParams::zeros(1, 5, 2);
        let s = test_session(&[(4, true), (0, false), (2, true)]);
        let a = evaluate(&params, &[s.clone()], &[2], CandidatePolicy::TestItems, None).unwrap();
        let b = evaluate(&params, &[s], &[2], CandidatePolicy::TestItems, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(rank_items(&params, 0, &[4, 0, 2]), vec![0, 2, 4]);
    }

    #[test]
    fn user_without_positive_counts_as_zero() {
        let params = ModelParams::from_parts(2, 3, 1, vec![1.0, 1.0], vec![1.0, 0.5, 0.0]).unwrap();
        let good = test_session(&[(0, true), (1, false)]);
        let none = UserSession { user: 1, ..test_session(&[(2, false)]) };
        let (report, _) = evaluate(&params, &[good, none], &[1], CandidatePolicy::TestItems, None).unwrap();
        assert_eq!(report.map_at[&1], 0.5);
        assert_eq!(report.n_users_evaluated, 2);
    }

    #[test]
    fn cold_users_are_skipped_and_empty_is_error() {
        let params = ModelParams::zeros(1, 2, 1);
        let cold = UserSession { user: 5, ..test_session(&[(0, true)]) };
        assert!(evaluate(&params, &[cold.clone()], &[1], CandidatePolicy::TestItems, None).is_err());
        let ok = test_session(&[(0, true), (1, false)]);
        let (report, _) = evaluate(&params, &[cold, ok], &[1], CandidatePolicy::TestItems, None).unwrap();
        assert_eq!(report.skipped_users.cold_user, 1);
    }

    #[test]
    fn test_loss_uses_global_loss() {
        let params = ModelParams::zeros(1, 3, 2);
        let cfg = LossConfig::new(0.0).unwrap();
        let s = test_session(&[(0, true), (1, false), (2, false)]);
        let (report, _) = evaluate(&params, &[s], &[2], CandidatePolicy::FullCatalog, Some((&params, &cfg))).unwrap();
        assert!((report.test_loss.unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transform(
            raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 1..10),
            k in 1usize..12,
        ) {
            let n = raw.len();
            let items: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let cubed: Vec<f64> = items.iter().map(|x| x * x * x + 2.0 * x).collect();
            let s = test_session(&raw.iter().enumerate().map(|(i, r)| (i, r.1)).collect::<Vec<_>>());
            let a = ModelParams::from_parts(1, n, 1, vec![1.0], items).unwrap();
            let b = ModelParams::from_parts(1, n, 1, vec![1.0], cubed).unwrap();
            let ra = evaluate(&a, &[s.clone()], &[k], CandidatePolicy::TestItems, None).unwrap().0;
            let rb = evaluate(&b, &[s], &[k], CandidatePolicy::TestItems, None).unwrap().0;
            prop_assert_eq!(ra.map_at, rb.map_at);
            prop_assert_eq!(ra.ndcg_at, rb.ndcg_at);
        }

        #[test]
        fn metrics_in_unit_interval(bits in prop::collection::vec(any::<bool>(), 0..12), extra in 0usize..3, k in 1usize..14) {
            let mut list = RankedList::from_relevance(&bits);
            list.n_relevant += extra;
            let (ap, nd) = (average_precision_at_k(&list, k), ndcg_at_k(&list, k));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&nd));
            let n_rel = list.n_relevant;
            let perfect = n_rel > 0 && extra == 0
                && bits.iter().take(k.min(n_rel)).all(|&b| b);
            if perfect {
                prop_assert!((ap - 1.0).abs() < 1e-12 && (nd - 1.0).abs() < 1e-12);
            }
        }
    }
}
