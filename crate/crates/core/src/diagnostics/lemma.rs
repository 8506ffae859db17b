use serde::{Deserialize, Serialize};

use super::{linear_fit, population_gradient, SyntheticUserModel, Welford};
use crate::blocks::{segment_with_remainder, BlockOrder, Segmenter};
use crate::error::{Error, Result};
use crate::ingest::Feedback;
use crate::model::{block_loss_grad, user_loss_grad, LossConfig, ModelParams, SparseGrad};

const MAX_RESAMPLES: usize = 10_000;
/// Deviations are accepted within this many standard errors.
pub const UNBIASEDNESS_SE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub monte_carlo_runs: usize,
    /// Mean over runs of the block-averaged gradient.
    pub mean_block_gradient: Vec<f64>,
    /// Mean over runs of the whole-sequence gradient.
    pub reference_gradient: Vec<f64>,
    /// Exact expectation of a single pair gradient under the model.
    pub population_gradient: Vec<f64>,
    pub max_deviation: f64,
    /// Standard error of the paired difference at the worst coordinate.
    pub standard_error: f64,
    /// Largest |deviation| / standard error over coordinates.
    pub max_z: f64,
    pub within_tolerance: bool,
    /// Sequences redrawn because they produced no block.
    pub resampled: usize,
}

/// Gradient of `(1/k) sum_l L_block_l` and of the whole-sequence user loss
/// for one labelled sequence of user `user`; `None` if no block forms.
pub fn block_and_full_gradients(
    params: &ModelParams,
    cfg: &LossConfig,
    user: usize,
    events: &[(usize, Feedback)],
) -> Option<(SparseGrad, SparseGrad)> {
    let (blocks, _) = segment_with_remainder(events, BlockOrder::Symmetric);
    if blocks.is_empty() {
        return None;
    }
    let mut per_block = SparseGrad::new(params.dim());
    let mut block_sum = SparseGrad::new(params.dim());
    for b in &blocks {
        per_block.clear();
        block_loss_grad(params, cfg, user, b, &mut per_block);
        block_sum.add_scaled(&per_block, 1.0);
    }
    let mut block_avg = SparseGrad::new(params.dim());
    block_avg.add_scaled(&block_sum, 1.0 / blocks.len() as f64);

    let pos: Vec<usize> = events.iter().filter(|e| e.1.is_positive()).map(|e| e.0).collect();
    let neg: Vec<usize> = events.iter().filter(|e| !e.1.is_positive()).map(|e| e.0).collect();
    let mut full = SparseGrad::new(params.dim());
    user_loss_grad(params, cfg, user, &pos, &neg, &mut full).ok()?;
    Some((block_avg, full))
}

/// Monte-Carlo check that the block-averaged gradient and the whole-sequence
/// gradient share the same expectation. `params` must have at least one user;
/// row 0 is used.
pub fn check_lemma1_unbiasedness(
    model: &SyntheticUserModel,
    params: &ModelParams,
    cfg: &LossConfig,
    runs: usize,
) -> Result<UnbiasednessReport> {
    if runs < 2 {
        return Err(Error::Config("at least two runs are needed for a standard error".into()));
    }
    check_shape(model, params)?;
    let sampler = model.sampler()?;
    let (n_users, n_items) = (params.n_users(), params.n_items());
    let dim = (n_users + n_items) * params.dim();

    let mut diff = Welford::new(dim);
    let mut blocks_mean = Welford::new(dim);
    let mut full_mean = Welford::new(dim);
    let mut resampled = 0;
    let mut d = vec![0.0; dim];

    for run in 0..runs {
        let mut rng = model.rng(run as u64);
        let mut attempts = 0;
        let (block_avg, full) = loop {
            let seq = sampler.sequence(&mut rng);
            if let Some(pair) = block_and_full_gradients(params, cfg, 0, &seq) {
                break pair;
            }
            attempts += 1;
            resampled += 1;
            if attempts >= MAX_RESAMPLES {
                return Err(Error::Diagnostic("model never produced a block".into()));
            }
        };
        let b = block_avg.to_dense(n_users, n_items);
        let f = full.to_dense(n_users, n_items);
        for ((x, y), z) in b.iter().zip(&f).zip(d.iter_mut()) {
            *z = x - y;
        }
        diff.push(&d);
        blocks_mean.push(&b);
        full_mean.push(&f);
    }

    let se = diff.std_error();
    let mut max_deviation = 0.0f64;
    let mut worst_se = 0.0;
    let mut max_z = 0.0f64;
    let mut within = true;
    for (m, s) in diff.mean().iter().zip(&se) {
        let dev = m.abs();
        if dev > max_deviation {
            max_deviation = dev;
            worst_se = *s;
        }
        if *s > 0.0 {
            max_z = max_z.max(dev / s);
            within &= dev <= UNBIASEDNESS_SE * s;
        } else {
            within &= dev <= 1e-12;
        }
    }

    Ok(UnbiasednessReport {
        monte_carlo_runs: runs,
        mean_block_gradient: blocks_mean.mean().to_vec(),
        reference_gradient: full_mean.mean().to_vec(),
        population_gradient: population_gradient(model, params, cfg, 0)?,
        max_deviation,
        standard_error: worst_se,
        max_z,
        within_tolerance: within,
        resampled,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariancePoint {
    pub k: usize,
    /// Mean squared distance between the k-block average gradient and the
    /// exact expected gradient.
    pub variance: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecayReport {
    pub runs_per_k: usize,
    pub rows: Vec<VariancePoint>,
    /// Log-log slope of variance against k; absent when every variance is 0.
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
    pub non_increasing: bool,
    pub passes: bool,
}

pub const MAX_SLOPE: f64 = -0.8;
pub const MIN_R_SQUARED: f64 = 0.9;

/// For each k, streams synthetic events until k blocks have formed and
/// measures the squared error of their averaged gradient against the exact
/// expectation.
pub fn check_variance_decay(
    model: &SyntheticUserModel,
    params: &ModelParams,
    cfg: &LossConfig,
    k_values: &[usize],
    runs_per_k: usize,
) -> Result<VarianceDecayReport> {
    if k_values.len() < 2 || k_values.contains(&0) || runs_per_k < 2 {
        return Err(Error::Config("need at least two k >= 1 and two runs per k".into()));
    }
    check_shape(model, params)?;
    let sampler = model.sampler()?;
    let target = population_gradient(model, params, cfg, 0)?;
    let (n_users, n_items) = (params.n_users(), params.n_items());

    let mut rows = Vec::with_capacity(k_values.len());
    let mut block = SparseGrad::new(params.dim());
    let mut sum = SparseGrad::new(params.dim());
    for (ki, &k) in k_values.iter().enumerate() {
        let mut stats = Welford::new(1);
        for run in 0..runs_per_k {
            let mut rng = model.rng(((ki as u64 + 1) << 40) | run as u64);
            let mut seg = Segmenter::new(BlockOrder::Symmetric);
            sum.clear();
            let mut formed = 0;
            while formed < k {
                let (item, fb) = sampler.event(&mut rng);
                if let Some(b) = seg.feed(item, fb) {
                    block.clear();
                    block_loss_grad(params, cfg, 0, &b, &mut block);
                    sum.add_scaled(&block, 1.0);
                    formed += 1;
                }
            }
            let avg = sum.to_dense(n_users, n_items);
            let sq: f64 = avg
                .iter()
                .zip(&target)
                .map(|(a, t)| {
                    let e = a / k as f64 - t;
                    e * e
                })
                .sum();
            stats.push(&[sq]);
        }
        rows.push(VariancePoint {
            k,
            variance: stats.mean()[0],
            std_error: stats.std_error()[0],
        });
    }

    let non_increasing = rows
        .windows(2)
        .all(|w| w[1].variance <= w[0].variance + 3.0 * (w[0].std_error + w[1].std_error));
    if rows.iter().all(|r| r.variance == 0.0) {
        return Ok(VarianceDecayReport {
            runs_per_k,
            rows,
            slope: None,
            r_squared: None,
            non_increasing: true,
            passes: true,
        });
    }
    if rows.iter().any(|r| r.variance <= 0.0) {
        return Ok(VarianceDecayReport {
            runs_per_k,
            rows,
            slope: None,
            r_squared: None,
            non_increasing,
            passes: false,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| (r.k as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.variance.ln()).collect();
    let (_, slope, r2) = linear_fit(&x, &y);
    Ok(VarianceDecayReport {
        runs_per_k,
        rows,
        slope: Some(slope),
        r_squared: Some(r2),
        non_increasing,
        passes: non_increasing && slope <= MAX_SLOPE && r2 >= MIN_R_SQUARED,
    })
}

fn check_shape(model: &SyntheticUserModel, params: &ModelParams) -> Result<()> {
    if params.n_users() == 0 || params.n_items() != model.n_items() {
        return Err(Error::ShapeMismatch(format!(
            "synthetic model has {} items, parameters are {}",
            model.n_items(),
            params.shape_string()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::pair_grad;

    /// Explicit double loop over pairs, independent of the averaging helpers.
    fn oracle_mean_grad(params: &ModelParams, cfg: &LossConfig, pos: &[usize], neg: &[usize]) -> Vec<f64> {
        let n = (params.n_users() + params.n_items()) * params.dim();
        let mut acc = vec![0.0; n];
        for &i in pos {
            for &j in neg {
                let g = pair_grad(params, cfg, 0, i, j).to_dense(params.n_users(), params.n_items());
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        let c = (pos.len() * neg.len()) as f64;
        acc.iter().map(|a| a / c).collect()
    }

    #[test]
    fn alternating_sequence_matches_oracle() {
        let params = ModelParams::random(1, 8, 3, 21);
        let cfg = LossConfig::new(0.05).unwrap();
        let events: Vec<(usize, Feedback)> = (0..8)
            .map(|i| (i, if i % 2 == 1 { Feedback::Positive } else { Feedback::Negative }))
            .collect();
        let (block_avg, full) = block_and_full_gradients(&params, &cfg, 0, &events).unwrap();

        let mut expected_blocks = vec![0.0; 27];
        for l in 0..4 {
            let g = oracle_mean_grad(&params, &cfg, &[2 * l + 1], &[2 * l]);
            for (a, b) in expected_blocks.iter_mut().zip(g) {
                *a += b / 4.0;
            }
        }
        let expected_full = oracle_mean_grad(&params, &cfg, &[1, 3, 5, 7], &[0, 2, 4, 6]);
        for (a, b) in block_avg.to_dense(1, 8).iter().zip(&expected_blocks) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in full.to_dense(1, 8).iter().zip(&expected_full) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_params_give_zero_deviation() {
        let model = SyntheticUserModel::uniform(5, 0.5, 12, 1);
        let params = ModelParams::zeros(1, 5, 2);
        let cfg = LossConfig::new(0.0).unwrap();
        let r = check_lemma1_unbiasedness(&model, &params, &cfg, 200).unwrap();
        assert_eq!(r.max_deviation, 0.0);
        assert!(r.within_tolerance);

        let v = check_variance_decay(&model, &params, &cfg, &[1, 2, 4], 50).unwrap();
        assert!(v.rows.iter().all(|r| r.variance == 0.0));
        assert!(v.passes);
    }

    #[test]
    fn degenerate_model_is_error() {
        let model = SyntheticUserModel::uniform(5, 1.0, 12, 1);
        let params = ModelParams::zeros(1, 5, 2);
        let cfg = LossConfig::new(0.0).unwrap();
        assert!(matches!(check_lemma1_unbiasedness(&model, &params, &cfg, 10), Err(Error::Diagnostic(_))));
    }

    #[test]
    fn small_unbiasedness_run_and_reproducibility() {
        let model = SyntheticUserModel::uniform(5, 0.5, 12, 5);
        let params = ModelParams::random(1, 5, 3, 2);
        let cfg = LossConfig::new(0.01).unwrap();
        let a = check_lemma1_unbiasedness(&model, &params, &cfg, 5000).unwrap();
        let b = check_lemma1_unbiasedness(&model, &params, &cfg, 5000).unwrap();
        assert_eq!(a, b);
        assert!(a.within_tolerance, "max z {}", a.max_z);
    }

    #[test]
    fn four_blocks_beat_one() {
        let params = ModelParams::random(1, 5, 3, 2);
        let cfg = LossConfig::new(0.01).unwrap();
        let mut wins = 0;
        for seed in 0..5 {
            let model = SyntheticUserModel::uniform(5, 0.5, 12, seed);
            let v = check_variance_decay(&model, &params, &cfg, &[1, 4], 400).unwrap();
            wins += (v.rows[1].variance < v.rows[0].variance) as usize;
        }
        assert!(wins >= 3, "k=4 lower in {wins} of 5 resamples");
    }
}
