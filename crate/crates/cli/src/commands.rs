use std::io::BufRead;
use std::path::PathBuf;

use saros_core::blocks::block_profile;
use saros_core::diagnostics::{
    check_convergence_rate, check_lemma1_unbiasedness, check_variance_decay, emit_block_distribution,
    ConvexInstance, SyntheticUserModel,
};
use saros_core::ingest::{
    binarize, build_sessions, compute_stats, parse_log, temporal_split, write_sessions, DatasetStats, UserSession,
};
use saros_core::metrics::{evaluate, write_user_metrics, PopularityScorer};
use saros_core::model::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use saros_core::model::ModelParams;
use saros_core::optimizers::{
    block_thresholds, bpr_batch_train, bpr_train, mf_train, mostpop_rank, saros_train, PopularityRanking, TrainTrace,
    TrainerConfig,
};
use serde::Serialize;

use crate::artifacts::{
    ensure_file, Artifacts, DatasetShape, CHECKPOINT, DATASET, INTERACTIONS, ITEMS, RANKING, TEST, TRAIN, USERS,
};
use crate::config::{Algorithm, RunConfig};
use crate::error::{CliError, Result};

/// Parses, binarizes and splits the raw log, then writes the canonical
/// dataset, dictionaries and statistics.
pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| CliError::Config("`input` is required for ingest".into()))?;
    ensure_file(input)?;
    let log = parse_log(input, &cfg.log_format()?).map_err(|e| match e {
        saros_core::Error::Parse { line, message } => CliError::ConfigParse {
            path: input.clone(),
            message: format!("line {line}: {message}"),
        },
        other => other.into(),
    })?;
    let sessions = build_sessions(&binarize(&log.records, cfg.binarization()));
    let split = temporal_split(&sessions, cfg.train_fraction)?;
    let shape = DatasetShape {
        n_users: log.users.len(),
        n_items: log.items.len(),
    };

    let art = Artifacts::create(cfg)?;
    art.text(INTERACTIONS, |out| write_sessions(&sessions, out))?;
    art.text(TRAIN, |out| write_sessions(&split.train, out))?;
    art.text(TEST, |out| write_sessions(&split.test, out))?;
    art.text(USERS, |out| log.users.write_to(out))?;
    art.text(ITEMS, |out| log.items.write_to(out))?;
    art.json(DATASET, &shape)?;
    write_stats(cfg, &art, &split.train, &split.test, shape)?;
    Ok(())
}

/// Recomputes statistics and block distributions from an ingested dataset.
pub fn stats(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::create(cfg)?;
    let shape = art.read_shape()?;
    let train = art.read_sessions(TRAIN)?;
    let test = art.read_sessions(TEST)?;
    write_stats(cfg, &art, &train, &test, shape)?;
    Ok(())
}

fn write_stats(
    cfg: &RunConfig,
    art: &Artifacts,
    train: &[UserSession],
    test: &[UserSession],
    shape: DatasetShape,
) -> Result<DatasetStats> {
    let (counts, sizes) = block_profile(train, cfg.block_order);
    let stats = compute_stats(train, test, shape.n_users, shape.n_items, &counts, &sizes);
    art.json("stats.json", &stats)?;
    emit_block_distribution(train, cfg.block_order, &art.dir, Some(&art.meta.header()))?;
    Ok(stats)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    algorithm: Algorithm,
    n_users: usize,
    n_items: usize,
    trainer: TrainerConfig,
    updates: u64,
    pair_evaluations: u64,
    rejections: u64,
    users_kept: usize,
    users_rolled_back: usize,
    stopped_early: bool,
}

/// Runs the selected algorithm on the training split.
pub fn train(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::create(cfg)?;
    let shape = art.read_shape()?;
    let train = art.read_sessions(TRAIN)?;
    let trainer = cfg.trainer(block_thresholds(&train, cfg.block_order));
    let (n_users, n_items) = (shape.n_users, shape.n_items);

    let (params, trace) = match cfg.algorithm {
        Algorithm::Mostpop => {
            let ranking = mostpop_rank(&train);
            art.text(RANKING, |out| ranking.write_csv(out))?;
            (None, TrainTrace::default())
        }
        Algorithm::Saros => {
            let out = saros_train(&train, n_users, n_items, &trainer)?;
            (Some(out.params), out.trace)
        }
        Algorithm::Bpr => {
            let out = bpr_train(&train, n_users, n_items, &trainer, &cfg.bpr())?;
            (Some(out.params), out.trace)
        }
        Algorithm::BprBatch => {
            let out = bpr_batch_train(&train, n_users, n_items, &trainer)?;
            (Some(out.params), out.trace)
        }
        Algorithm::Mf => (Some(mf_train(&train, n_users, n_items, &trainer)?), TrainTrace::default()),
    };

    if let Some(params) = &params {
        let meta = CheckpointMeta {
            seed: cfg.seed,
            config_hash: cfg.hash(),
        };
        let mut bytes = Vec::new();
        write_checkpoint(params, &meta, &mut bytes).expect("writing to memory");
        art.binary(CHECKPOINT, &bytes)?;
    }
    art.text("trace.csv", |out| trace.write_curve(out))?;
    art.text("updates.csv", |out| trace.write_updates(out))?;
    art.text("gates.csv", |out| trace.write_gates(out))?;
    let kept = trace.gates.iter().filter(|g| g.kept).count();
    art.json(
        "train.json",
        &TrainSummary {
            algorithm: cfg.algorithm,
            n_users,
            n_items,
            trainer,
            updates: trace.update_count(),
            pair_evaluations: trace.pair_evaluations,
            rejections: trace.rejections,
            users_kept: kept,
            users_rolled_back: trace.gates.len() - kept,
            stopped_early: trace.stopped_early,
        },
    )?;
    Ok(())
}

/// Scores the test split with the trained model (or popularity ranking).
pub fn eval(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::create(cfg)?;
    let shape = art.read_shape()?;
    let test = art.read_sessions(TEST)?;
    let loss = saros_core::model::LossConfig::new(cfg.mu)?;

    let (report, rows) = if cfg.algorithm == Algorithm::Mostpop {
        let ranking = read_ranking(&art)?;
        let scorer = PopularityScorer {
            ranking: &ranking,
            n_users: shape.n_users,
            n_items: shape.n_items,
        };
        evaluate(&scorer, &test, &cfg.ks, cfg.candidates, None)?
    } else {
        let params = load_checkpoint(&art, cfg, shape)?;
        evaluate(&params, &test, &cfg.ks, cfg.candidates, Some((&params, &loss)))?
    };
    art.json("eval.json", &report)?;
    art.text("eval_users.csv", |out| write_user_metrics(&rows, out))?;
    Ok(())
}

fn load_checkpoint(art: &Artifacts, cfg: &RunConfig, shape: DatasetShape) -> Result<ModelParams> {
    let (params, _) = read_checkpoint(art.open(CHECKPOINT)?).map_err(|e| match e {
        saros_core::Error::Checkpoint(m) => CliError::ConfigParse {
            path: art.path(CHECKPOINT),
            message: m,
        },
        other => other.into(),
    })?;
    if params.n_users() != shape.n_users || params.n_items() != shape.n_items || params.dim() != cfg.dim {
        return Err(CliError::ShapeMismatch {
            checkpoint: params.shape_string(),
            dataset: format!(
                "{} users x {} items x dim {}",
                shape.n_users, shape.n_items, cfg.dim
            ),
        });
    }
    Ok(params)
}

fn read_ranking(art: &Artifacts) -> Result<PopularityRanking> {
    let path = art.path(RANKING);
    let bad = |line: usize, message: &str| CliError::ConfigParse {
        path: path.clone(),
        message: format!("line {line}: {message}"),
    };
    let mut ranking = Vec::new();
    for (n, line) in art.open(RANKING)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(&path, e))?;
        if line.starts_with('#') || line.starts_with("rank,") || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(bad(n + 1, "expected rank,item,count"));
        }
        let item = fields[1].parse().map_err(|_| bad(n + 1, "bad item index"))?;
        let count = fields[2].parse().map_err(|_| bad(n + 1, "bad count"))?;
        ranking.push((item, count));
    }
    Ok(PopularityRanking::new(ranking))
}

#[derive(Debug, Serialize)]
struct DiagnoseSummary {
    unbiasedness: bool,
    variance_decay: bool,
    convergence: bool,
    convergence_control_rejected: bool,
}

/// Runs the unbiasedness, variance-decay and convergence-rate checks on
/// synthetic data. Fails with the paths of the failing reports.
pub fn diagnose(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::create(cfg)?;
    let loss = saros_core::model::LossConfig::new(cfg.mu)?;
    let model = SyntheticUserModel::uniform(cfg.diag_items, cfg.diag_pos_prob, cfg.diag_length, cfg.seed);
    let params = ModelParams::random(1, cfg.diag_items, cfg.diag_dim, cfg.seed);
    let mut failed: Vec<PathBuf> = Vec::new();

    let lemma = check_lemma1_unbiasedness(&model, &params, &loss, cfg.diag_runs)?;
    let path = art.json("unbiasedness.json", &lemma)?;
    if !lemma.within_tolerance {
        failed.push(path);
    }

    let variance = check_variance_decay(&model, &params, &loss, &cfg.diag_k_values, cfg.diag_variance_runs)?;
    let path = art.json("variance.json", &variance)?;
    art.text("variance.csv", |out| {
        writeln!(out, "k,variance,std_error")?;
        for r in &variance.rows {
            writeln!(out, "{},{},{}", r.k, r.variance, r.std_error)?;
        }
        Ok(())
    })?;
    if !variance.passes {
        failed.push(path);
    }

    let instance = ConvexInstance::synthetic(cfg.diag_users, cfg.diag_dim, cfg.diag_catalog, cfg.diag_blocks, cfg.seed);
    let run = TrainerConfig {
        eta: cfg.diag_eta,
        dim: cfg.diag_dim,
        seed: cfg.seed,
        block_order: cfg.block_order,
        ..TrainerConfig::default()
    };
    let conv = check_convergence_rate(&instance, &run, cfg.diag_users, cfg.diag_replicates)?;
    let path = art.json("convergence.json", &conv)?;
    art.text("convergence.csv", |out| {
        writeln!(out, "u,suboptimality")?;
        for (u, s) in &conv.curve {
            writeln!(out, "{u},{s}")?;
        }
        Ok(())
    })?;
    if !conv.passes {
        failed.push(path);
    }
    let control = check_convergence_rate(&instance, &TrainerConfig { eta: 0.0, ..run }, cfg.diag_users, 1)?;
    let path = art.json("convergence_control.json", &control)?;
    if control.passes {
        failed.push(path);
    }

    art.json(
        "diagnose.json",
        &DiagnoseSummary {
            unbiasedness: lemma.within_tolerance,
            variance_decay: variance.passes,
            convergence: conv.passes,
            convergence_control_rejected: !control.passes,
        },
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::DiagnosticsFailed(failed))
    }
}
