use std::path::{Path, PathBuf};
use std::time::Duration;

use saros_core::blocks::BlockOrder;
use saros_core::ingest::{Binarization, LogFormat};
use saros_core::metrics::CandidatePolicy;
use saros_core::optimizers::{BprConfig, IteratePolicy, ThresholdPolicy, TrainerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Saros,
    Bpr,
    BprBatch,
    Mf,
    Mostpop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinarizeMode {
    Threshold,
    PassThrough,
}

/// Flat run configuration. Every key that affects results lives here;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Raw interaction log read by `ingest`.
    pub input: Option<PathBuf>,
    /// `tsv`, `csv` or `movielens`.
    pub format: String,
    pub delimiter: Option<String>,
    pub user_col: Option<usize>,
    pub item_col: Option<usize>,
    pub value_col: Option<usize>,
    pub timestamp_col: Option<usize>,
    pub skip_header: bool,

    pub binarize: BinarizeMode,
    pub threshold: f64,
    pub train_fraction: f64,

    pub algorithm: Algorithm,
    pub dim: usize,
    pub eta: f64,
    pub mu: f64,
    /// Defaults to the minimum per-user block count on the training split.
    pub b_min: Option<usize>,
    /// Defaults to the rounded mean per-user block count on the training split.
    pub b_max: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub threshold_policy: ThresholdPolicy,
    pub iterate_policy: IteratePolicy,
    pub time_budget_s: Option<f64>,
    pub block_order: BlockOrder,
    pub shuffle_users: bool,
    pub trace_points: usize,
    pub bpr_draws_per_epoch: usize,
    pub bpr_retry_limit: usize,

    pub ks: Vec<usize>,
    pub candidates: CandidatePolicy,

    pub diag_items: usize,
    pub diag_pos_prob: f64,
    pub diag_length: usize,
    pub diag_dim: usize,
    pub diag_runs: usize,
    pub diag_k_values: Vec<usize>,
    pub diag_variance_runs: usize,
    pub diag_users: usize,
    pub diag_blocks: usize,
    pub diag_catalog: usize,
    pub diag_eta: f64,
    pub diag_replicates: usize,

    /// Where artifacts are written and read back. Not part of the config hash.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            format: "tsv".into(),
            delimiter: None,
            user_col: None,
            item_col: None,
            value_col: None,
            timestamp_col: None,
            skip_header: false,
            binarize: BinarizeMode::Threshold,
            threshold: 4.0,
            train_fraction: 0.8,
            algorithm: Algorithm::Saros,
            dim: 16,
            eta: 0.05,
            mu: 0.0,
            b_min: None,
            b_max: None,
            epochs: 1,
            seed: 0,
            threshold_policy: ThresholdPolicy::default(),
            iterate_policy: IteratePolicy::default(),
            time_budget_s: None,
            block_order: BlockOrder::default(),
            shuffle_users: false,
            trace_points: 20,
            bpr_draws_per_epoch: BprConfig::default().draws_per_epoch,
            bpr_retry_limit: BprConfig::default().retry_limit,
            ks: vec![5, 10],
            candidates: CandidatePolicy::default(),
            diag_items: 5,
            diag_pos_prob: 0.5,
            diag_length: 12,
            diag_dim: 4,
            diag_runs: 50_000,
            diag_k_values: vec![1, 2, 4, 8, 16],
            diag_variance_runs: 4_000,
            diag_users: 200,
            diag_blocks: 4,
            diag_catalog: 20,
            diag_eta: 1.0,
            diag_replicates: 20,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::ConfigParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        // Relative data paths are taken from the config file's directory.
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(input) = cfg.input.as_mut() {
            if input.is_relative() {
                *input = base.join(&*input);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(CliError::Config("ks must be a non-empty list of cutoffs >= 1".into()));
        }
        if self.time_budget_s.is_some_and(|t| !(t >= 0.0 && t.is_finite())) {
            return Err(CliError::Config("time_budget_s must be a finite number >= 0".into()));
        }
        self.log_format()?;
        Ok(())
    }

    pub fn log_format(&self) -> Result<LogFormat> {
        let mut f = LogFormat::preset(&self.format)?;
        if let Some(d) = &self.delimiter {
            f.delimiter = d.clone();
        }
        f.user_col = self.user_col.unwrap_or(f.user_col);
        f.item_col = self.item_col.unwrap_or(f.item_col);
        f.value_col = self.value_col.unwrap_or(f.value_col);
        f.timestamp_col = self.timestamp_col.unwrap_or(f.timestamp_col);
        f.skip_header = self.skip_header;
        f.validate()?;
        Ok(f)
    }

    pub fn binarization(&self) -> Binarization {
        match self.binarize {
            BinarizeMode::Threshold => Binarization::Threshold(self.threshold),
            BinarizeMode::PassThrough => Binarization::PassThrough,
        }
    }

    /// Trainer settings with `(b, B)` taken from the config when set and
    /// from `auto` otherwise.
    pub fn trainer(&self, auto: (usize, usize)) -> TrainerConfig {
        TrainerConfig {
            eta: self.eta,
            mu: self.mu,
            dim: self.dim,
            b_min: self.b_min.unwrap_or(auto.0),
            b_max: self.b_max.unwrap_or(auto.1),
            epochs: self.epochs,
            seed: self.seed,
            threshold_policy: self.threshold_policy,
            iterate_policy: self.iterate_policy,
            time_budget: self.time_budget_s.map(Duration::from_secs_f64),
            block_order: self.block_order,
            shuffle_users: self.shuffle_users,
            freeze_items: false,
            trace_points: self.trace_points,
        }
    }

    pub fn bpr(&self) -> BprConfig {
        BprConfig {
            draws_per_epoch: self.bpr_draws_per_epoch,
            retry_limit: self.bpr_retry_limit,
        }
    }

    /// SHA-256 over the canonical JSON form of every result-affecting key.
    pub fn hash(&self) -> [u8; 32] {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.input = canonical
            .input
            .as_ref()
            .and_then(|p| p.file_name())
            .map(PathBuf::from);
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}
