use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use saros_core::ingest::{build_sessions, read_canonical, UserSession};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const INTERACTIONS: &str = "interactions.tsv";
pub const TRAIN: &str = "train.tsv";
pub const TEST: &str = "test.tsv";
pub const USERS: &str = "users.dict";
pub const ITEMS: &str = "items.dict";
pub const DATASET: &str = "dataset.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const RANKING: &str = "mostpop.csv";

/// Metadata carried by every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
}

impl Meta {
    pub fn new(cfg: &RunConfig) -> Self {
        Meta {
            tool: TOOL.to_string(),
            version: VERSION.to_string(),
            config_hash: cfg.hash_hex(),
        }
    }

    /// First line of text artifacts.
    pub fn header(&self) -> String {
        format!("# {} {} config={}", self.tool, self.version, self.config_hash)
    }
}

#[derive(Serialize)]
struct Wrapped<'a, T: Serialize> {
    meta: &'a Meta,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetShape {
    pub n_users: usize,
    pub n_items: usize,
}

pub struct Artifacts {
    pub dir: PathBuf,
    pub meta: Meta,
}

impl Artifacts {
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Artifacts {
            dir,
            meta: Meta::new(cfg),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes a text artifact, prefixed with the metadata header line.
    pub fn text<F>(&self, name: &str, body: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
    {
        let path = self.path(name);
        let res = (|| {
            let mut out = BufWriter::new(File::create(&path)?);
            writeln!(out, "{}", self.meta.header())?;
            body(&mut out)?;
            out.flush()
        })();
        res.map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn json<T: Serialize>(&self, name: &str, body: &T) -> Result<PathBuf> {
        let path = self.path(name);
        let wrapped = Wrapped { meta: &self.meta, body };
        let mut text = serde_json::to_string_pretty(&wrapped).expect("artifact serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn binary(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn open(&self, name: &str) -> Result<BufReader<File>> {
        let path = self.path(name);
        File::open(&path)
            .map(BufReader::new)
            .map_err(|e| CliError::io(&path, e))
    }

    pub fn read_shape(&self) -> Result<DatasetShape> {
        let path = self.path(DATASET);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::ConfigParse {
            path,
            message: e.to_string(),
        })
    }

    pub fn read_sessions(&self, name: &str) -> Result<Vec<UserSession>> {
        let records = read_canonical(self.open(name)?).map_err(|e| match e {
            saros_core::Error::Parse { line, message } => CliError::ConfigParse {
                path: self.path(name),
                message: format!("line {line}: {message}"),
            },
            other => other.into(),
        })?;
        Ok(build_sessions(&records))
    }
}

pub fn ensure_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}
