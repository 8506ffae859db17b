//! Interaction log ingestion: parsing, index compaction, binarization,
//! per-user sessions and the temporal train/test split.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    Positive,
    Negative,
}

impl Feedback {
    pub fn is_positive(self) -> bool {
        matches!(self, Feedback::Positive)
    }

    pub fn label(self) -> u8 {
        match self {
            Feedback::Positive => 1,
            Feedback::Negative => 0,
        }
    }
}

/// A parsed line before binarization. `value` is the raw rating or click flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatedRecord {
    pub user: usize,
    pub item: usize,
    pub value: f64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub feedback: Feedback,
    pub timestamp: i64,
}

/// Column layout of a delimiter-separated log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogFormat {
    pub delimiter: String,
    pub user_col: usize,
    pub item_col: usize,
    pub value_col: usize,
    pub timestamp_col: usize,
    pub skip_header: bool,
}

impl LogFormat {
    /// Named layouts: `tsv`, `csv` (both user,item,value,timestamp) and
    /// `movielens` (`::`-separated `ratings.dat`).
    pub fn preset(tag: &str) -> Result<Self> {
        let delimiter = match tag {
            "tsv" => "\t",
            "csv" => ",",
            "movielens" | "ml-1m" => "::",
            other => return Err(Error::Config(format!("unknown log format '{other}'"))),
        };
        Ok(LogFormat {
            delimiter: delimiter.to_string(),
            user_col: 0,
            item_col: 1,
            value_col: 2,
            timestamp_col: 3,
            skip_header: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.delimiter.is_empty() {
            return Err(Error::Config("empty delimiter".into()));
        }
        let mut cols = [self.user_col, self.item_col, self.value_col, self.timestamp_col];
        cols.sort_unstable();
        if cols.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("log columns must be distinct".into()));
        }
        Ok(())
    }

    fn width(&self) -> usize {
        1 + self
            .user_col
            .max(self.item_col)
            .max(self.value_col)
            .max(self.timestamp_col)
    }
}

/// Two-way mapping between external string IDs and dense indices, assigned
/// in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdDictionary {
    index: HashMap<String, usize>,
    ids: Vec<String>,
}

impl IdDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&idx) = self.index.get(id) {
            return idx;
        }
        let idx = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), idx);
        idx
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Writes `index<TAB>id` lines.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (idx, id) in self.ids.iter().enumerate() {
            writeln!(out, "{idx}\t{id}")?;
        }
        Ok(())
    }

    /// Reads the format produced by [`IdDictionary::write_to`]. Lines starting
    /// with `#` are ignored.
    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut dict = IdDictionary::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (idx, id) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected index<TAB>id".into(),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::Parse {
                line: n + 1,
                message: format!("bad index '{idx}'"),
            })?;
            if idx != dict.len() || dict.get(id).is_some() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: "dictionary indices must be dense and ids unique".into(),
                });
            }
            dict.intern(id);
        }
        Ok(dict)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedLog {
    pub records: Vec<RatedRecord>,
    pub users: IdDictionary,
    pub items: IdDictionary,
}

pub fn parse_log(path: &Path, format: &LogFormat) -> Result<ParsedLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(BufReader::new(file), format)
}

pub fn parse_reader<R: BufRead>(reader: R, format: &LogFormat) -> Result<ParsedLog> {
    format.validate()?;
    let mut log = ParsedLog::default();
    let width = format.width();

    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if n == 0 && format.skip_header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(format.delimiter.as_str()).collect();
        if fields.len() < width {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected at least {width} columns, found {}", fields.len()),
            });
        }
        let field = |col: usize| fields[col].trim();
        let value: f64 = field(format.value_col).parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad value '{}'", field(format.value_col)),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                message: "value must be finite".into(),
            });
        }
        let timestamp: i64 = field(format.timestamp_col).parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad timestamp '{}'", field(format.timestamp_col)),
        })?;
        let (user_id, item_id) = (field(format.user_col), field(format.item_col));
        if user_id.is_empty() || item_id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty user or item id".into(),
            });
        }
        let user = log.users.intern(user_id);
        let item = log.items.intern(item_id);
        log.records.push(RatedRecord {
            user,
            item,
            value,
            timestamp,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "threshold", rename_all = "kebab-case")]
pub enum Binarization {
    /// Positive iff value >= threshold.
    Threshold(f64),
    /// Click logs: non-zero is positive.
    PassThrough,
}

pub fn binarize(records: &[RatedRecord], mode: Binarization) -> Vec<InteractionRecord> {
    records
        .iter()
        .map(|r| {
            let positive = match mode {
                Binarization::Threshold(t) => r.value >= t,
                Binarization::PassThrough => r.value != 0.0,
            };
            InteractionRecord {
                user: r.user,
                item: r.item,
                feedback: if positive {
                    Feedback::Positive
                } else {
                    Feedback::Negative
                },
                timestamp: r.timestamp,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub item: usize,
    pub feedback: Feedback,
    pub timestamp: i64,
}

/// All retained interactions of one user, ascending by timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSession {
    pub user: usize,
    pub events: Vec<Event>,
}

impl UserSession {
    pub fn positives(&self) -> Vec<usize> {
        self.items_with(Feedback::Positive)
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.items_with(Feedback::Negative)
    }

    fn items_with(&self, feedback: Feedback) -> Vec<usize> {
        self.events
            .iter()
            .filter(|e| e.feedback == feedback)
            .map(|e| e.item)
            .collect()
    }
}

/// Groups records by user (ascending user index) and sorts each user's
/// events by timestamp. The sort is stable, so file order breaks ties.
pub fn build_sessions(records: &[InteractionRecord]) -> Vec<UserSession> {
    let mut by_user: BTreeMap<usize, Vec<Event>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user).or_default().push(Event {
            item: r.item,
            feedback: r.feedback,
            timestamp: r.timestamp,
        });
    }
    by_user
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_by_key(|e| e.timestamp);
            UserSession { user, events }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<UserSession>,
    pub test: Vec<UserSession>,
}

/// Number of leading events that go to training: `floor(fraction * len)`.
pub fn train_cut(len: usize, fraction: f64) -> usize {
    // The epsilon absorbs products like 0.7 * 10 = 6.9999999999999991.
    let cut = (fraction * len as f64 + 1e-9).floor() as usize;
    cut.min(len)
}

pub fn temporal_split(sessions: &[UserSession], train_fraction: f64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut split = Split::default();
    for session in sessions.iter().filter(|s| !s.events.is_empty()) {
        let cut = train_cut(session.events.len(), train_fraction);
        let (head, tail) = session.events.split_at(cut);
        if !head.is_empty() {
            split.train.push(UserSession {
                user: session.user,
                events: head.to_vec(),
            });
        }
        if !tail.is_empty() {
            split.test.push(UserSession {
                user: session.user,
                events: tail.to_vec(),
            });
        }
    }
    Ok(split)
}

/// Writes sessions as canonical `user<TAB>item<TAB>label<TAB>timestamp` lines
/// using dense indices, user-major and in time order.
pub fn write_sessions<W: Write>(sessions: &[UserSession], mut out: W) -> std::io::Result<()> {
    for s in sessions {
        for e in &s.events {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                s.user,
                e.item,
                e.feedback.label(),
                e.timestamp
            )?;
        }
    }
    Ok(())
}

pub fn write_records<W: Write>(records: &[InteractionRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.user,
            r.item,
            r.feedback.label(),
            r.timestamp
        )?;
    }
    Ok(())
}

/// Reads a canonical log whose user and item columns already hold dense
/// indices (as written by [`write_sessions`]).
pub fn read_canonical<R: BufRead>(reader: R) -> Result<Vec<InteractionRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 columns, found {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<i64> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad {what} '{s}'"),
            })
        };
        let user = num(fields[0], "user")?;
        let item = num(fields[1], "item")?;
        let feedback = match fields[2] {
            "1" => Feedback::Positive,
            "0" => Feedback::Negative,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("label must be 0 or 1, got '{other}'"),
                })
            }
        };
        if user < 0 || item < 0 {
            return Err(Error::Parse {
                line: line_no,
                message: "negative index".into(),
            });
        }
        out.push(InteractionRecord {
            user: user as usize,
            item: item as usize,
            feedback,
            timestamp: num(fields[3], "timestamp")?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub sparsity: f64,
    pub avg_pos: f64,
    pub avg_neg: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub pos_fraction_train: f64,
    pub pos_fraction_test: f64,
    /// Per-user block counts over the training split, `(user, count)`.
    #[serde(skip)]
    pub block_counts: Vec<(usize, usize)>,
    /// Block size (negatives plus positives) to number of blocks.
    #[serde(skip)]
    pub block_size_distribution: BTreeMap<usize, usize>,
}

impl DatasetStats {
    /// Block count to number of users with that count.
    pub fn block_count_distribution(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for &(_, count) in &self.block_counts {
            *hist.entry(count).or_insert(0) += 1;
        }
        hist
    }

    pub fn write_block_counts<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "user_index,count")?;
        for (user, count) in &self.block_counts {
            writeln!(out, "{user},{count}")?;
        }
        Ok(())
    }

    pub fn write_block_sizes<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "size,frequency")?;
        for (size, freq) in &self.block_size_distribution {
            writeln!(out, "{size},{freq}")?;
        }
        Ok(())
    }
}

pub fn compute_stats(
    train: &[UserSession],
    test: &[UserSession],
    n_users: usize,
    n_items: usize,
    block_counts: &[(usize, usize)],
    block_sizes: &[usize],
) -> DatasetStats {
    let count = |sessions: &[UserSession]| -> (usize, usize) {
        sessions
            .iter()
            .flat_map(|s| &s.events)
            .fold((0, 0), |(pos, all), e| {
                (pos + e.feedback.is_positive() as usize, all + 1)
            })
    };
    let (train_pos, n_train) = count(train);
    let (test_pos, n_test) = count(test);
    let n_interactions = n_train + n_test;
    let n_pos = train_pos + test_pos;
    let n_neg = n_interactions - n_pos;

    let cells = n_users as f64 * n_items as f64;
    let sparsity = if cells > 0.0 {
        (1.0 - n_interactions as f64 / cells).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let per_user = |n: usize| {
        if n_users > 0 {
            n as f64 / n_users as f64
        } else {
            0.0
        }
    };
    let percent = |pos: usize, all: usize| {
        if all > 0 {
            100.0 * pos as f64 / all as f64
        } else {
            0.0
        }
    };

    let mut block_size_distribution = BTreeMap::new();
    for &size in block_sizes {
        *block_size_distribution.entry(size).or_insert(0) += 1;
    }

    DatasetStats {
        n_users,
        n_items,
        n_interactions,
        sparsity,
        avg_pos: per_user(n_pos),
        avg_neg: per_user(n_neg),
        n_train,
        n_test,
        pos_fraction_train: percent(train_pos, n_train),
        pos_fraction_test: percent(test_pos, n_test),
        block_counts: block_counts.to_vec(),
        block_size_distribution,
    }
}
