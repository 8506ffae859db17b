use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{block_profile, BlockOrder};
use crate::error::{Error, Result};
use crate::ingest::UserSession;

/// Block-size bins `[lo, hi)`; sizes of 35 and above land in a final `35+` bin.
pub const SIZE_BINS: [(usize, usize); 7] = [(1, 5), (5, 10), (10, 15), (15, 20), (20, 25), (25, 30), (30, 35)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxplotSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl BoxplotSummary {
    /// Quartiles by linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(BoxplotSummary {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDistribution {
    /// `(user, uncapped block count)` for every session.
    pub per_user: Vec<(usize, usize)>,
    /// Summary of log10(count) over users with at least one block.
    pub log10_summary: Option<BoxplotSummary>,
    /// Summary of the raw counts over all users.
    pub count_summary: Option<BoxplotSummary>,
    /// `(label, frequency)` for each entry of [`SIZE_BINS`] plus `35+`.
    pub size_bins: Vec<(String, usize)>,
    pub sizes: Vec<usize>,
}

pub fn block_distribution(train: &[UserSession], order: BlockOrder) -> BlockDistribution {
    let (per_user, sizes) = block_profile(train, order);
    let logs: Vec<f64> = per_user
        .iter()
        .filter(|&&(_, c)| c > 0)
        .map(|&(_, c)| (c as f64).log10())
        .collect();
    let counts: Vec<f64> = per_user.iter().map(|&(_, c)| c as f64).collect();

    let mut size_bins: Vec<(String, usize)> = SIZE_BINS
        .iter()
        .map(|(lo, hi)| (format!("{lo}-{hi}"), 0))
        .collect();
    size_bins.push(("35+".to_string(), 0));
    for &s in &sizes {
        let idx = SIZE_BINS
            .iter()
            .position(|&(lo, hi)| (lo..hi).contains(&s))
            .unwrap_or(SIZE_BINS.len());
        size_bins[idx].1 += 1;
    }

    BlockDistribution {
        log10_summary: BoxplotSummary::of(&logs),
        count_summary: BoxplotSummary::of(&counts),
        per_user,
        size_bins,
        sizes,
    }
}

/// Writes `block_counts.csv`, `block_counts_log10.csv`, `block_boxplot.csv`,
/// `block_sizes.csv` and `block_size_bins.csv` into `dir`. Every file gets
/// `header` as its first line when given (it should start with `#`).
pub fn emit_block_distribution(
    train: &[UserSession],
    order: BlockOrder,
    dir: &Path,
    header: Option<&str>,
) -> Result<BlockDistribution> {
    let dist = block_distribution(train, order);
    let write = |name: &str, body: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| -> Result<()> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        let res = (|| {
            if let Some(h) = header {
                writeln!(out, "{h}")?;
            }
            body(&mut out)?;
            out.flush()
        })();
        res.map_err(|e| Error::io(&path, e))
    };

    write("block_counts.csv", &|out| {
        writeln!(out, "user_index,count")?;
        for (u, c) in &dist.per_user {
            writeln!(out, "{u},{c}")?;
        }
        Ok(())
    })?;
    write("block_counts_log10.csv", &|out| {
        writeln!(out, "user_index,log10_count")?;
        for (u, c) in dist.per_user.iter().filter(|(_, c)| *c > 0) {
            writeln!(out, "{u},{}", (*c as f64).log10())?;
        }
        Ok(())
    })?;
    write("block_boxplot.csv", &|out| {
        writeln!(out, "quantile,value")?;
        if let Some(s) = &dist.log10_summary {
            for (name, v) in [
                ("min", s.min),
                ("q1", s.q1),
                ("median", s.median),
                ("q3", s.q3),
                ("max", s.max),
                ("mean", s.mean),
            ] {
                writeln!(out, "{name},{v}")?;
            }
        }
        Ok(())
    })?;
    write("block_sizes.csv", &|out| {
        writeln!(out, "size,frequency")?;
        let mut hist = std::collections::BTreeMap::new();
        for &s in &dist.sizes {
            *hist.entry(s).or_insert(0usize) += 1;
        }
        for (s, f) in hist {
            writeln!(out, "{s},{f}")?;
        }
        Ok(())
    })?;
    write("block_size_bins.csv", &|out| {
        writeln!(out, "bin,frequency")?;
        for (label, f) in &dist.size_bins {
            writeln!(out, "{label},{f}")?;
        }
        Ok(())
    })?;
    Ok(dist)
}
