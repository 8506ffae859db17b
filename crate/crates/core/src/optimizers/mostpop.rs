use std::collections::BTreeMap;
use std::io::Write;

use crate::ingest::UserSession;

/// A single item ranking shared by every user.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PopularityRanking {
    /// `(item, positive count)`, most popular first.
    pub ranking: Vec<(usize, usize)>,
    position: BTreeMap<usize, usize>,
}

impl PopularityRanking {
    /// Wraps an already ordered `(item, count)` list.
    pub fn new(ranking: Vec<(usize, usize)>) -> Self {
        let position = ranking.iter().enumerate().map(|(r, &(i, _))| (i, r)).collect();
        PopularityRanking { ranking, position }
    }

    pub fn items(&self) -> Vec<usize> {
        self.ranking.iter().map(|&(i, _)| i).collect()
    }

    /// 0-based rank of the item, if it occurs in the training data.
    pub fn position(&self, item: usize) -> Option<usize> {
        self.position.get(&item).copied()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "rank,item,count")?;
        for (rank, (item, count)) in self.ranking.iter().enumerate() {
            writeln!(out, "{},{item},{count}", rank + 1)?;
        }
        Ok(())
    }
}

/// Items seen in training, by descending positive count, ties by ascending
/// item index.
pub fn mostpop_rank(train: &[UserSession]) -> PopularityRanking {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for e in train.iter().flat_map(|s| &s.events) {
        *counts.entry(e.item).or_insert(0) += e.feedback.is_positive() as usize;
    }
    let mut ranking: Vec<(usize, usize)> = counts.into_iter().collect();
    ranking.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    PopularityRanking::new(ranking)
}
