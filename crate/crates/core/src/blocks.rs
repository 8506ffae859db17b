//! Segmentation of a user session into update blocks.
//!
//! Items are accumulated into a pending negative list and a pending positive
//! list. A block is emitted as soon as both lists are non-empty, after which
//! both are cleared. Items left pending when the session ends never form a
//! block and are dropped.

use serde::{Deserialize, Serialize};

use crate::ingest::{Feedback, UserSession};

/// How a session prefix of positives (before any negative) is treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockOrder {
    /// Emit on the first completion in either order: a run of positives
    /// closed by a negative also forms a block.
    #[default]
    Symmetric,
    /// Only "negatives followed by a positive" forms a block; positives that
    /// arrive with no pending negative are dropped.
    NegativesFirst,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    /// Non-preferred items, in session order.
    pub negatives: Vec<usize>,
    /// Preferred items, in session order.
    pub positives: Vec<usize>,
    /// 1-based position of the block within its user.
    pub ordinal: usize,
    /// Label of the item whose arrival completed the block.
    pub closed_by: Feedback,
}

impl Block {
    pub fn len(&self) -> usize {
        self.negatives.len() + self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of (positive, negative) pairs the block loss averages over.
    pub fn pair_count(&self) -> usize {
        self.negatives.len() * self.positives.len()
    }

    /// Items in the order they were seen: the open run first, then the
    /// closing item.
    pub fn events(&self) -> Vec<(usize, Feedback)> {
        let neg = self.negatives.iter().map(|&i| (i, Feedback::Negative));
        let pos = self.positives.iter().map(|&i| (i, Feedback::Positive));
        match self.closed_by {
            Feedback::Positive => neg.chain(pos).collect(),
            Feedback::Negative => pos.chain(neg).collect(),
        }
    }
}

/// Streaming block builder for one user at a time.
#[derive(Debug, Clone, Default)]
pub struct Segmenter {
    order: BlockOrder,
    pending_negatives: Vec<usize>,
    pending_positives: Vec<usize>,
    emitted: usize,
    dropped: Vec<(usize, Feedback)>,
}

impl Segmenter {
    pub fn new(order: BlockOrder) -> Self {
        Segmenter {
            order,
            ..Default::default()
        }
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn pending(&self) -> (&[usize], &[usize]) {
        (&self.pending_negatives, &self.pending_positives)
    }

    /// Items discarded so far for the current user under
    /// [`BlockOrder::NegativesFirst`] or by [`Segmenter::finish_user`].
    pub fn dropped(&self) -> &[(usize, Feedback)] {
        &self.dropped
    }

    pub fn feed(&mut self, item: usize, feedback: Feedback) -> Option<Block> {
        match feedback {
            Feedback::Negative => self.pending_negatives.push(item),
            Feedback::Positive => {
                if self.order == BlockOrder::NegativesFirst && self.pending_negatives.is_empty() {
                    self.dropped.push((item, feedback));
                    return None;
                }
                self.pending_positives.push(item)
            }
        }
        if self.pending_negatives.is_empty() || self.pending_positives.is_empty() {
            return None;
        }
        self.emitted += 1;
        Some(Block {
            negatives: std::mem::take(&mut self.pending_negatives),
            positives: std::mem::take(&mut self.pending_positives),
            ordinal: self.emitted,
            closed_by: feedback,
        })
    }

    /// Ends the current user: drops whatever is pending, resets the state and
    /// returns how many blocks the user produced.
    pub fn finish_user(&mut self) -> usize {
        let count = self.emitted;
        self.pending_negatives.clear();
        self.pending_positives.clear();
        self.dropped.clear();
        self.emitted = 0;
        count
    }

    fn trailing(&self) -> Vec<(usize, Feedback)> {
        let neg = self.pending_negatives.iter().map(|&i| (i, Feedback::Negative));
        let pos = self.pending_positives.iter().map(|&i| (i, Feedback::Positive));
        neg.chain(pos).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionBlocks {
    /// At most `cap` blocks, in order.
    pub blocks: Vec<Block>,
    /// Blocks the whole session produces, ignoring the cap.
    pub total: usize,
}

/// Segments a whole session, keeping the first `cap` blocks and counting all.
pub fn blocks_of(session: &UserSession, cap: usize, order: BlockOrder) -> SessionBlocks {
    let mut seg = Segmenter::new(order);
    let mut blocks = Vec::new();
    for e in &session.events {
        if let Some(block) = seg.feed(e.item, e.feedback) {
            if blocks.len() < cap {
                blocks.push(block);
            }
        }
    }
    SessionBlocks {
        blocks,
        total: seg.finish_user(),
    }
}

/// Segments a labelled sequence and also returns every item that did not end
/// up in a block (prefix drops and the trailing remainder), in order.
pub fn segment_with_remainder(
    events: &[(usize, Feedback)],
    order: BlockOrder,
) -> (Vec<Block>, Vec<(usize, Feedback)>) {
    let mut seg = Segmenter::new(order);
    let blocks: Vec<Block> = events
        .iter()
        .filter_map(|&(item, fb)| seg.feed(item, fb))
        .collect();
    let mut rest = seg.dropped().to_vec();
    rest.extend(seg.trailing());
    seg.finish_user();
    (blocks, rest)
}

/// Per-user uncapped block counts `(user, count)` and the sizes of every
/// block, over a set of sessions.
pub fn block_profile(sessions: &[UserSession], order: BlockOrder) -> (Vec<(usize, usize)>, Vec<usize>) {
    let mut counts = Vec::with_capacity(sessions.len());
    let mut sizes = Vec::new();
    for s in sessions {
        let sb = blocks_of(s, usize::MAX, order);
        counts.push((s.user, sb.total));
        sizes.extend(sb.blocks.iter().map(Block::len));
    }
    (counts, sizes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Event;
    use proptest::prelude::*;

    const N: Feedback = Feedback::Negative;
    const P: Feedback = Feedback::Positive;

    fn seq(labels: &[Feedback]) -> Vec<(usize, Feedback)> {
        labels.iter().enumerate().map(|(i, &f)| (i + 1, f)).collect()
    }

    fn session(labels: &[Feedback]) -> UserSession {
        UserSession {
            user: 0,
            events: seq(labels)
                .into_iter()
                .enumerate()
                .map(|(t, (item, feedback))| Event {
                    item,
                    feedback,
                    timestamp: t as i64,
                })
                .collect(),
        }
    }

    fn run(labels: &[Feedback], order: BlockOrder) -> Vec<(Vec<usize>, Vec<usize>)> {
        segment_with_remainder(&seq(labels), order)
            .0
            .into_iter()
            .map(|b| (b.negatives, b.positives))
            .collect()
    }

    #[test]
    fn negatives_then_positive() {
        assert_eq!(run(&[N, N, P], BlockOrder::Symmetric), vec![(vec![1, 2], vec![3])]);
    }

    #[test]
    fn two_blocks() {
        assert_eq!(
            run(&[N, N, P, N, P], BlockOrder::Symmetric),
            vec![(vec![1, 2], vec![3]), (vec![4], vec![5])]
        );
    }

    #[test]
    fn positives_first_symmetric_and_strict() {
        assert_eq!(run(&[P, P, N], BlockOrder::Symmetric), vec![(vec![3], vec![1, 2])]);
        assert!(run(&[P, P, N], BlockOrder::NegativesFirst).is_empty());
        assert_eq!(
            run(&[P, N, N, P], BlockOrder::NegativesFirst),
            vec![(vec![2, 3], vec![4])]
        );
    }

    #[test]
    fn finish_user_counts_and_resets() {
        let mut seg = Segmenter::new(BlockOrder::Symmetric);
        for (i, f) in seq(&[N, N, N]) {
            assert!(seg.feed(i, f).is_none());
        }
        assert_eq!(seg.finish_user(), 0);

        for (i, f) in seq(&[N, P, N]) {
            seg.feed(i, f);
        }
        assert_eq!(seg.pending().0, &[3]);
        assert_eq!(seg.finish_user(), 1);
        assert_eq!(seg.pending(), (&[][..], &[][..]));
        assert_eq!(seg.finish_user(), 0);
    }

    #[test]
    fn cap_limits_emission_not_count() {
        let alt = session(&[N, P, N, P, N, P, N, P, N, P]);
        let sb = blocks_of(&alt, 3, BlockOrder::Symmetric);
        assert_eq!(sb.blocks.len(), 3);
        assert_eq!(sb.total, 5);
        assert_eq!(sb.blocks[2].ordinal, 3);

        let sb = blocks_of(&alt, 10, BlockOrder::Symmetric);
        assert_eq!(sb.blocks.len(), 5);
        assert_eq!(sb.total, 5);

        let sb = blocks_of(&session(&[N, N, N]), 4, BlockOrder::Symmetric);
        assert_eq!((sb.blocks.len(), sb.total), (0, 0));
    }

    fn labels() -> impl Strategy<Value = Vec<Feedback>> {
        prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { P } else { N }), 0..24)
    }

    proptest! {
        #[test]
        fn reconstruction_and_nonempty(ls in labels(), strict in any::<bool>()) {
            let order = if strict { BlockOrder::NegativesFirst } else { BlockOrder::Symmetric };
            let events = seq(&ls);
            let (blocks, rest) = segment_with_remainder(&events, order);
            let mut all: Vec<(usize, Feedback)> = blocks.iter().flat_map(Block::events).collect();
            all.extend(rest);
            all.sort_by_key(|e| e.0);
            prop_assert_eq!(all, events);
            for b in &blocks {
                prop_assert!(!b.negatives.is_empty() && !b.positives.is_empty());
                prop_assert!(b.negatives.iter().all(|i| !b.positives.contains(i)));
            }
        }

        #[test]
        fn union_laws(ls in labels()) {
            let events = seq(&ls);
            let (blocks, rest) = segment_with_remainder(&events, BlockOrder::Symmetric);
            let pos: Vec<usize> = blocks.iter().flat_map(|b| b.positives.clone()).collect();
            let neg: Vec<usize> = blocks.iter().flat_map(|b| b.negatives.clone()).collect();
            let all_pos: Vec<usize> = events.iter().filter(|e| e.1 == P).map(|e| e.0).collect();
            let all_neg: Vec<usize> = events.iter().filter(|e| e.1 == N).map(|e| e.0).collect();
            prop_assert!(pos.iter().all(|i| all_pos.contains(i)));
            prop_assert!(neg.iter().all(|i| all_neg.contains(i)));
            if rest.is_empty() {
                prop_assert_eq!(pos, all_pos);
                prop_assert_eq!(neg, all_neg);
            }
        }

        #[test]
        fn deterministic(ls in labels()) {
            let s = session(&ls);
            prop_assert_eq!(blocks_of(&s, 7, BlockOrder::Symmetric), blocks_of(&s, 7, BlockOrder::Symmetric));
        }
    }
}
