//! Endorsement accounting: marker and interval computation, the endorsement
//! predicate, incremental endorser-set maintenance, and evaluation of the
//! strong commit rules.
//!
//! A strong-vote for block `B'` endorses a block `B` when `B = B'`, or `B'`
//! extends `B` and the vote's marker is below `B`'s round (interval votes:
//! `B`'s round lies in the endorsed set). A block is `x`-strong committed
//! when some parent-linked triple of consecutive-round blocks above it has
//! at least `x + f + 1` endorsers on every member. The regular 3-chain rule
//! is the `x = f` special case.
//!
//! Endorsements are only counted from votes inside valid quorum
//! certificates known to the evaluator: QCs embedded in blocks, formed
//! locally from received votes, or carried in timeout messages. Loose votes
//! never aggregated into a QC do not count.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{BlockTree, TreeError, VoteHistory};
use crate::types::{
    BlockId, Endorsement, IntervalSet, ProtocolParams, ReplicaId, Round, StrongQC, StrongVote,
};

/// How endorsements are counted. `NaiveAllIndirect` (count every indirect
/// vote, no marker check) and `FbftDirectOnly` (count direct votes only)
/// exist as baselines and test oracles, not as protocol modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndorsementMode {
    MarkerOnly,
    WindowedIntervals(u64),
    FullIntervals,
    NaiveAllIndirect,
    FbftDirectOnly,
}

impl EndorsementMode {
    pub fn uses_intervals(&self) -> bool {
        matches!(
            self,
            EndorsementMode::WindowedIntervals(_) | EndorsementMode::FullIntervals
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AccountingError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("invalid certificate: {0}")]
    InvalidQc(#[from] crate::types::QcError),
    #[error("interval computation requires an interval mode")]
    NotIntervalMode,
}

/// Largest round of any block the replica voted for that conflicts with
/// `target`; 0 when there is none.
pub fn compute_marker(
    history: &VoteHistory,
    tree: &BlockTree,
    target: &BlockId,
) -> Result<Round, AccountingError> {
    tree.block(target)?;
    let mut marker = 0;
    for (voted, round) in history.iter() {
        if *round > marker && tree.conflicts(voted, target)? {
            marker = *round;
        }
    }
    Ok(marker)
}

/// Height analog of [`compute_marker`] for the height-based protocol:
/// largest *height* of any voted block conflicting `target`; 0 when none.
pub fn compute_height_marker(
    history: &VoteHistory,
    tree: &BlockTree,
    target: &BlockId,
) -> Result<u64, AccountingError> {
    tree.block(target)?;
    let mut marker = 0;
    for (voted, _) in history.iter() {
        if tree.conflicts(voted, target)? {
            marker = marker.max(tree.height_of(voted)?);
        }
    }
    Ok(marker)
}

/// Endorsed round intervals for a vote on `target`.
///
/// For every voted block `B'` conflicting `target`, the excluded interval is
/// `[lca(target, B').round + 1, B'.round]`; the result is `[lo, r]` minus the
/// union of exclusions, with `lo = 1` (full mode) or `max(1, r - window)`
/// (windowed mode) and `r` the round of `target`.
pub fn compute_intervals(
    history: &VoteHistory,
    tree: &BlockTree,
    target: &BlockId,
    mode: EndorsementMode,
) -> Result<IntervalSet, AccountingError> {
    let r = tree.round_of(target)?;
    let lo = match mode {
        EndorsementMode::FullIntervals => 1,
        EndorsementMode::WindowedIntervals(w) => r.saturating_sub(w).max(1),
        _ => return Err(AccountingError::NotIntervalMode),
    };
    let mut exclusions = Vec::new();
    for (voted, round) in history.iter() {
        if tree.conflicts(voted, target)? {
            let branch_point = tree.lowest_common_ancestor(target, voted)?;
            let r_l = tree.round_of(&branch_point)?;
            exclusions.push((r_l + 1, *round));
        }
    }
    Ok(IntervalSet::from_range_minus(lo, r, &exclusions))
}

/// The endorsement predicate: a strong-vote endorses `target` iff it voted
/// for `target` itself, or it voted for a descendant and `target`'s round
/// passes the vote's marker/interval declaration.
pub fn endorses(
    vote: &StrongVote,
    target: &BlockId,
    tree: &BlockTree,
) -> Result<bool, AccountingError> {
    if vote.block == *target {
        return Ok(true);
    }
    if !tree.extends(&vote.block, target)? {
        return Ok(false);
    }
    let target_round = tree.round_of(target)?;
    Ok(match &vote.endorsement {
        Endorsement::Marker(m) => *m < target_round,
        Endorsement::Intervals(set) => set.contains(target_round),
    })
}

/// Height-parameterized endorsement for the height-based protocol: a vote
/// `k`-endorses `target` iff it voted for `target`, or it voted for a
/// descendant and its height marker is below `k`.
pub fn k_endorses(
    vote: &StrongVote,
    target: &BlockId,
    tree: &BlockTree,
    k: u64,
) -> Result<bool, AccountingError> {
    if vote.block == *target {
        return Ok(true);
    }
    if !tree.extends(&vote.block, target)? {
        return Ok(false);
    }
    Ok(match &vote.endorsement {
        Endorsement::Marker(m) => *m < k,
        // Interval votes are not defined for the height-based protocol.
        Endorsement::Intervals(_) => false,
    })
}

/// Which commit-rule family the ledger evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommitRule {
    /// Round-based: triple `(B_k, B_k+1, B_k+2)`, committing `B_k` and its
    /// ancestors.
    RoundBased,
    /// Height-based: triple `(B_k-1, B_k, B_k+1)` with `k`-endorsements at
    /// the middle height, committing `B_k` and its ancestors.
    HeightBased,
}

/// Per-block endorser bookkeeping plus current strong-commit strengths.
///
/// For the height-based rule an endorser entry carries the minimal `k` for
/// which the vote `k`-endorses the block (0 for direct votes, marker + 1
/// for descendants); round-based entries are unconditional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndorsementLedger {
    params: ProtocolParams,
    mode: EndorsementMode,
    rule: CommitRule,
    endorsers: BTreeMap<BlockId, BTreeMap<ReplicaId, u64>>,
    strength: BTreeMap<BlockId, u32>,
    processed: BTreeSet<(BlockId, ReplicaId)>,
}

impl EndorsementLedger {
    pub fn new(params: ProtocolParams, mode: EndorsementMode, rule: CommitRule) -> Self {
        Self {
            params,
            mode,
            rule,
            endorsers: BTreeMap::new(),
            strength: BTreeMap::new(),
            processed: BTreeSet::new(),
        }
    }

    pub fn mode(&self) -> EndorsementMode {
        self.mode
    }

    /// Distinct replicas currently endorsing `b` (0 for unknown blocks).
    /// Under the height-based rule this counts entries unconditionally; use
    /// [`Self::k_endorser_count`] for the per-triple counts.
    pub fn endorser_count(&self, b: &BlockId) -> usize {
        self.endorsers.get(b).map_or(0, |m| m.len())
    }

    pub fn endorsers(&self, b: &BlockId) -> Vec<ReplicaId> {
        self.endorsers
            .get(b)
            .map_or_else(Vec::new, |m| m.keys().copied().collect())
    }

    fn k_endorser_count(&self, b: &BlockId, k: u64) -> usize {
        self.endorsers
            .get(b)
            .map_or(0, |m| m.values().filter(|&&thr| thr <= k).count())
    }

    /// Current strong-commit strength of `b`, if any triple qualifies.
    pub fn strength(&self, b: &BlockId) -> Option<u32> {
        self.strength.get(b).copied()
    }

    pub fn strengths(&self) -> impl Iterator<Item = (&BlockId, &u32)> {
        self.strength.iter()
    }

    /// Registers every vote of a certificate against the certified block and
    /// all its ancestors, then re-evaluates strengths. Returns the strictly
    /// increased `(block, strength)` pairs. Idempotent per
    /// `(qc.block, voter)` pair.
    pub fn register_qc(
        &mut self,
        qc: &StrongQC,
        tree: &BlockTree,
    ) -> Result<Vec<(BlockId, u32)>, AccountingError> {
        if qc.is_genesis() {
            return Ok(vec![]);
        }
        qc.validate(&self.params, None)?;
        tree.block(&qc.block)?;
        let cap = self.params.max_strength();
        let mut touched = false;
        for vote in &qc.votes {
            if !self.processed.insert((qc.block, vote.voter)) {
                continue;
            }
            // Walk from the certified block toward genesis. Every block on
            // the path is an ancestor of the voted block, so only the
            // marker/interval predicate is left to check. Stop once a block
            // has already reached the 2f cap: its ancestors are at the cap
            // too, so no further update is possible.
            let mut cur = tree.block(&qc.block)?;
            loop {
                if self.strength.get(&cur.id) == Some(&cap) {
                    break;
                }
                let qualifies = match self.mode {
                    EndorsementMode::NaiveAllIndirect => true,
                    EndorsementMode::FbftDirectOnly => cur.id == vote.block,
                    _ => match self.rule {
                        CommitRule::RoundBased => endorses(vote, &cur.id, tree)?,
                        CommitRule::HeightBased => true, // threshold stored below
                    },
                };
                if qualifies {
                    let threshold = match self.rule {
                        CommitRule::RoundBased => 0,
                        CommitRule::HeightBased => {
                            if cur.id == vote.block {
                                0
                            } else {
                                match &vote.endorsement {
                                    Endorsement::Marker(m) => m + 1,
                                    Endorsement::Intervals(_) => u64::MAX,
                                }
                            }
                        }
                    };
                    let entry = self
                        .endorsers
                        .entry(cur.id)
                        .or_default()
                        .entry(vote.voter)
                        .or_insert(u64::MAX);
                    if threshold < *entry {
                        *entry = threshold;
                        touched = true;
                    } else if *entry == u64::MAX && threshold == u64::MAX {
                        // Height-based entry from an interval vote: recorded
                        // but never countable.
                    }
                    if self.rule == CommitRule::RoundBased {
                        touched = true;
                    }
                }
                if cur.is_genesis() {
                    break;
                }
                cur = tree.block(&cur.parent)?;
            }
        }
        if !touched {
            return Ok(vec![]);
        }
        self.reevaluate(tree)
    }

    /// Registers a single direct vote outside any certificate. Used only by
    /// the direct-vote baseline, where the collecting leader forwards late
    /// votes individually.
    pub fn register_direct_vote(
        &mut self,
        vote: &StrongVote,
        tree: &BlockTree,
    ) -> Result<Vec<(BlockId, u32)>, AccountingError> {
        tree.block(&vote.block)?;
        if !self.processed.insert((vote.block, vote.voter)) {
            return Ok(vec![]);
        }
        self.endorsers
            .entry(vote.block)
            .or_default()
            .insert(vote.voter, 0);
        self.reevaluate(tree)
    }

    /// Recomputes strengths from the endorser maps and returns strictly
    /// increased entries ordered by height. Endorser sets only grow, so
    /// strengths are monotone non-decreasing over a run.
    fn reevaluate(&mut self, tree: &BlockTree) -> Result<Vec<(BlockId, u32)>, AccountingError> {
        let f = self.params.f;
        let quorum = self.params.quorum();
        let cap = self.params.max_strength();
        let mut best: BTreeMap<BlockId, u32> = BTreeMap::new();
        for (first, mid, last) in tree.consecutive_triples() {
            let count = match self.rule {
                CommitRule::RoundBased => self
                    .endorser_count(&first)
                    .min(self.endorser_count(&mid))
                    .min(self.endorser_count(&last)),
                CommitRule::HeightBased => {
                    let k = tree.height_of(&mid)?;
                    self.k_endorser_count(&first, k)
                        .min(self.k_endorser_count(&mid, k))
                        .min(self.k_endorser_count(&last, k))
                }
            };
            if count < quorum {
                continue;
            }
            let x = (count as u32 - f - 1).min(cap);
            // The rule commits the head of the triple and all ancestors:
            // the first block when round-based, the middle when height-based.
            let head = match self.rule {
                CommitRule::RoundBased => first,
                CommitRule::HeightBased => mid,
            };
            for id in tree.chain_to(&head)? {
                let e = best.entry(id).or_insert(0);
                *e = (*e).max(x);
            }
        }
        let mut updates = vec![];
        for (id, x) in best {
            let prev = self.strength.get(&id).copied();
            if prev.map_or(true, |p| x > p) {
                self.strength.insert(id, x);
                updates.push((id, x));
            }
        }
        updates.sort_by_key(|(id, _)| (tree.height_of(id).unwrap_or(0), *id));
        Ok(updates)
    }
}

/// One-shot strength query for `b` under the round-based rule, evaluated
/// directly from a ledger's endorser sets.
pub fn strong_commit_level(
    ledger: &EndorsementLedger,
    tree: &BlockTree,
    b: &BlockId,
) -> Result<Option<u32>, AccountingError> {
    tree.block(b)?;
    Ok(ledger.strength(b))
}
