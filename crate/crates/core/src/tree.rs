//! Per-replica block tree: insertion, ancestry and conflict queries,
//! certified-chain tracking, and the replica's own vote history.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{genesis_block, Block, BlockId, Height, ProtocolParams, Round, StrongQC};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
    #[error("parent {0} not present (orphan insertion rejected)")]
    OrphanParent(BlockId),
    #[error("block round {round} does not exceed certified parent round {qc_round}")]
    RoundNotAboveQc { round: Round, qc_round: Round },
    #[error("block height {height} is not parent height {parent_height} + 1")]
    BadHeight { height: Height, parent_height: Height },
    #[error("embedded certificate does not certify the parent")]
    QcParentMismatch,
    #[error("invalid embedded certificate: {0}")]
    InvalidQc(#[from] crate::types::QcError),
}

/// Block tree rooted at genesis. Orphans are rejected, not buffered: the
/// simulator delivers blocks causally, so a parent is always seen first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockTree {
    params: ProtocolParams,
    blocks: BTreeMap<BlockId, Block>,
    children: BTreeMap<BlockId, BTreeSet<BlockId>>,
    /// Highest-vote-count certificate known per certified block.
    certified: BTreeMap<BlockId, StrongQC>,
    genesis: BlockId,
}

impl BlockTree {
    pub fn new(params: ProtocolParams) -> Self {
        let g = genesis_block();
        let gid = g.id;
        let mut blocks = BTreeMap::new();
        blocks.insert(gid, g);
        Self {
            params,
            blocks,
            children: BTreeMap::new(),
            certified: BTreeMap::new(),
            genesis: gid,
        }
    }

    pub fn genesis(&self) -> BlockId {
        self.genesis
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn contains(&self, id: &BlockId) -> bool {
        self.blocks.contains_key(id)
    }

    pub fn get(&self, id: &BlockId) -> Option<&Block> {
        self.blocks.get(id)
    }

    pub fn block(&self, id: &BlockId) -> Result<&Block, TreeError> {
        self.blocks.get(id).ok_or(TreeError::UnknownBlock(*id))
    }

    pub fn round_of(&self, id: &BlockId) -> Result<Round, TreeError> {
        Ok(self.block(id)?.round)
    }

    pub fn height_of(&self, id: &BlockId) -> Result<Height, TreeError> {
        Ok(self.block(id)?.height)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.values()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false // genesis is always present
    }

    /// Inserts a block after structural validation, recording its embedded
    /// certificate for the parent. Re-inserting the same id is a no-op.
    /// Signature checks are the caller's job; the tree checks chaining only.
    pub fn insert_block(&mut self, b: Block) -> Result<(), TreeError> {
        if self.blocks.contains_key(&b.id) {
            return Ok(());
        }
        if !self.blocks.contains_key(&b.parent) {
            return Err(TreeError::OrphanParent(b.parent));
        }
        if b.qc.block != b.parent {
            return Err(TreeError::QcParentMismatch);
        }
        if b.round <= b.qc.round {
            return Err(TreeError::RoundNotAboveQc {
                round: b.round,
                qc_round: b.qc.round,
            });
        }
        let parent_height = self.blocks[&b.parent].height;
        if b.height != parent_height + 1 {
            return Err(TreeError::BadHeight {
                height: b.height,
                parent_height,
            });
        }
        b.qc.validate(&self.params, None)?;
        self.record_certificate(b.qc.clone())?;
        self.children.entry(b.parent).or_default().insert(b.id);
        self.blocks.insert(b.id, b);
        Ok(())
    }

    /// Records a certificate for a present block, keeping the QC with the
    /// most votes when several exist for the same block.
    pub fn record_certificate(&mut self, qc: StrongQC) -> Result<(), TreeError> {
        if qc.is_genesis() {
            return Ok(());
        }
        if !self.blocks.contains_key(&qc.block) {
            return Err(TreeError::UnknownBlock(qc.block));
        }
        match self.certified.get(&qc.block) {
            Some(existing) if existing.votes.len() >= qc.votes.len() => {}
            _ => {
                self.certified.insert(qc.block, qc);
            }
        }
        Ok(())
    }

    /// Certificate currently recorded for a block, if any. Genesis is
    /// implicitly certified.
    pub fn certificate(&self, id: &BlockId) -> Option<&StrongQC> {
        self.certified.get(id)
    }

    pub fn is_certified(&self, id: &BlockId) -> bool {
        *id == self.genesis || self.certified.contains_key(id)
    }

    /// True iff `ancestor` lies on `descendant`'s path to genesis. A block
    /// extends itself.
    pub fn extends(&self, descendant: &BlockId, ancestor: &BlockId) -> Result<bool, TreeError> {
        let anc = self.block(ancestor)?;
        let mut cur = self.block(descendant)?;
        loop {
            if cur.id == anc.id {
                return Ok(true);
            }
            if cur.height <= anc.height || cur.is_genesis() {
                return Ok(false);
            }
            cur = self.block(&cur.parent)?;
        }
    }

    /// Two blocks conflict iff neither extends the other.
    pub fn conflicts(&self, a: &BlockId, b: &BlockId) -> Result<bool, TreeError> {
        Ok(!self.extends(a, b)? && !self.extends(b, a)?)
    }

    /// Deepest block that both `a` and `b` extend.
    pub fn lowest_common_ancestor(&self, a: &BlockId, b: &BlockId) -> Result<BlockId, TreeError> {
        let mut x = self.block(a)?;
        let mut y = self.block(b)?;
        while x.height > y.height {
            x = self.block(&x.parent)?;
        }
        while y.height > x.height {
            y = self.block(&y.parent)?;
        }
        while x.id != y.id {
            x = self.block(&x.parent)?;
            y = self.block(&y.parent)?;
        }
        Ok(x.id)
    }

    /// Path from genesis to `id`, inclusive, in increasing height order.
    pub fn chain_to(&self, id: &BlockId) -> Result<Vec<BlockId>, TreeError> {
        let mut path = vec![];
        let mut cur = self.block(id)?;
        loop {
            path.push(cur.id);
            if cur.is_genesis() {
                break;
            }
            cur = self.block(&cur.parent)?;
        }
        path.reverse();
        Ok(path)
    }

    /// Tips of the maximal-height chains whose every block is certified.
    /// Ties all returned, sorted by id.
    pub fn longest_certified_chains(&self) -> Vec<BlockId> {
        let mut best_height = 0;
        let mut tips: Vec<BlockId> = vec![self.genesis];
        let mut stack = vec![self.genesis];
        while let Some(id) = stack.pop() {
            if let Some(kids) = self.children.get(&id) {
                for kid in kids {
                    if !self.certified.contains_key(kid) {
                        continue;
                    }
                    let h = self.blocks[kid].height;
                    match h.cmp(&best_height) {
                        std::cmp::Ordering::Greater => {
                            best_height = h;
                            tips = vec![*kid];
                        }
                        std::cmp::Ordering::Equal => tips.push(*kid),
                        std::cmp::Ordering::Less => {}
                    }
                    stack.push(*kid);
                }
            }
        }
        tips.sort_unstable();
        tips
    }

    /// All parent-linked triples `(a, b, c)` with consecutive round numbers;
    /// the raw material of every 3-chain commit rule.
    pub fn consecutive_triples(&self) -> Vec<(BlockId, BlockId, BlockId)> {
        let mut out = vec![];
        for b in self.blocks.values() {
            if b.is_genesis() {
                continue;
            }
            let Some(parent) = self.blocks.get(&b.parent) else {
                continue;
            };
            if parent.is_genesis() || parent.round + 1 != b.round {
                continue;
            }
            let Some(gp) = self.blocks.get(&parent.parent) else {
                continue;
            };
            if gp.round + 1 != parent.round {
                continue;
            }
            out.push((gp.id, parent.id, b.id));
        }
        out.sort_unstable();
        out
    }
}

/// Ordered list of (block, round) pairs this replica voted for. DiemBFT's
/// voting rule makes the rounds strictly increase.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VoteHistory {
    voted: Vec<(BlockId, Round)>,
}

impl VoteHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, block: BlockId, round: Round) {
        debug_assert!(self.voted.last().map_or(true, |&(_, r)| round > r));
        self.voted.push((block, round));
    }

    pub fn iter(&self) -> impl Iterator<Item = &(BlockId, Round)> {
        self.voted.iter()
    }

    pub fn last_round(&self) -> Round {
        self.voted.last().map_or(0, |&(_, r)| r)
    }

    pub fn len(&self) -> usize {
        self.voted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voted.is_empty()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::types::{
        genesis_id, payload_digest, Endorsement, MockSigner, ReplicaId, Signature, StrongVote,
    };

    fn params() -> ProtocolParams {
        ProtocolParams::new(4, 1).unwrap()
    }

    fn qc_for(block: BlockId, round: Round, voters: &[u32]) -> StrongQC {
        let signer = MockSigner::new(4);
        let votes = voters
            .iter()
            .map(|&v| {
                StrongVote::new(&signer, ReplicaId(v), block, round, Endorsement::Marker(0)).unwrap()
            })
            .collect();
        StrongQC { block, round, votes }
    }

    pub(crate) fn make_block(parent: &Block, round: Round, proposer: u32, tag: u8) -> Block {
        let qc = if parent.is_genesis() {
            StrongQC::genesis(parent.id)
        } else {
            qc_for(parent.id, parent.round, &[0, 1, 2])
        };
        let payload = vec![tag];
        let pd = payload_digest(&payload);
        let id = crate::types::hash_block_header(
            &parent.id,
            &qc,
            round,
            parent.height + 1,
            &pd,
            ReplicaId(proposer),
            None,
            &[],
        );
        Block {
            id,
            parent: parent.id,
            qc,
            round,
            height: parent.height + 1,
            payload,
            proposer: ReplicaId(proposer),
            tc: None,
            commit_log: vec![],
            signature: Signature([0; 32]),
        }
    }

    #[test]
    fn insert_and_certify() {
        let mut t = BlockTree::new(params());
        let g = t.block(&genesis_id()).unwrap().clone();
        let b1 = make_block(&g, 1, 1, 0);
        t.insert_block(b1.clone()).unwrap();
        assert!(t.contains(&b1.id));
        // Genesis qc is the implicit certificate; no entry recorded for it.
        assert!(t.is_certified(&genesis_id()));

        // Idempotent re-insert.
        let before = t.len();
        t.insert_block(b1.clone()).unwrap();
        assert_eq!(t.len(), before);

        // Orphan rejected.
        let b2 = make_block(&b1, 2, 2, 0);
        let b3 = make_block(&b2, 3, 3, 0);
        assert_eq!(
            t.insert_block(b3.clone()),
            Err(TreeError::OrphanParent(b2.id))
        );
        t.insert_block(b2.clone()).unwrap();
        t.insert_block(b3).unwrap();
        // Inserting b2 recorded a certificate for b1.
        assert!(t.is_certified(&b1.id));
    }

    #[test]
    fn extends_conflicts_lca() {
        let mut t = BlockTree::new(params());
        let g = t.block(&genesis_id()).unwrap().clone();
        let b1 = make_block(&g, 1, 1, 0);
        let b2 = make_block(&b1, 2, 2, 0);
        let b2x = make_block(&b1, 2, 2, 1);
        let b3 = make_block(&b2, 3, 3, 0);
        for b in [&b1, &b2, &b2x, &b3] {
            t.insert_block(b.clone()).unwrap();
        }
        // Reflexivity.
        assert!(t.extends(&b2.id, &b2.id).unwrap());
        // Genesis is ancestor of every block.
        assert!(t.extends(&b3.id, &genesis_id()).unwrap());
        // Siblings conflict both directions.
        assert!(!t.extends(&b2.id, &b2x.id).unwrap());
        assert!(!t.extends(&b2x.id, &b2.id).unwrap());
        assert!(t.conflicts(&b2.id, &b2x.id).unwrap());
        // Self never conflicts; grandparent/grandchild never conflict.
        assert!(!t.conflicts(&b2.id, &b2.id).unwrap());
        assert!(!t.conflicts(&b1.id, &b3.id).unwrap());
        // LCA cases.
        assert_eq!(t.lowest_common_ancestor(&b3.id, &b3.id).unwrap(), b3.id);
        assert_eq!(t.lowest_common_ancestor(&b2.id, &b2x.id).unwrap(), b1.id);
        assert_eq!(
            t.lowest_common_ancestor(&b3.id, &genesis_id()).unwrap(),
            genesis_id()
        );
        // Unknown id errors.
        let bogus = BlockId([9; 32]);
        assert!(t.extends(&bogus, &b1.id).is_err());
    }

    #[test]
    fn longest_certified_tips() {
        let mut t = BlockTree::new(params());
        // Only genesis.
        assert_eq!(t.longest_certified_chains(), vec![genesis_id()]);

        let g = t.block(&genesis_id()).unwrap().clone();
        let b1 = make_block(&g, 1, 1, 0);
        let b2 = make_block(&b1, 2, 2, 0);
        let b3 = make_block(&b2, 3, 3, 0);
        for b in [&b1, &b2, &b3] {
            t.insert_block(b.clone()).unwrap();
        }
        // b3 itself is not certified yet; certify it directly.
        t.record_certificate(qc_for(b3.id, 3, &[0, 1, 2])).unwrap();
        assert_eq!(t.longest_certified_chains(), vec![b3.id]);

        // A certified fork of equal height: both tips returned.
        let c2 = make_block(&b1, 2, 2, 9);
        let c3 = make_block(&c2, 3, 3, 9);
        t.insert_block(c2).unwrap();
        t.insert_block(c3.clone()).unwrap();
        t.record_certificate(qc_for(c3.id, 3, &[0, 1, 2])).unwrap();
        let mut expect = vec![b3.id, c3.id];
        expect.sort_unstable();
        assert_eq!(t.longest_certified_chains(), expect);
    }

    #[test]
    fn qc_merge_keeps_largest() {
        let mut t = BlockTree::new(params());
        let g = t.block(&genesis_id()).unwrap().clone();
        let b1 = make_block(&g, 1, 1, 0);
        t.insert_block(b1.clone()).unwrap();
        t.record_certificate(qc_for(b1.id, 1, &[0, 1, 2])).unwrap();
        assert_eq!(t.certificate(&b1.id).unwrap().votes.len(), 3);
        t.record_certificate(qc_for(b1.id, 1, &[0, 1, 2, 3])).unwrap();
        assert_eq!(t.certificate(&b1.id).unwrap().votes.len(), 4);
        // Smaller one does not replace the bigger one.
        t.record_certificate(qc_for(b1.id, 1, &[1, 2, 3])).unwrap();
        assert_eq!(t.certificate(&b1.id).unwrap().votes.len(), 4);
    }
}
